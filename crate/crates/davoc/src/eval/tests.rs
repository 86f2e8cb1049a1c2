use super::*;
use proptest::prelude::*;

/// Independent PR-AUC oracle: enumerate every distinct score as a
/// threshold (predict positive iff score >= threshold) and recompute
/// tp/fp from scratch at each threshold by scanning all items.
fn pr_auc_oracle(scores: &[f64], labels: &[Label]) -> f64 {
    let n_pos = labels.iter().filter(|l| **l == Label::Pathological).count();
    assert!(n_pos > 0);
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for &thr in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= thr {
                match l {
                    Label::Pathological => tp += 1,
                    Label::Control => fp += 1,
                }
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    auc
}

fn labels_from_bits(bits: &[bool]) -> Vec<Label> {
    bits.iter()
        .map(|b| if *b { Label::Pathological } else { Label::Control })
        .collect()
}

#[test]
fn perfect_separation_gives_auc_one() {
    let scores = [0.9, 0.8, 0.2, 0.1];
    let labels = labels_from_bits(&[true, true, false, false]);
    let curve = pr_auc(&scores, &labels).unwrap();
    assert_eq!(curve.auc, 1.0);
}

#[test]
fn hand_computed_interleaved_case() {
    // groups: 0.9 (P) -> r=1/2 p=1; 0.8 (C) -> dr=0; 0.7 (P) -> r=1 p=2/3
    let scores = [0.9, 0.8, 0.7, 0.6];
    let labels = labels_from_bits(&[true, false, true, false]);
    let curve = pr_auc(&scores, &labels).unwrap();
    assert!((curve.auc - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn all_tied_scores_give_prevalence() {
    let scores = [0.5; 6];
    let labels = labels_from_bits(&[true, false, false, true, false, false]);
    let curve = pr_auc(&scores, &labels).unwrap();
    assert!((curve.auc - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(curve.points.len(), 1);
}

#[test]
fn tie_group_matches_oracle_on_fixed_case() {
    let scores = [0.3, 0.7, 0.7, 0.1, 0.7, 0.3, 0.9, 0.1];
    let labels = labels_from_bits(&[false, true, false, true, true, false, false, true]);
    let curve = pr_auc(&scores, &labels).unwrap();
    let oracle = pr_auc_oracle(&scores, &labels);
    assert!((curve.auc - oracle).abs() < 1e-12);
}

#[test]
fn order_of_inputs_is_irrelevant() {
    let scores = [0.3, 0.7, 0.7, 0.1, 0.9];
    let labels = labels_from_bits(&[false, true, false, true, true]);
    let a = pr_auc(&scores, &labels).unwrap().auc;
    let perm = [4usize, 0, 2, 1, 3];
    let scores_p: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
    let labels_p: Vec<Label> = perm.iter().map(|&i| labels[i]).collect();
    let b = pr_auc(&scores_p, &labels_p).unwrap().auc;
    assert_eq!(a, b);
}

#[test]
fn rejects_degenerate_inputs() {
    let labels = labels_from_bits(&[true, false]);
    assert!(matches!(
        pr_auc(&[0.1], &labels),
        Err(EvalError::LengthMismatch { .. })
    ));
    assert!(matches!(
        pr_auc(&[0.1, 0.2], &labels_from_bits(&[false, false])),
        Err(EvalError::NoPositives)
    ));
    assert!(matches!(
        pr_auc(&[0.1, f64::NAN], &labels),
        Err(EvalError::NonFiniteScore(1))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Exhaustive-threshold oracle agreement for small instances,
    /// including tied scores (quantized grid forces collisions).
    #[test]
    fn matches_brute_force_oracle(
        raw in proptest::collection::vec((0i32..8, any::<bool>()), 1..=8),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(q, _)| *q as f64 / 4.0).collect();
        let mut bits: Vec<bool> = raw.iter().map(|(_, b)| *b).collect();
        bits[0] = true; // guarantee a positive
        let labels = labels_from_bits(&bits);
        let curve = pr_auc(&scores, &labels).unwrap();
        let oracle = pr_auc_oracle(&scores, &labels);
        prop_assert!((curve.auc - oracle).abs() < 1e-12);
    }

    /// Strictly monotone score transforms leave the AUC unchanged:
    /// the metric depends only on the ordering and tie structure.
    #[test]
    fn invariant_under_monotone_transforms(
        raw in proptest::collection::vec((-20i32..20, any::<bool>()), 2..=16),
        scale in 1u8..5,
        shift in -3i8..3,
    ) {
        let scores: Vec<f64> = raw.iter().map(|(q, _)| *q as f64 / 8.0).collect();
        let mut bits: Vec<bool> = raw.iter().map(|(_, b)| *b).collect();
        bits[0] = true;
        let labels = labels_from_bits(&bits);
        let base = pr_auc(&scores, &labels).unwrap().auc;

        let affine: Vec<f64> = scores
            .iter()
            .map(|s| f64::from(scale) * s + f64::from(shift))
            .collect();
        prop_assert_eq!(pr_auc(&affine, &labels).unwrap().auc, base);

        // cube is strictly increasing on all of R and exact on this grid
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(pr_auc(&cubed, &labels).unwrap().auc, base);

        let atan: Vec<f64> = scores.iter().map(|s| s.atan()).collect();
        prop_assert_eq!(pr_auc(&atan, &labels).unwrap().auc, base);
    }
}

#[test]
fn aggregate_mean_and_sample_std() {
    let s = aggregate_seeds(&[0.8, 0.9, 1.0]).unwrap();
    assert!((s.mean - 0.9).abs() < 1e-15);
    assert!((s.std - 0.1).abs() < 1e-12);
    let single = aggregate_seeds(&[0.7]).unwrap();
    assert_eq!(single.std, 0.0);
    assert!(matches!(aggregate_seeds(&[]), Err(EvalError::EmptyRuns)));
}

// ---- Welch t-test oracle -------------------------------------------------

/// Unnormalized Student-t density; the oracle avoids gamma functions by
/// normalizing through its own quadrature.
fn t_kernel(x: f64, dof: f64) -> f64 {
    (1.0 + x * x / dof).powf(-(dof + 1.0) / 2.0)
}

/// Simpson quadrature of `t_kernel` over [a, inf) via x = a + u/(1-u).
fn tail_integral(a: f64, dof: f64) -> f64 {
    let n = 20_000usize; // even
    let h = 1.0 / n as f64;
    let f = |u: f64| -> f64 {
        if u >= 1.0 {
            return 0.0;
        }
        let x = a + u / (1.0 - u);
        let jac = 1.0 / ((1.0 - u) * (1.0 - u));
        t_kernel(x, dof) * jac
    };
    let mut acc = f(0.0) + f(1.0);
    for i in 1..n {
        let u = i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(u);
    }
    acc * h / 3.0
}

/// Two-sided p-value by direct numerical integration of the t density.
fn welch_p_oracle(a: &[f64], b: &[f64]) -> f64 {
    let stat = |x: &[f64]| -> (f64, f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v, n)
    };
    let (ma, va, na) = stat(a);
    let (mb, vb, nb) = stat(b);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let total = 2.0 * tail_integral(0.0, dof);
    2.0 * tail_integral(t.abs(), dof) / total
}

#[test]
fn welch_matches_quadrature_oracle() {
    let a = [0.82, 0.85, 0.79, 0.88, 0.84];
    let b = [0.70, 0.74, 0.69, 0.77, 0.72];
    let p = welch_t_test(&a, &b).unwrap();
    let oracle = welch_p_oracle(&a, &b);
    assert!(
        (p - oracle).abs() < 1e-8,
        "p = {p}, oracle = {oracle}"
    );
    assert!(p < 0.05, "clearly separated samples should be significant");
}

#[test]
fn welch_overlapping_samples_not_significant() {
    let a = [0.80, 0.83, 0.78, 0.81, 0.84];
    let b = [0.79, 0.84, 0.80, 0.82, 0.77];
    let p = welch_t_test(&a, &b).unwrap();
    let oracle = welch_p_oracle(&a, &b);
    assert!((p - oracle).abs() < 1e-8);
    assert!(p > 0.2, "overlapping samples should not be significant, p = {p}");
}

#[test]
fn welch_identical_samples_give_p_one() {
    let a = [0.5, 0.6, 0.7];
    let p = welch_t_test(&a, &a).unwrap();
    assert!((p - 1.0).abs() < 1e-12);
}

#[test]
fn welch_unequal_variances_match_oracle() {
    let a = [1.0, 1.1, 0.9, 1.05, 0.95, 1.02];
    let b = [0.2, 1.9, 0.5, 1.4, 0.1];
    let p = welch_t_test(&a, &b).unwrap();
    let oracle = welch_p_oracle(&a, &b);
    assert!((p - oracle).abs() < 1e-8, "p = {p}, oracle = {oracle}");
}

#[test]
fn welch_degenerate_constant_samples() {
    assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
    assert_eq!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 0.0);
    assert!(matches!(
        welch_t_test(&[1.0], &[1.0, 2.0]),
        Err(EvalError::TooFewValues("a"))
    ));
}

#[test]
fn scores_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    let rows = vec![
        ScoredUtterance::new("u0", 0.91, Label::Pathological, Device::Source),
        ScoredUtterance::new("u1", 0.12, Label::Control, Device::Target),
    ];
    write_scores_csv(&path, &rows).unwrap();
    let back = read_scores_csv(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].utterance_id, "u0");
    assert_eq!(back[0].score, 0.91);
    assert_eq!(back[0].parsed_label(), Some(Label::Pathological));
    assert_eq!(back[1].device, "target");
}

#[test]
fn random_scores_average_to_prevalence() {
    // A scorer with no information about the labels has expected average
    // precision equal to the positive prevalence; at n = 10^4 every trial
    // should land within a tight band around it.
    use rand::Rng;
    let n = 10_000;
    let mut label_rng = crate::rng::stream(3, "eval/prevalence-labels");
    let labels: Vec<Label> = (0..n)
        .map(|_| {
            if label_rng.random::<f64>() < 0.3 {
                Label::Pathological
            } else {
                Label::Control
            }
        })
        .collect();
    let n_pos = labels.iter().filter(|l| **l == Label::Pathological).count();
    let prevalence = n_pos as f64 / n as f64;
    for trial in 0..100u64 {
        let mut score_rng = crate::rng::stream_indexed(3, "eval/prevalence-scores", trial);
        let scores: Vec<f64> = (0..n).map(|_| score_rng.random::<f64>()).collect();
        let auc = pr_auc(&scores, &labels).unwrap().auc;
        assert!(
            (auc - prevalence).abs() <= 0.02,
            "trial {trial}: random-score AP {auc} strayed from prevalence {prevalence}"
        );
    }
}

#[test]
fn welch_separates_nearly_constant_samples()  {
    // Two tightly clustered samples a unit apart must come out decisively
    // different even when the variances are at floating-point noise level.
    let a = [0.0, 0.0, 0.0];
    let b = [1.0, 1.0 + 1e-9, 1.0 - 1e-9];
    let p = welch_t_test(&a, &b).unwrap();
    assert!(p < 0.01, "p = {p}");
    assert!(p.is_finite());
}
