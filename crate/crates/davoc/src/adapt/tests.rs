use super::*;
use crate::dsp::{FeatureConfig, FeatureKind};
use crate::models::ModelKind;
use ndarray::Array2;

fn tiny_feature() -> FeatureConfig {
    let mut f = FeatureConfig::new(FeatureKind::Mfcc, 25.0, false);
    f.n_mel_filters = 8;
    f.n_cepstra = 4;
    f.context = 3;
    f
}

fn tiny_config(regime: Regime, kind: ModelKind) -> TrainConfig {
    // tiny pools mean few optimizer steps per epoch, so the toy tests
    // run hotter than the desk defaults
    TrainConfig {
        hidden: 8,
        device_hidden: 8,
        epochs: 10,
        lr: 1e-2,
        batch_size: 4,
        seed: 7,
        ..TrainConfig::new(regime, kind, tiny_feature())
    }
}

/// Fabricated, strongly separable data: even feature dims carry the
/// pathology signal (±1.5), odd dims the device signal (±3.0), plus
/// noise. `n_src`/`n_tgt` are per-class counts.
fn make_data(kind: ModelKind, n_src: usize, n_tgt: usize, seed: u64) -> (CorpusData, DomainSplit) {
    let feature = tiny_feature();
    let config = crate::models::ModelConfig::new(kind, feature.clone(), 8, 8);
    let dims = config.input_dim();
    let mut r = rng::stream(seed, "adapt-test/features");
    let mut items = Vec::new();
    let mut split = DomainSplit::default();
    for device in [Device::Source, Device::Target] {
        let (dp, n) = match device {
            Device::Source => ("src", n_src),
            Device::Target => ("tgt", n_tgt),
        };
        for label in [Label::Control, Label::Pathological] {
            let lp = match label {
                Label::Control => "ctrl",
                Label::Pathological => "path",
            };
            for k in 0..n {
                let id = format!("{dp}-{lp}-{k:02}");
                let data = Array2::from_shape_fn((6, dims), |(_, j)| {
                    let mut v = 0.5 * rng::normal(&mut r);
                    if j % 2 == 0 {
                        v += match label {
                            Label::Pathological => 1.5,
                            Label::Control => -1.5,
                        };
                    } else {
                        v += match device {
                            Device::Target => 3.0,
                            Device::Source => -3.0,
                        };
                    }
                    v
                });
                items.push((
                    id.clone(),
                    device,
                    label,
                    FeatureMatrix {
                        data,
                        config: feature.clone(),
                        utterance_id: id.clone(),
                    },
                ));
                let section = match device {
                    Device::Source if k < (3 * n).div_ceil(4) => Subset::SourceTrain,
                    Device::Source => Subset::SourceTest,
                    Device::Target if k < n / 2 => Subset::TargetAdapt,
                    Device::Target => Subset::TargetTest,
                };
                split.section_mut(section).push(id);
            }
        }
    }
    (CorpusData::from_parts(config, items).unwrap(), split)
}

fn model_bytes(m: &ModelGraph) -> Vec<u8> {
    let mut v = Vec::new();
    m.save_to(&mut v).unwrap();
    v
}

// ---- schedules and parsing -----------------------------------------------

#[test]
fn lambda_schedules_match_their_closed_forms() {
    let c = LambdaSpec::Constant(0.8);
    assert_eq!(c.value(0.0), 0.8);
    assert_eq!(c.value(1.0), 0.8);

    let ramp = LambdaSpec::Ramp(2.0);
    assert_eq!(ramp.value(0.0), 0.0);
    let expected_end = 2.0 * (2.0 / (1.0 + (-10.0f64).exp()) - 1.0);
    assert!((ramp.value(1.0) - expected_end).abs() < 1e-15);
    assert!((ramp.value(1.0) - 2.0).abs() < 1e-3, "saturates near λ0");
    let expected_mid = 2.0 * (2.0 / (1.0 + (-5.0f64).exp()) - 1.0);
    assert!((ramp.value(0.5) - expected_mid).abs() < 1e-15);
    // monotone in p
    let mut prev = -1.0;
    for i in 0..=20 {
        let v = ramp.value(i as f64 / 20.0);
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn lambda_and_regime_strings_round_trip() {
    for spec in [LambdaSpec::Constant(1.5), LambdaSpec::Ramp(0.25)] {
        assert_eq!(spec.to_string().parse::<LambdaSpec>().unwrap(), spec);
    }
    assert_eq!("0.5".parse::<LambdaSpec>().unwrap(), LambdaSpec::Constant(0.5));
    assert!("linear:1".parse::<LambdaSpec>().is_err());
    assert!("constant:abc".parse::<LambdaSpec>().is_err());
    assert!(LambdaSpec::Constant(-1.0).validate().is_err());

    for regime in Regime::all() {
        assert_eq!(regime.as_str().parse::<Regime>().unwrap(), regime);
    }
    assert!("feedforward".parse::<Regime>().is_err());
}

// ---- split files ---------------------------------------------------------

#[test]
fn split_file_round_trips() {
    let (_, split) = make_data(ModelKind::Mlp, 4, 4, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.txt");
    split.write(&path).unwrap();
    let loaded = DomainSplit::read(&path).unwrap();
    assert_eq!(loaded, split);
}

#[test]
fn split_parser_rejects_malformed_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let err = DomainSplit::read(&write("a.txt", "utt-1\n[source_train]\n")).unwrap_err();
    assert!(matches!(err, AdaptError::BadSplit(_)), "{err}");
    let err = DomainSplit::read(&write("b.txt", "[nonsense]\nutt-1\n")).unwrap_err();
    assert!(matches!(err, AdaptError::BadSplit(_)), "{err}");
    let err = DomainSplit::read(&write(
        "c.txt",
        "[source_train]\nutt-1\n[source_train]\nutt-2\n",
    ))
    .unwrap_err();
    assert!(matches!(err, AdaptError::BadSplit(_)), "{err}");
    let err = DomainSplit::read(&write(
        "d.txt",
        "[source_train]\nutt-1\n[target_test]\nutt-1\n",
    ))
    .unwrap_err();
    assert!(matches!(err, AdaptError::BadSplit(_)), "{err}");
    // comments and blank lines are fine
    let ok = DomainSplit::read(&write(
        "e.txt",
        "# header comment\n[source_train]\n\nutt-1\n[source_test]\nutt-2\n",
    ))
    .unwrap();
    assert_eq!(ok.source_train, vec!["utt-1"]);
    assert_eq!(ok.source_test, vec!["utt-2"]);
}

// ---- training behavior ---------------------------------------------------

#[test]
fn training_is_bit_deterministic() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 2);
    let config = tiny_config(Regime::DatUnsupervised, ModelKind::Mlp);
    let a = train(&config, &data, &split).unwrap();
    let b = train(&config, &data, &split).unwrap();
    assert_eq!(model_bytes(&a.model), model_bytes(&b.model));
    assert_eq!(a.metrics, b.metrics);
    // a different seed moves the parameters
    let c = train(
        &TrainConfig {
            seed: 8,
            ..config.clone()
        },
        &data,
        &split,
    )
    .unwrap();
    assert_ne!(model_bytes(&a.model), model_bytes(&c.model));
}

#[test]
fn lambda_zero_dat_is_bit_identical_to_source_only() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 3);
    let source = tiny_config(Regime::SourceOnly, ModelKind::Mlp);
    let dat = TrainConfig {
        regime: Regime::DatUnsupervised,
        lambda: LambdaSpec::Constant(0.0),
        ..source.clone()
    };
    let a = train(&source, &data, &split).unwrap();
    let b = train(&dat, &data, &split).unwrap();
    assert_eq!(model_bytes(&a.model), model_bytes(&b.model));
    // identical loss trajectories too, not just endpoints
    for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(ma.label_loss.to_bits(), mb.label_loss.to_bits());
        assert_eq!(ma.train_pr_auc.to_bits(), mb.train_pr_auc.to_bits());
    }
}

#[test]
fn zero_epoch_finetune_returns_the_pretrained_model_unchanged() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 4);
    let b1 = train(&tiny_config(Regime::SourceOnly, ModelKind::Mlp), &data, &split).unwrap();
    let ft_config = TrainConfig {
        regime: Regime::FrozenFineTune,
        epochs: 0,
        ..tiny_config(Regime::FrozenFineTune, ModelKind::Mlp)
    };
    let ft = finetune(&ft_config, &data, &split, &b1.model).unwrap();
    assert_eq!(model_bytes(&b1.model), model_bytes(&ft.model));
    assert!(ft.metrics.is_empty());
}

#[test]
fn finetune_moves_only_the_label_head() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 5);
    let b1 = train(&tiny_config(Regime::SourceOnly, ModelKind::Mlp), &data, &split).unwrap();
    let ft_config = TrainConfig {
        epochs: 5,
        ..tiny_config(Regime::FrozenFineTune, ModelKind::Mlp)
    };
    let ft = finetune(&ft_config, &data, &split, &b1.model).unwrap();

    let before: Vec<_> = b1.model.all_params();
    let after: Vec<_> = ft.model.all_params();
    assert_eq!(before.len(), after.len());
    let mut label_moved = false;
    for (p, q) in before.iter().zip(&after) {
        assert_eq!(p.name, q.name);
        let same = p.value == q.value;
        if p.name.starts_with("label") {
            label_moved |= !same;
        } else {
            assert!(same, "frozen parameter '{}' moved", p.name);
        }
    }
    assert!(label_moved, "fine-tuning must actually update the label head");
}

#[test]
fn source_only_learns_separable_data() {
    let (data, split) = make_data(ModelKind::Mlp, 8, 4, 6);
    let config = TrainConfig {
        epochs: 30,
        ..tiny_config(Regime::SourceOnly, ModelKind::Mlp)
    };
    let run = train(&config, &data, &split).unwrap();
    assert_eq!(run.metrics.len(), 30);
    let first = &run.metrics[0];
    let last = run.metrics.last().unwrap();
    assert!(last.label_loss < first.label_loss, "loss should fall");
    assert!(last.train_pr_auc > 0.95, "train PR-AUC {}", last.train_pr_auc);
    assert!(run.metrics.iter().all(|m| m.device_loss == 0.0 && m.lambda == 0.0));
    let test_auc = subset_pr_auc(&run.model, &data, &split.source_test).unwrap();
    assert!(test_auc > 0.9, "source-test PR-AUC {test_auc}");
    assert_eq!(run.target_label_reads, 0);
}

#[test]
fn dat_regimes_report_device_loss_and_respect_label_rules() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 7);
    let unsup = train(
        &tiny_config(Regime::DatUnsupervised, ModelKind::Mlp),
        &data,
        &split,
    )
    .unwrap();
    assert_eq!(unsup.target_label_reads, 0, "label-blind regime read a target label");
    assert!(unsup.metrics.iter().all(|m| m.device_loss > 0.0));
    assert!(unsup.metrics.iter().all(|m| m.lambda == 1.0));

    let sup = train(
        &tiny_config(Regime::DatSupervised, ModelKind::Mlp),
        &data,
        &split,
    )
    .unwrap();
    assert!(sup.target_label_reads > 0, "supervised DAT must read target labels");

    let tgt = train(&tiny_config(Regime::TargetOnly, ModelKind::Mlp), &data, &split).unwrap();
    assert!(tgt.target_label_reads > 0);
    assert!(tgt.metrics.iter().all(|m| m.device_loss == 0.0));
}

#[test]
#[should_panic(expected = "target label read")]
fn label_blind_training_panics_on_a_leaked_target_sample() {
    let (data, mut split) = make_data(ModelKind::Mlp, 6, 4, 8);
    // smuggle a target-device utterance into the source-train pool; the
    // audit must catch the trainer reading its label
    let leaked = split.target_adapt.remove(0);
    split.source_train.push(leaked);
    let _ = train(
        &tiny_config(Regime::DatUnsupervised, ModelKind::Mlp),
        &data,
        &split,
    );
}

#[test]
fn degenerate_and_empty_splits_are_refused() {
    let (data, split) = make_data(ModelKind::Mlp, 6, 4, 9);

    let mut empty_src = split.clone();
    empty_src.source_train.clear();
    let err = train(
        &tiny_config(Regime::SourceOnly, ModelKind::Mlp),
        &data,
        &empty_src,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::EmptySplit("source_train")), "{err}");

    let mut empty_tgt = split.clone();
    empty_tgt.target_adapt.clear();
    let err = train(
        &tiny_config(Regime::DatUnsupervised, ModelKind::Mlp),
        &data,
        &empty_tgt,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::EmptySplit("target_adapt")), "{err}");

    let mut one_class = split.clone();
    one_class.target_adapt.retain(|id| id.contains("ctrl"));
    let err = train(
        &tiny_config(Regime::TargetOnly, ModelKind::Mlp),
        &data,
        &one_class,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::DegenerateLabels(_)), "{err}");
}

#[test]
fn config_errors_are_caught_up_front() {
    let (data, split) = make_data(ModelKind::Mlp, 4, 4, 10);

    let err = train(
        &tiny_config(Regime::FrozenFineTune, ModelKind::Mlp),
        &data,
        &split,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::MissingPretrained), "{err}");

    let b1 = train(&tiny_config(Regime::SourceOnly, ModelKind::Mlp), &data, &split).unwrap();
    let err = finetune(
        &tiny_config(Regime::SourceOnly, ModelKind::Mlp),
        &data,
        &split,
        &b1.model,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::BadConfig(_)), "{err}");

    let mismatched = TrainConfig {
        hidden: 16,
        ..tiny_config(Regime::FrozenFineTune, ModelKind::Mlp)
    };
    let err = finetune(&mismatched, &data, &split, &b1.model).unwrap_err();
    assert!(matches!(err, AdaptError::DataMismatch(_) | AdaptError::BadConfig(_)), "{err}");

    let err = train(
        &tiny_config(Regime::SourceOnly, ModelKind::Blstm),
        &data,
        &split,
    )
    .unwrap_err();
    assert!(matches!(err, AdaptError::DataMismatch(_)), "{err}");

    let bad_epochs = TrainConfig {
        epochs: 0,
        ..tiny_config(Regime::SourceOnly, ModelKind::Mlp)
    };
    let err = train(&bad_epochs, &data, &split).unwrap_err();
    assert!(matches!(err, AdaptError::BadConfig(_)), "{err}");
}

#[test]
fn adversarial_training_strips_device_information_from_embeddings() {
    // the module's direction invariant: on strongly mismatched data, a
    // post-hoc linear probe reads device identity out of source-only
    // embeddings far better than out of DAT embeddings (3-seed mean)
    let mut b1_acc = 0.0;
    let mut dat_acc = 0.0;
    let seeds = [11u64, 12, 13];
    for &seed in &seeds {
        let (data, split) = make_data(ModelKind::Mlp, 6, 4, 20);
        let all_ids: Vec<String> = Subset::all()
            .iter()
            .flat_map(|&s| split.ids(s).to_vec())
            .collect();
        let base = TrainConfig {
            epochs: 60,
            seed,
            ..tiny_config(Regime::SourceOnly, ModelKind::Mlp)
        };
        let b1 = train(&base, &data, &split).unwrap();
        let dat = train(
            &TrainConfig {
                regime: Regime::DatUnsupervised,
                lambda: LambdaSpec::Constant(3.0),
                ..base.clone()
            },
            &data,
            &split,
        )
        .unwrap();
        for (model, acc) in [(&b1.model, &mut b1_acc), (&dat.model, &mut dat_acc)] {
            let embedded = embeddings(model, &data, &all_ids).unwrap();
            let feats: Vec<_> = embedded.iter().map(|(z, _)| z.clone()).collect();
            let targets: Vec<f64> = embedded.iter().map(|(_, d)| d.index() as f64).collect();
            *acc += crate::corpus::probe_accuracy(&feats, &targets) / seeds.len() as f64;
        }
    }
    assert!(
        dat_acc < b1_acc,
        "DAT embeddings still carry device info: probe {dat_acc:.3} vs source-only {b1_acc:.3}"
    );
}

// ---- outputs -------------------------------------------------------------

#[test]
fn metrics_csv_round_trips_exactly() {
    let rows = vec![
        EpochMetrics {
            epoch: 0,
            label_loss: 0.6931471805599453,
            device_loss: 0.1234,
            lambda: 0.5,
            train_pr_auc: 0.875,
        },
        EpochMetrics {
            epoch: 1,
            label_loss: 0.42,
            device_loss: 0.0,
            lambda: 1.0,
            train_pr_auc: 1.0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&path, &rows).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    // an empty log still gets a header line
    let empty = dir.path().join("empty.csv");
    write_metrics_csv(&empty, &[]).unwrap();
    let text = std::fs::read_to_string(&empty).unwrap();
    assert_eq!(text.trim(), "epoch,label_loss,device_loss,lambda,train_pr_auc");
}

#[test]
fn run_manifest_lists_the_whole_config() {
    let config = tiny_config(Regime::DatSupervised, ModelKind::Blstm);
    let pairs = run_manifest_pairs(&config);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.txt");
    write_run_manifest(&path, &pairs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    for needle in [
        "regime=dat-supervised",
        "model=blstm",
        "feature=mfcc",
        "lambda=constant:1",
        "seed=7",
        "batch_size=4",
    ] {
        assert!(text.contains(needle), "missing '{needle}' in:\n{text}");
    }
}

#[test]
fn scored_utterances_carry_truth_labels() {
    let (data, split) = make_data(ModelKind::Mlp, 4, 4, 30);
    let run = train(&tiny_config(Regime::SourceOnly, ModelKind::Mlp), &data, &split).unwrap();
    let reads_before = data.target_label_reads();
    let rows = score_ids(&run.model, &data, &split.target_test).unwrap();
    assert_eq!(rows.len(), split.target_test.len());
    for row in &rows {
        assert!((0.0..=1.0).contains(&row.score));
        assert!(row.parsed_label().is_some());
    }
    // evaluation must not touch the training-time audit
    assert_eq!(data.target_label_reads(), reads_before);
}

// ---- gradcheck -----------------------------------------------------------

#[test]
fn full_stack_gradients_match_finite_differences() {
    for kind in [ModelKind::Mlp, ModelKind::Blstm] {
        let report = check_full_stack(kind, 40, 4);
        assert!(
            report.max_rel_err() < 1e-5,
            "{kind:?}: detector {:?} device {:?}",
            report.detector,
            report.device
        );
        assert!(report.detector.n_checked > 0 && report.device.n_checked > 0);
    }
}
