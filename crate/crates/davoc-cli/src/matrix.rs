//! The experiment matrices: the eight feature cells and the five-regime
//! comparison, several seeds each, reported as CSV plus a console table.
//!
//! Cells run as independent jobs bounded by `--jobs`. Every job loads its
//! own copy of the corpus so nothing is shared between threads; a job is
//! internally sequential and fully determined by its seed.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;

use clap::ValueEnum;
use davoc::adapt::{self, CorpusData, DomainSplit, LambdaSpec, Regime, TrainConfig};
use davoc::corpus::Subset;
use davoc::dsp::{FeatureConfig, FeatureKind};
use davoc::eval::{aggregate_seeds, welch_t_test};
use davoc::models::ModelKind;

use crate::{print_effective_config, resolve_seed, AppError, Scale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    /// 2 feature kinds × normalization on/off × 2 window lengths.
    Features,
    /// All five training regimes at one fixed front end.
    Regimes,
}

#[derive(clap::Args)]
pub struct MatrixArgs {
    /// Corpus manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the per-seed results CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    which: Which,
    #[arg(long, value_parser = ModelKind::from_str)]
    model: Option<ModelKind>,
    /// Seeds per cell, numbered seed, seed+1, ...
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel cell jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Front end for the regimes matrix (the features matrix sweeps these).
    #[arg(long, value_parser = FeatureKind::from_str)]
    feature: Option<FeatureKind>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    normalized: Option<bool>,
    /// λ schedule for the adversarial regimes.
    #[arg(long, value_parser = LambdaSpec::from_str)]
    lambda: Option<LambdaSpec>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// Drain `jobs` through at most `workers` threads, preserving job order in
/// the returned results.
fn run_jobs<J: Send, R: Send>(jobs: Vec<J>, workers: usize, f: impl Fn(J) -> R + Sync) -> Vec<R> {
    let queue: Mutex<VecDeque<(usize, J)>> = Mutex::new(jobs.into_iter().enumerate().collect());
    let results: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                let item = queue.lock().unwrap().pop_front();
                let Some((i, job)) = item else { break };
                let r = f(job);
                results.lock().unwrap().push((i, r));
            });
        }
    });
    let mut out = results.into_inner().unwrap();
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Train one config and return (source_test, target_test) PR-AUC.
fn train_and_score(
    config: &TrainConfig,
    data: &CorpusData,
    split: &DomainSplit,
    pretrained_b1: Option<&davoc::models::ModelGraph>,
) -> Result<(f64, f64), AppError> {
    let run = match pretrained_b1 {
        Some(model) => adapt::finetune(config, data, split, model)?,
        None => adapt::train(config, data, split)?,
    };
    let src = adapt::subset_pr_auc(&run.model, data, split.ids(Subset::SourceTest))?;
    let tgt = adapt::subset_pr_auc(&run.model, data, split.ids(Subset::TargetTest))?;
    if !(src.is_finite() && tgt.is_finite()) {
        return Err(AppError::Numeric(format!(
            "non-finite PR-AUC (source {src}, target {tgt})"
        )));
    }
    Ok((src, tgt))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let s = aggregate_seeds(values).expect("non-empty");
    (s.mean, s.std)
}

/// Fold per-cell failures into one exit decision: numeric failures
/// dominate, then data errors; success only if every cell succeeded.
fn overall(failures: Vec<AppError>) -> Result<(), AppError> {
    if failures.is_empty() {
        return Ok(());
    }
    let numeric = failures
        .iter()
        .any(|e| matches!(e, AppError::Numeric(_)));
    let joined = failures
        .iter()
        .map(|e| e.message().to_string())
        .collect::<Vec<_>>()
        .join("; ");
    let msg = format!("{} cell(s) failed: {joined}", failures.len());
    Err(if numeric {
        AppError::Numeric(msg)
    } else {
        AppError::Data(msg)
    })
}

pub fn cmd_matrix(args: MatrixArgs) -> Result<(), AppError> {
    match args.which {
        Which::Features => features_matrix(args),
        Which::Regimes => regimes_matrix(args),
    }
}

// ---- features matrix -----------------------------------------------------

struct FeatureCell {
    kind: FeatureKind,
    window_ms: f64,
    normalized: bool,
}

struct CellReport {
    label: String,
    input_dim: usize,
    rows: Vec<Result<(u64, f64, f64), AppError>>,
}

fn features_matrix(args: MatrixArgs) -> Result<(), AppError> {
    let (seed0, seed_src) = resolve_seed(args.seed)?;
    let model = args.model.unwrap_or(ModelKind::Blstm);
    let epochs = args.epochs.unwrap_or_else(|| args.scale.epochs());
    print_effective_config(
        "matrix",
        &[
            ("which", "features".into()),
            ("manifest", args.manifest.display().to_string()),
            ("out", args.out.display().to_string()),
            ("model", model.to_string()),
            ("scale", args.scale.as_str().into()),
            ("epochs", epochs.to_string()),
            ("seeds", args.seeds.to_string()),
            ("seed", format!("{seed0} ({seed_src})")),
            ("jobs", args.jobs.to_string()),
        ],
    );
    if args.seeds == 0 {
        return Err(AppError::Config("--seeds must be >= 1".into()));
    }

    let mut cells = Vec::new();
    for kind in [FeatureKind::Mfcc, FeatureKind::FilterBank] {
        for normalized in [false, true] {
            for window_ms in [32.0, 100.0] {
                cells.push(FeatureCell {
                    kind,
                    window_ms,
                    normalized,
                });
            }
        }
    }

    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| seed0 + i).collect();
    let manifest = args.manifest.clone();
    let scale = args.scale;
    let reports = run_jobs(cells, args.jobs, |cell: FeatureCell| {
        let feature = FeatureConfig::new(cell.kind, cell.window_ms, cell.normalized);
        let mut base = TrainConfig::new(Regime::SourceOnly, model, feature);
        base.hidden = scale.hidden();
        base.device_hidden = base.hidden;
        base.epochs = epochs;
        let label = format!(
            "{}{} {}ms",
            if cell.normalized { "norm-" } else { "" },
            cell.kind,
            cell.window_ms
        );
        let input_dim = base.model_config().input_dim();
        let rows = match CorpusData::load(&manifest, &base.model_config()) {
            Ok((data, split)) => seeds
                .iter()
                .map(|&seed| {
                    let mut config = base.clone();
                    config.seed = seed;
                    train_and_score(&config, &data, &split, None)
                        .map(|(src, tgt)| (seed, src, tgt))
                })
                .collect(),
            Err(e) => vec![Err(e.into())],
        };
        CellReport {
            label,
            input_dim,
            rows,
        }
    });

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("features_matrix.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record([
        "feature",
        "window_ms",
        "normalized",
        "model",
        "input_dim",
        "seed",
        "source_test_pr_auc",
        "target_test_pr_auc",
    ])?;

    println!(
        "{:<18} {:>9} {:>17} {:>17}",
        "cell", "input_dim", "source_test", "target_test"
    );
    let mut failures = Vec::new();
    for report in reports {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let (kind, rest) = report
            .label
            .split_once(' ')
            .map(|(k, r)| (k.to_string(), r.to_string()))
            .unwrap_or_default();
        for row in report.rows {
            match row {
                Ok((seed, s, t)) => {
                    let (norm, bare_kind) = match kind.strip_prefix("norm-") {
                        Some(k) => (true, k.to_string()),
                        None => (false, kind.clone()),
                    };
                    w.write_record([
                        bare_kind,
                        rest.trim_end_matches("ms").to_string(),
                        norm.to_string(),
                        model.to_string(),
                        report.input_dim.to_string(),
                        seed.to_string(),
                        s.to_string(),
                        t.to_string(),
                    ])?;
                    src.push(s);
                    tgt.push(t);
                }
                Err(e) => failures.push(match e {
                    AppError::Numeric(m) => AppError::Numeric(format!("{}: {m}", report.label)),
                    other => AppError::Data(format!("{}: {}", report.label, other.message())),
                }),
            }
        }
        if src.is_empty() {
            println!("{:<18} {:>9} {:>17} {:>17}", report.label, report.input_dim, "failed", "failed");
            continue;
        }
        let (sm, ss) = mean_std(&src);
        let (tm, ts) = mean_std(&tgt);
        println!(
            "{:<18} {:>9} {:>9.4}\u{b1}{:.4} {:>9.4}\u{b1}{:.4}",
            report.label, report.input_dim, sm, ss, tm, ts
        );
    }
    w.flush()?;
    println!("rows={}", csv_path.display());
    overall(failures)
}

// ---- regimes matrix ------------------------------------------------------

struct RegimeRow {
    regime: Regime,
    seed: u64,
    result: Result<(f64, f64), AppError>,
}

fn regimes_matrix(args: MatrixArgs) -> Result<(), AppError> {
    let (seed0, seed_src) = resolve_seed(args.seed)?;
    let model = args.model.unwrap_or(ModelKind::Blstm);
    let epochs = args.epochs.unwrap_or_else(|| args.scale.epochs());
    let kind = args.feature.unwrap_or(FeatureKind::Mfcc);
    let window_ms = args.window_ms.unwrap_or(32.0);
    let normalized = args.normalized.unwrap_or(true);
    let lambda = args.lambda.clone().unwrap_or(LambdaSpec::Constant(1.0));
    let feature = FeatureConfig::new(kind, window_ms, normalized);
    let mut base = TrainConfig::new(Regime::SourceOnly, model, feature);
    base.hidden = args.scale.hidden();
    base.device_hidden = base.hidden;
    base.epochs = epochs;

    print_effective_config(
        "matrix",
        &[
            ("which", "regimes".into()),
            ("manifest", args.manifest.display().to_string()),
            ("out", args.out.display().to_string()),
            ("model", model.to_string()),
            ("feature", kind.to_string()),
            ("window_ms", window_ms.to_string()),
            ("normalized", normalized.to_string()),
            ("lambda", lambda.to_string()),
            ("scale", args.scale.as_str().into()),
            ("epochs", epochs.to_string()),
            ("seeds", args.seeds.to_string()),
            ("seed", format!("{seed0} ({seed_src})")),
            ("jobs", args.jobs.to_string()),
        ],
    );
    if args.seeds == 0 {
        return Err(AppError::Config("--seeds must be >= 1".into()));
    }

    // one job per seed: the frozen fine-tune row reuses that seed's
    // source-only model, so the dependency stays inside the job
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| seed0 + i).collect();
    let manifest = args.manifest.clone();
    let rows: Vec<Vec<RegimeRow>> = run_jobs(seeds, args.jobs, |seed: u64| {
        let mut out = Vec::new();
        let (data, split) = match CorpusData::load(&manifest, &base.model_config()) {
            Ok(v) => v,
            Err(e) => {
                out.push(RegimeRow {
                    regime: Regime::SourceOnly,
                    seed,
                    result: Err(e.into()),
                });
                return out;
            }
        };
        let mut b1 = base.clone();
        b1.seed = seed;
        let b1_run = adapt::train(&b1, &data, &split);
        let b1_model = b1_run.as_ref().ok().map(|r| r.model.clone());
        out.push(RegimeRow {
            regime: Regime::SourceOnly,
            seed,
            result: b1_run.map_err(AppError::from).and_then(|run| {
                let src = adapt::subset_pr_auc(&run.model, &data, split.ids(Subset::SourceTest))?;
                let tgt = adapt::subset_pr_auc(&run.model, &data, split.ids(Subset::TargetTest))?;
                Ok((src, tgt))
            }),
        });
        for regime in [
            Regime::TargetOnly,
            Regime::FrozenFineTune,
            Regime::DatSupervised,
            Regime::DatUnsupervised,
        ] {
            let mut config = base.clone();
            config.regime = regime;
            config.seed = seed;
            config.lambda = lambda.clone();
            let result = if regime == Regime::FrozenFineTune {
                match &b1_model {
                    Some(m) => train_and_score(&config, &data, &split, Some(m)),
                    None => Err(AppError::Data(
                        "fine-tune skipped: source-only run failed".into(),
                    )),
                }
            } else {
                train_and_score(&config, &data, &split, None)
            };
            out.push(RegimeRow {
                regime,
                seed,
                result,
            });
        }
        out
    });

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("regimes_matrix.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["regime", "seed", "source_test_pr_auc", "target_test_pr_auc"])?;
    let mut by_regime: Vec<(Regime, Vec<f64>)> = Regime::all()
        .into_iter()
        .map(|r| (r, Vec::new()))
        .collect();
    let mut failures = Vec::new();
    for row in rows.into_iter().flatten() {
        match row.result {
            Ok((src, tgt)) => {
                w.write_record([
                    row.regime.to_string(),
                    row.seed.to_string(),
                    src.to_string(),
                    tgt.to_string(),
                ])?;
                by_regime
                    .iter_mut()
                    .find(|(r, _)| *r == row.regime)
                    .expect("known regime")
                    .1
                    .push(tgt);
            }
            Err(e) => failures.push(AppError::Data(format!(
                "{} seed {}: {}",
                row.regime,
                row.seed,
                e.message()
            ))),
        }
    }
    w.flush()?;

    println!("{:<18} {:>6} {:>17}", "regime", "runs", "target_test");
    for (regime, aucs) in &by_regime {
        if aucs.is_empty() {
            println!("{:<18} {:>6} {:>17}", regime.to_string(), 0, "failed");
            continue;
        }
        let (m, s) = mean_std(aucs);
        println!(
            "{:<18} {:>6} {:>9.4}\u{b1}{:.4}",
            regime.to_string(),
            aucs.len(),
            m,
            s
        );
    }
    let b1 = &by_regime
        .iter()
        .find(|(r, _)| *r == Regime::SourceOnly)
        .unwrap()
        .1;
    let du = &by_regime
        .iter()
        .find(|(r, _)| *r == Regime::DatUnsupervised)
        .unwrap()
        .1;
    if b1.len() >= 2 && du.len() >= 2 {
        let p = welch_t_test(du, b1)?;
        println!("welch_p dat-unsupervised vs source-only: {p:.6}");
    }
    println!("rows={}", csv_path.display());
    overall(failures)
}
