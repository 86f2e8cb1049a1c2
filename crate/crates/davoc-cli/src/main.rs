//! `davoc` — batch driver for the whole pipeline: synthesize the two-device
//! corpus, extract features, train detection regimes, run the experiment
//! matrices, and report PR-AUC tables as CSV + console output.

mod gradcheck;
mod matrix;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand, ValueEnum};
use davoc::adapt::{
    self, run_manifest_pairs, write_metrics_csv, write_run_manifest, AdaptError, CorpusData,
    LambdaSpec, Regime, TrainConfig,
};
use davoc::corpus::{self, CorpusError, CorpusSpec, Subset};
use davoc::dsp::{FeatureConfig, FeatureKind};
use davoc::models::{input_features, ModelGraph, ModelKind};

/// Exit codes. Anything fixable by editing flags or a config file is
/// `CONFIG`; missing or malformed inputs are `DATA`; non-finite numbers
/// surfacing anywhere are `NUMERIC`; a failed quality gate (gradient check,
/// corpus self-test) is `THRESHOLD`.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_THRESHOLD: u8 = 5;

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Data(String),
    Numeric(String),
    Threshold(String),
}

impl AppError {
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Data(_) => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
            AppError::Threshold(_) => EXIT_THRESHOLD,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Data(m) | AppError::Numeric(m)
            | AppError::Threshold(m) => m,
        }
    }
}

impl From<AdaptError> for AppError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::BadConfig(_) | AdaptError::MissingPretrained => {
                AppError::Config(e.to_string())
            }
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for AppError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::BadSpec(_) | CorpusError::BadProfile(_) | CorpusError::BadVoice(_) => {
                AppError::Config(e.to_string())
            }
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<davoc::models::ModelError> for AppError {
    fn from(e: davoc::models::ModelError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<davoc::eval::EvalError> for AppError {
    fn from(e: davoc::eval::EvalError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Data(e.to_string())
    }
}

/// Preset bundles so the same pipeline runs in CI, at the desk, or at the
/// full experimental shape. Explicit flags always win over the preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// Full corpus shape, hidden 64, long training.
    Paper,
    /// Full corpus shape, hidden 64, training trimmed for a workstation.
    Desk,
    /// Thirty-file corpus and a tiny model, for continuous integration.
    Ci,
}

impl Scale {
    pub fn corpus_spec(self) -> CorpusSpec {
        match self {
            Scale::Paper | Scale::Desk => CorpusSpec::default(),
            Scale::Ci => CorpusSpec::ci(),
        }
    }

    pub fn hidden(self) -> usize {
        match self {
            Scale::Paper | Scale::Desk => 64,
            Scale::Ci => 8,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Scale::Paper => 60,
            Scale::Desk => 30,
            Scale::Ci => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
            Scale::Ci => "ci",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "davoc",
    version,
    about = "Channel-robust pathological voice detection pipeline",
    after_help = "Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 5 threshold breach.\n\
                  The seed defaults to $DAVOC_SEED when the --seed flag is absent, then to 0."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the two-device corpus, write WAVs + manifest, and run the
    /// linear-probe self-test.
    GenCorpus(GenCorpusArgs),
    /// Extract per-utterance feature CSVs from a corpus manifest.
    ExtractFeatures(ExtractArgs),
    /// Train one regime and write checkpoint, metrics log, and run manifest.
    Train(TrainArgs),
    /// Score a subset with a trained checkpoint and report PR-AUC.
    Eval(EvalArgs),
    /// Run the feature matrix or the regime comparison, several seeds each.
    Matrix(matrix::MatrixArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

#[derive(clap::Args)]
struct GenCorpusArgs {
    /// Output directory (will hold wav/ and manifest.csv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Skip the linear-probe self-test after generation.
    #[arg(long)]
    no_selftest: bool,
}

#[derive(clap::Args)]
struct ExtractArgs {
    /// Corpus manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for one CSV of frame rows per utterance.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = FeatureKind::from_str, default_value = "mfcc")]
    feature: FeatureKind,
    #[arg(long, default_value_t = 32.0)]
    window_ms: f64,
    /// Normalize each feature column to zero mean over time.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalized: bool,
    /// Stack each frame with its neighbors (the recurrent-model input view).
    #[arg(long)]
    stacked: bool,
}

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Corpus manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint.bin, metrics.csv, and run.txt.
    #[arg(long)]
    out: PathBuf,
    /// Key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = Regime::from_str)]
    regime: Option<Regime>,
    #[arg(long, value_parser = ModelKind::from_str)]
    model: Option<ModelKind>,
    #[arg(long, value_parser = FeatureKind::from_str)]
    feature: Option<FeatureKind>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    normalized: Option<bool>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    device_hidden: Option<usize>,
    /// λ schedule: `constant:X`, `ramp:X`, or a bare number.
    #[arg(long, value_parser = LambdaSpec::from_str)]
    lambda: Option<LambdaSpec>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Source-only checkpoint to start from (frozen fine-tuning only).
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which manifest subset to score.
    #[arg(long, value_parser = Subset::from_str, default_value = "target_test")]
    subset: Subset,
    /// Write per-utterance scores as CSV.
    #[arg(long)]
    scores_out: Option<PathBuf>,
    /// Write the precision-recall curve as CSV.
    #[arg(long)]
    curve_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::ExtractFeatures(a) => cmd_extract_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Matrix(a) => matrix::cmd_matrix(a),
        Command::Gradcheck(a) => gradcheck::cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

/// `--seed` flag, else `$DAVOC_SEED`, else 0. Returns the seed and where it
/// came from, for the effective-config echo.
pub fn resolve_seed(flag: Option<u64>) -> Result<(u64, &'static str), AppError> {
    if let Some(s) = flag {
        return Ok((s, "flag"));
    }
    match std::env::var("DAVOC_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map(|s| (s, "env DAVOC_SEED"))
            .map_err(|_| AppError::Config(format!("DAVOC_SEED is not a u64: '{v}'"))),
        Err(_) => Ok((0, "default")),
    }
}

/// Echo the exact configuration a command runs under; rerunning with these
/// pairs as flags reproduces the run.
pub fn print_effective_config(command: &str, pairs: &[(&str, String)]) {
    println!("# effective-config");
    println!("command={command}");
    for (k, v) in pairs {
        println!("{k}={v}");
    }
    println!();
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<(), AppError> {
    let (seed, seed_src) = resolve_seed(args.seed)?;
    let spec = args.scale.corpus_spec();
    print_effective_config(
        "gen-corpus",
        &[
            ("out", args.out.display().to_string()),
            ("scale", args.scale.as_str().to_string()),
            ("seed", format!("{seed} ({seed_src})")),
            ("utterances", spec.total_utterances().to_string()),
            ("selftest", (!args.no_selftest).to_string()),
        ],
    );

    let generated = corpus::generate_corpus(&spec, seed, &args.out)?;
    let hash = corpus::file_sha256(&generated.manifest_path)?;
    println!("manifest={}", generated.manifest_path.display());
    println!("files={}", generated.rows.len());
    println!("manifest_sha256={hash}");

    if !args.no_selftest {
        let report = corpus::run_selftest(&spec, seed)?;
        println!(
            "device_probe_accuracy={:.4} (threshold {})",
            report.device_probe_accuracy,
            davoc::corpus::SelfTestReport::DEVICE_THRESHOLD
        );
        println!(
            "pathology_probe_accuracy={:.4} (threshold {})",
            report.pathology_probe_accuracy,
            davoc::corpus::SelfTestReport::PATHOLOGY_THRESHOLD
        );
        if !report.passed() {
            return Err(AppError::Threshold(
                "corpus self-test probes fell below their accuracy thresholds".into(),
            ));
        }
    }
    Ok(())
}

fn cmd_extract_features(args: ExtractArgs) -> Result<(), AppError> {
    let config = FeatureConfig::new(args.feature, args.window_ms, args.normalized);
    print_effective_config(
        "extract-features",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("out", args.out.display().to_string()),
            ("feature", args.feature.to_string()),
            ("window_ms", args.window_ms.to_string()),
            ("normalized", args.normalized.to_string()),
            ("stacked", args.stacked.to_string()),
            ("context", config.context.to_string()),
        ],
    );

    let loaded = corpus::load_corpus(&args.manifest)?;
    std::fs::create_dir_all(&args.out)?;
    let kind = if args.stacked {
        ModelKind::Blstm
    } else {
        ModelKind::Mlp
    };
    let mut index = csv::Writer::from_path(args.out.join("features.csv"))?;
    index.write_record(["id", "file", "frames", "dims"])?;
    let mut dims = 0;
    for (row, utt) in &loaded {
        let fm = input_features(utt, &config, kind).map_err(|e| AppError::Data(e.to_string()))?;
        dims = fm.data.ncols();
        let file = format!("{}.csv", row.id);
        let mut w = csv::Writer::from_path(args.out.join(&file))?;
        for frame in fm.data.rows() {
            w.write_record(frame.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        index.write_record([
            row.id.clone(),
            file,
            fm.data.nrows().to_string(),
            fm.data.ncols().to_string(),
        ])?;
    }
    index.flush()?;
    println!("wrote {} feature files (dims={dims})", loaded.len());
    Ok(())
}

/// Layered train configuration: scale preset, then config file, then
/// explicit flags.
pub fn build_train_config(args: &TrainArgs) -> Result<(TrainConfig, &'static str), AppError> {
    let mut layer = ConfigLayer::default();
    if let Some(path) = &args.config {
        layer.apply_file(path)?;
    }
    layer.apply_flags(args);

    let regime = layer
        .regime
        .ok_or_else(|| AppError::Config("no regime given (flag --regime or config file)".into()))?;
    let (seed, seed_src) = resolve_seed(layer.seed)?;

    let mut feature = FeatureConfig::new(
        layer.feature.unwrap_or(FeatureKind::Mfcc),
        layer.window_ms.unwrap_or(32.0),
        layer.normalized.unwrap_or(true),
    );
    if let Some(n) = layer.n_mel_filters {
        feature.n_mel_filters = n;
    }
    if let Some(n) = layer.n_cepstra {
        feature.n_cepstra = n;
    }
    if let Some(p) = layer.pre_emphasis {
        feature.pre_emphasis = p;
    }
    if let Some(c) = layer.context {
        feature.context = c;
    }

    let mut config = TrainConfig::new(regime, layer.model.unwrap_or(ModelKind::Blstm), feature);
    config.hidden = layer.hidden.unwrap_or_else(|| args.scale.hidden());
    config.device_hidden = layer.device_hidden.unwrap_or(config.hidden);
    if let Some(l) = layer.lambda {
        config.lambda = l;
    }
    if let Some(lr) = layer.lr {
        config.lr = lr;
    }
    config.epochs = layer.epochs.unwrap_or_else(|| args.scale.epochs());
    if let Some(b) = layer.batch_size {
        config.batch_size = b;
    }
    config.seed = seed;
    config.validate()?;
    Ok((config, seed_src))
}

/// One source of train settings; later layers only fill what they set.
#[derive(Default)]
struct ConfigLayer {
    regime: Option<Regime>,
    model: Option<ModelKind>,
    feature: Option<FeatureKind>,
    window_ms: Option<f64>,
    normalized: Option<bool>,
    n_mel_filters: Option<usize>,
    n_cepstra: Option<usize>,
    pre_emphasis: Option<f64>,
    context: Option<usize>,
    hidden: Option<usize>,
    device_hidden: Option<usize>,
    lambda: Option<LambdaSpec>,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

impl ConfigLayer {
    /// Parse a `key=value` file using the same keys the run manifest
    /// writes, so a previous run's `run.txt` is a valid config file.
    fn apply_file(&mut self, path: &Path) -> Result<(), AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Data(format!("config file {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AppError::Config(format!(
                    "{}:{}: expected key=value, got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                AppError::Config(format!(
                    "{}:{}: bad {what} value '{value}'",
                    path.display(),
                    lineno + 1
                ))
            };
            match key {
                "regime" => self.regime = Some(value.parse().map_err(|_| bad("regime"))?),
                "model" => self.model = Some(value.parse().map_err(|_| bad("model"))?),
                "feature" => self.feature = Some(value.parse().map_err(|_| bad("feature"))?),
                "window_ms" => self.window_ms = Some(value.parse().map_err(|_| bad("window_ms"))?),
                "normalized" => {
                    self.normalized = Some(value.parse().map_err(|_| bad("normalized"))?)
                }
                "n_mel_filters" => {
                    self.n_mel_filters = Some(value.parse().map_err(|_| bad("n_mel_filters"))?)
                }
                "n_cepstra" => self.n_cepstra = Some(value.parse().map_err(|_| bad("n_cepstra"))?),
                "pre_emphasis" => {
                    self.pre_emphasis = Some(value.parse().map_err(|_| bad("pre_emphasis"))?)
                }
                "context" => self.context = Some(value.parse().map_err(|_| bad("context"))?),
                "hidden" => self.hidden = Some(value.parse().map_err(|_| bad("hidden"))?),
                "device_hidden" => {
                    self.device_hidden = Some(value.parse().map_err(|_| bad("device_hidden"))?)
                }
                "lambda" => self.lambda = Some(value.parse().map_err(|_| bad("lambda"))?),
                "lr" => self.lr = Some(value.parse().map_err(|_| bad("lr"))?),
                "epochs" => self.epochs = Some(value.parse().map_err(|_| bad("epochs"))?),
                "batch_size" => {
                    self.batch_size = Some(value.parse().map_err(|_| bad("batch_size"))?)
                }
                "seed" => self.seed = Some(value.parse().map_err(|_| bad("seed"))?),
                _ => {
                    return Err(AppError::Config(format!(
                        "{}:{}: unknown key '{key}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, args: &TrainArgs) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if args.$field.is_some() { self.$field = args.$field.clone(); })*
            };
        }
        take!(
            regime, model, feature, window_ms, normalized, hidden, device_hidden, lambda, lr,
            epochs, batch_size, seed
        );
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), AppError> {
    let (config, seed_src) = build_train_config(&args)?;
    let mut pairs = vec![
        ("manifest", args.manifest.display().to_string()),
        ("out", args.out.display().to_string()),
        ("scale", args.scale.as_str().to_string()),
        ("seed_source", seed_src.to_string()),
    ];
    pairs.extend(run_manifest_pairs(&config));
    print_effective_config("train", &pairs);

    let (data, split) = CorpusData::load(&args.manifest, &config.model_config())?;
    let run = if config.regime == Regime::FrozenFineTune {
        let path = args.pretrained.as_ref().ok_or_else(|| {
            AppError::Config("frozen-fine-tune needs --pretrained <checkpoint>".into())
        })?;
        let pretrained = ModelGraph::load(path)?;
        adapt::finetune(&config, &data, &split, &pretrained)?
    } else {
        if args.pretrained.is_some() {
            return Err(AppError::Config(
                "--pretrained only applies to the frozen-fine-tune regime".into(),
            ));
        }
        adapt::train(&config, &data, &split)?
    };

    for m in &run.metrics {
        if !(m.label_loss.is_finite() && m.device_loss.is_finite() && m.train_pr_auc.is_finite()) {
            return Err(AppError::Numeric(format!(
                "non-finite training metrics at epoch {}: label_loss={} device_loss={}",
                m.epoch, m.label_loss, m.device_loss
            )));
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let checkpoint = args.out.join("checkpoint.bin");
    run.model.save(&checkpoint)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &run.metrics)?;
    write_run_manifest(&args.out.join("run.txt"), &run_manifest_pairs(&config))?;

    println!("checkpoint={}", checkpoint.display());
    println!("checkpoint_sha256={}", corpus::file_sha256(&checkpoint)?);
    if let Some(last) = run.metrics.last() {
        println!(
            "final_epoch={} label_loss={:.6} device_loss={:.6} train_pr_auc={:.4}",
            last.epoch, last.label_loss, last.device_loss, last.train_pr_auc
        );
    }
    println!("target_label_reads={}", run.target_label_reads);
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), AppError> {
    print_effective_config(
        "eval",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("subset", args.subset.to_string()),
        ],
    );
    let model = ModelGraph::load(&args.checkpoint)?;
    let (data, split) = CorpusData::load(&args.manifest, &model.config)?;
    let ids = split.ids(args.subset);
    if ids.is_empty() {
        return Err(AppError::Data(format!(
            "subset {} is empty in this manifest",
            args.subset
        )));
    }
    let rows = adapt::score_ids(&model, &data, ids)?;
    if rows.iter().any(|r| !r.score.is_finite()) {
        return Err(AppError::Numeric("non-finite utterance score".into()));
    }
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<davoc::Label> = rows.iter().filter_map(|r| r.parsed_label()).collect();
    let curve = davoc::eval::pr_auc(&scores, &labels)?;
    println!("n={} positives={}", ids.len(), curve.n_positive);
    println!("pr_auc={:.6}", curve.auc);
    if let Some(path) = &args.scores_out {
        davoc::eval::write_scores_csv(path, &rows)?;
        println!("scores={}", path.display());
    }
    if let Some(path) = &args.curve_out {
        davoc::eval::write_curve_csv(path, &curve)?;
        println!("curve={}", path.display());
    }
    Ok(())
}
