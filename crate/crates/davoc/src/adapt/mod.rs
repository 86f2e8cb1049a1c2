//! Training regimes: source-only and target-only baselines, frozen
//! fine-tuning, and domain-adversarial training (DAT) in supervised and
//! unsupervised modes.
//!
//! One loop drives all five regimes; they differ only in which pool the
//! label loss draws from, whether the adversarial device loss runs, and
//! which parameter groups may move. Three properties are load-bearing and
//! defended by construction here:
//!
//! - **Determinism.** Batch order comes from per-epoch derived streams,
//!   every parameter lives in one canonical Adam state, and a fixed
//!   `(config, data, seed)` reproduces checkpoints bit for bit.
//! - **Reduction.** When the effective λ is exactly zero the device
//!   branch is skipped outright, so a DAT run with λ=0 performs the same
//!   arithmetic — and the same RNG draws on the source stream — as a
//!   source-only run, and ends bit-identical to it.
//! - **Label blindness.** Unsupervised DAT flips the corpus audit into
//!   forbid mode: any code path that so much as reads a target label
//!   panics, and the read counter doubles as a zero-check afterwards.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array1;

use crate::corpus::{self, CorpusError, ManifestRow, Subset};
use crate::dsp::{Device, DspError, FeatureMatrix, Label};
use crate::eval::{self, EvalError, ScoredUtterance};
use crate::models::{
    input_features, ModelConfig, ModelError, ModelGraph, ModelKind,
};
use crate::net::{clip_group_norm, cross_entropy, AdamConfig, AdamState};
use crate::rng;

mod gradcheck;

pub use gradcheck::{check_full_stack, StackCheckReport};

/// Joint L2 bound applied per parameter group (detector and device
/// separately) before each optimizer step.
pub const GRAD_CLIP: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum AdaptError {
    #[error("adapt io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("split: {0}")]
    BadSplit(String),
    #[error("unknown utterance id '{0}'")]
    UnknownId(String),
    #[error("{0} is empty")]
    EmptySplit(&'static str),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("data mismatch: {0}")]
    DataMismatch(String),
    #[error("frozen fine-tuning needs a pretrained source-only model")]
    MissingPretrained,
}

// ---- regimes and schedules ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    /// Baseline 1: train on the labeled source pool, never look at target.
    SourceOnly,
    /// Baseline 2: train on the small labeled target-adapt pool only.
    TargetOnly,
    /// Baseline 3: start from a source-only model, freeze the encoder,
    /// and fine-tune the label head on target-adapt.
    FrozenFineTune,
    /// DAT with labels on both domains.
    DatSupervised,
    /// DAT where target labels are never read — enforced, not assumed.
    DatUnsupervised,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::SourceOnly => "source-only",
            Regime::TargetOnly => "target-only",
            Regime::FrozenFineTune => "frozen-finetune",
            Regime::DatSupervised => "dat-supervised",
            Regime::DatUnsupervised => "dat-unsupervised",
        }
    }

    pub fn all() -> [Regime; 5] {
        [
            Regime::SourceOnly,
            Regime::TargetOnly,
            Regime::FrozenFineTune,
            Regime::DatSupervised,
            Regime::DatUnsupervised,
        ]
    }

    /// Does this regime run the adversarial device loss?
    pub fn uses_device_loss(self) -> bool {
        matches!(self, Regime::DatSupervised | Regime::DatUnsupervised)
    }

    /// Epochs iterate over target_adapt instead of source_train.
    fn target_anchored(self) -> bool {
        matches!(self, Regime::TargetOnly | Regime::FrozenFineTune)
    }

    /// May this regime legitimately read target labels?
    pub fn reads_target_labels(self) -> bool {
        matches!(
            self,
            Regime::TargetOnly | Regime::FrozenFineTune | Regime::DatSupervised
        )
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source-only" => Ok(Regime::SourceOnly),
            "target-only" => Ok(Regime::TargetOnly),
            "frozen-finetune" => Ok(Regime::FrozenFineTune),
            "dat-supervised" => Ok(Regime::DatSupervised),
            "dat-unsupervised" => Ok(Regime::DatUnsupervised),
            other => Err(format!("unknown regime '{other}'")),
        }
    }
}

/// The adversarial weight λ, either fixed or ramped over training
/// progress `p ∈ [0, 1]` as `λ0·(2/(1+e^(−10p)) − 1)`, which starts at
/// exactly 0 (the device branch is skipped for that step) and saturates
/// near λ0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSpec {
    Constant(f64),
    Ramp(f64),
}

impl LambdaSpec {
    pub fn value(&self, p: f64) -> f64 {
        match *self {
            LambdaSpec::Constant(l0) => l0,
            LambdaSpec::Ramp(l0) => l0 * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0),
        }
    }

    pub fn lambda0(&self) -> f64 {
        match *self {
            LambdaSpec::Constant(l0) | LambdaSpec::Ramp(l0) => l0,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        let l0 = self.lambda0();
        if !(l0.is_finite() && l0 >= 0.0) {
            return Err(AdaptError::BadConfig(format!("lambda {l0} must be >= 0")));
        }
        Ok(())
    }
}

impl fmt::Display for LambdaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LambdaSpec::Constant(l0) => write!(f, "constant:{l0}"),
            LambdaSpec::Ramp(l0) => write!(f, "ramp:{l0}"),
        }
    }
}

impl FromStr for LambdaSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| format!("bad lambda value '{v}'"))
        };
        if let Some((kind, v)) = s.split_once(':') {
            match kind {
                "constant" => Ok(LambdaSpec::Constant(parse_num(v)?)),
                "ramp" => Ok(LambdaSpec::Ramp(parse_num(v)?)),
                other => Err(format!("unknown lambda schedule '{other}'")),
            }
        } else {
            // a bare number means a constant λ
            Ok(LambdaSpec::Constant(parse_num(s)?))
        }
    }
}

/// Everything one training run depends on, seed included.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub kind: ModelKind,
    pub feature: crate::dsp::FeatureConfig,
    pub hidden: usize,
    pub device_hidden: usize,
    pub lambda: LambdaSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: hidden 64, Adam 1e-3, batches of 8
    /// utterances, 100 epochs, constant λ=1.
    pub fn new(regime: Regime, kind: ModelKind, feature: crate::dsp::FeatureConfig) -> Self {
        TrainConfig {
            regime,
            kind,
            feature,
            hidden: 64,
            device_hidden: 64,
            lambda: LambdaSpec::Constant(1.0),
            lr: 1e-3,
            epochs: 100,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.kind, self.feature.clone(), self.hidden, self.device_hidden)
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        self.feature.validate()?;
        self.lambda.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(AdaptError::BadConfig(format!("lr {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(AdaptError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.hidden == 0 || self.device_hidden == 0 {
            return Err(AdaptError::BadConfig("hidden sizes must be >= 1".into()));
        }
        // zero epochs is meaningful only for fine-tuning (it must return
        // the pretrained model unchanged); every other regime needs >= 1
        if self.epochs == 0 && self.regime != Regime::FrozenFineTune {
            return Err(AdaptError::BadConfig(format!(
                "epochs must be >= 1 for {}",
                self.regime
            )));
        }
        Ok(())
    }
}

// ---- data with a label audit ---------------------------------------------

/// Shared audit cell: counts target-label reads, and in forbid mode turns
/// any such read into a panic. The counter is the artifact the
/// label-blindness check inspects — it must be exactly zero after an
/// unsupervised DAT run.
#[derive(Debug, Default)]
pub struct LabelAudit {
    target_reads: AtomicU64,
    forbid_target: AtomicBool,
}

impl LabelAudit {
    fn on_target_read(&self) {
        if self.forbid_target.load(Ordering::Relaxed) {
            panic!("target label read during label-blind training");
        }
        self.target_reads.fetch_add(1, Ordering::Relaxed);
    }

    pub fn target_reads(&self) -> u64 {
        self.target_reads.load(Ordering::Relaxed)
    }

    fn set_forbid(&self, v: bool) -> bool {
        self.forbid_target.swap(v, Ordering::Relaxed)
    }
}

/// Restores the previous forbid state when the training run ends, even on
/// panic.
struct ForbidGuard {
    audit: Arc<LabelAudit>,
    prev: bool,
}

impl ForbidGuard {
    fn new(audit: Arc<LabelAudit>) -> Self {
        let prev = audit.set_forbid(true);
        ForbidGuard { audit, prev }
    }
}

impl Drop for ForbidGuard {
    fn drop(&mut self) {
        self.audit.set_forbid(self.prev);
    }
}

/// One utterance ready for training: model-shaped features plus metadata.
pub struct DataSample {
    pub id: String,
    pub device: Device,
    pub features: FeatureMatrix,
    label: Label,
    audit: Arc<LabelAudit>,
}

impl DataSample {
    /// The label as training sees it: target reads go through the audit.
    pub fn label(&self) -> Label {
        if self.device == Device::Target {
            self.audit.on_target_read();
        }
        self.label
    }

    /// The label for evaluation — bypasses the audit, so scoring a test
    /// set never pollutes the training-time counter.
    pub fn truth(&self) -> Label {
        self.label
    }
}

/// A corpus loaded into memory with features extracted once, shared
/// read-only by any number of sequential training runs.
pub struct CorpusData {
    pub config: ModelConfig,
    samples: Vec<DataSample>,
    index: HashMap<String, usize>,
    audit: Arc<LabelAudit>,
}

impl CorpusData {
    /// Load WAVs listed in a corpus manifest and extract model-ready
    /// features. Returns the data and the subset split recorded in the
    /// manifest.
    pub fn load(
        manifest_path: &Path,
        config: &ModelConfig,
    ) -> Result<(Self, DomainSplit), AdaptError> {
        let loaded = corpus::load_corpus(manifest_path)?;
        let split = DomainSplit::from_manifest(
            &loaded.iter().map(|(row, _)| row.clone()).collect::<Vec<_>>(),
        )?;
        let mut items = Vec::with_capacity(loaded.len());
        for (row, utt) in loaded {
            let features = input_features(&utt, &config.feature, config.kind)?;
            items.push((row.id.clone(), row.device()?, row.label()?, features));
        }
        Ok((Self::from_parts(config.clone(), items)?, split))
    }

    /// Build directly from features — the constructor tests and the
    /// experiment matrix (which reuses cached features) go through here.
    pub fn from_parts(
        config: ModelConfig,
        items: Vec<(String, Device, Label, FeatureMatrix)>,
    ) -> Result<Self, AdaptError> {
        let audit = Arc::new(LabelAudit::default());
        let mut samples = Vec::with_capacity(items.len());
        let mut index = HashMap::new();
        for (id, device, label, features) in items {
            if features.data.ncols() != config.input_dim() {
                return Err(AdaptError::DataMismatch(format!(
                    "'{id}' has {} feature dims, model expects {}",
                    features.data.ncols(),
                    config.input_dim()
                )));
            }
            if index.insert(id.clone(), samples.len()).is_some() {
                return Err(AdaptError::DataMismatch(format!("duplicate id '{id}'")));
            }
            samples.push(DataSample {
                id,
                device,
                features,
                label,
                audit: Arc::clone(&audit),
            });
        }
        Ok(CorpusData {
            config,
            samples,
            index,
            audit,
        })
    }

    pub fn get(&self, id: &str) -> Result<&DataSample, AdaptError> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| AdaptError::UnknownId(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Total target-label reads since this data was loaded.
    pub fn target_label_reads(&self) -> u64 {
        self.audit.target_reads()
    }
}

// ---- splits --------------------------------------------------------------

/// The four disjoint utterance pools of one experiment.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DomainSplit {
    pub source_train: Vec<String>,
    pub source_test: Vec<String>,
    pub target_adapt: Vec<String>,
    pub target_test: Vec<String>,
}

impl DomainSplit {
    pub fn ids(&self, subset: Subset) -> &[String] {
        match subset {
            Subset::SourceTrain => &self.source_train,
            Subset::SourceTest => &self.source_test,
            Subset::TargetAdapt => &self.target_adapt,
            Subset::TargetTest => &self.target_test,
        }
    }

    fn section_mut(&mut self, subset: Subset) -> &mut Vec<String> {
        match subset {
            Subset::SourceTrain => &mut self.source_train,
            Subset::SourceTest => &mut self.source_test,
            Subset::TargetAdapt => &mut self.target_adapt,
            Subset::TargetTest => &mut self.target_test,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        let mut seen = HashSet::new();
        for subset in Subset::all() {
            for id in self.ids(subset) {
                if !seen.insert(id.clone()) {
                    return Err(AdaptError::BadSplit(format!(
                        "utterance '{id}' appears in more than one subset"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_manifest(rows: &[ManifestRow]) -> Result<Self, AdaptError> {
        let mut split = DomainSplit::default();
        for row in rows {
            let subset = row.subset().map_err(AdaptError::Corpus)?;
            split.section_mut(subset).push(row.id.clone());
        }
        split.validate()?;
        Ok(split)
    }

    /// Write the plain-text split format: a `[section]` header per
    /// subset, one utterance id per line.
    pub fn write(&self, path: &Path) -> Result<(), AdaptError> {
        let mut out = String::new();
        for subset in Subset::all() {
            out.push('[');
            out.push_str(subset.as_str());
            out.push_str("]\n");
            for id in self.ids(subset) {
                out.push_str(id);
                out.push('\n');
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, AdaptError> {
        let text = std::fs::read_to_string(path)?;
        let mut split = DomainSplit::default();
        let mut current: Option<Subset> = None;
        let mut seen_sections = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let subset = name
                    .parse::<Subset>()
                    .map_err(|e| AdaptError::BadSplit(format!("line {}: {e}", lineno + 1)))?;
                if !seen_sections.insert(subset) {
                    return Err(AdaptError::BadSplit(format!(
                        "line {}: repeated section [{name}]",
                        lineno + 1
                    )));
                }
                current = Some(subset);
            } else {
                let subset = current.ok_or_else(|| {
                    AdaptError::BadSplit(format!(
                        "line {}: utterance id before any [section] header",
                        lineno + 1
                    ))
                })?;
                split.section_mut(subset).push(line.to_string());
            }
        }
        split.validate()?;
        Ok(split)
    }
}

// ---- metrics and outputs -------------------------------------------------

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean label loss over the epoch's batches.
    pub label_loss: f64,
    /// Mean device loss; 0 when the adversarial branch did not run.
    pub device_loss: f64,
    /// Mean λ applied across the epoch's steps.
    pub lambda: f64,
    /// PR-AUC over the regime's label-training pool, scored after the
    /// epoch's updates.
    pub train_pr_auc: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<(), AdaptError> {
    // write the header by hand so zero-epoch runs still produce a
    // well-formed file
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["epoch", "label_loss", "device_loss", "lambda", "train_pr_auc"])?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(AdaptError::Io)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>, AdaptError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<EpochMetrics>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// A finished training run: the model, its epoch log, and how many target
/// labels it read along the way.
pub struct TrainedRun {
    pub model: ModelGraph,
    pub metrics: Vec<EpochMetrics>,
    /// Target-label reads attributable to this run alone.
    pub target_label_reads: u64,
    pub config: TrainConfig,
}

impl fmt::Debug for TrainedRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainedRun")
            .field("regime", &self.config.regime)
            .field("epochs", &self.metrics.len())
            .field("target_label_reads", &self.target_label_reads)
            .finish_non_exhaustive()
    }
}

/// The key=value run manifest schema, in writing order.
pub fn run_manifest_pairs(config: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("regime", config.regime.to_string()),
        ("model", config.kind.to_string()),
        ("feature", config.feature.kind.to_string()),
        ("window_ms", config.feature.window_ms.to_string()),
        ("normalized", config.feature.normalized.to_string()),
        ("n_mel_filters", config.feature.n_mel_filters.to_string()),
        ("n_cepstra", config.feature.n_cepstra.to_string()),
        ("pre_emphasis", config.feature.pre_emphasis.to_string()),
        ("context", config.feature.context.to_string()),
        ("hidden", config.hidden.to_string()),
        ("device_hidden", config.device_hidden.to_string()),
        ("lambda", config.lambda.to_string()),
        ("lr", config.lr.to_string()),
        ("epochs", config.epochs.to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("seed", config.seed.to_string()),
    ]
}

/// Write a run manifest: `key=value` per line, `#`-comments allowed.
pub fn write_run_manifest(
    path: &Path,
    pairs: &[(&str, String)],
) -> Result<(), std::io::Error> {
    let mut f = std::fs::File::create(path)?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}")?;
    }
    Ok(())
}

// ---- scoring helpers -----------------------------------------------------

/// Score a list of utterances with truth labels attached (for test-set
/// evaluation; does not touch the label audit).
pub fn score_ids(
    model: &ModelGraph,
    data: &CorpusData,
    ids: &[String],
) -> Result<Vec<ScoredUtterance>, AdaptError> {
    ids.iter()
        .map(|id| {
            let s = data.get(id)?;
            let score = model.score(&s.features)?;
            Ok(ScoredUtterance::new(&s.id, score, s.truth(), s.device))
        })
        .collect()
}

/// PR-AUC of a model over a subset of utterance ids.
pub fn subset_pr_auc(
    model: &ModelGraph,
    data: &CorpusData,
    ids: &[String],
) -> Result<f64, AdaptError> {
    let mut scores = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let s = data.get(id)?;
        scores.push(model.score(&s.features)?);
        labels.push(s.truth());
    }
    Ok(eval::pr_auc(&scores, &labels)?.auc)
}

/// Pooled embeddings `z` with device tags, for post-hoc domain probes.
pub fn embeddings(
    model: &ModelGraph,
    data: &CorpusData,
    ids: &[String],
) -> Result<Vec<(Array1<f64>, Device)>, AdaptError> {
    ids.iter()
        .map(|id| {
            let s = data.get(id)?;
            Ok((model.embed(&s.features)?, s.device))
        })
        .collect()
}

// ---- training ------------------------------------------------------------

/// Train a fresh model under any regime except frozen fine-tuning (which
/// needs a pretrained model — see [`finetune`]).
pub fn train(
    config: &TrainConfig,
    data: &CorpusData,
    split: &DomainSplit,
) -> Result<TrainedRun, AdaptError> {
    if config.regime == Regime::FrozenFineTune {
        return Err(AdaptError::MissingPretrained);
    }
    config.validate()?;
    check_compat(config, data)?;
    let model = ModelGraph::new(&config.model_config(), config.seed);
    run_training(config, data, split, model)
}

/// Baseline 3: clone a pretrained source-only model, freeze everything but
/// the label head, and fine-tune on target_adapt.
pub fn finetune(
    config: &TrainConfig,
    data: &CorpusData,
    split: &DomainSplit,
    pretrained: &ModelGraph,
) -> Result<TrainedRun, AdaptError> {
    if config.regime != Regime::FrozenFineTune {
        return Err(AdaptError::BadConfig(format!(
            "finetune() called with regime {}",
            config.regime
        )));
    }
    config.validate()?;
    check_compat(config, data)?;
    if pretrained.config != config.model_config() {
        return Err(AdaptError::BadConfig(
            "pretrained model does not match the fine-tune config".into(),
        ));
    }
    run_training(config, data, split, pretrained.clone())
}

fn check_compat(config: &TrainConfig, data: &CorpusData) -> Result<(), AdaptError> {
    if data.config != config.model_config() {
        return Err(AdaptError::DataMismatch(
            "corpus features were extracted for a different model config".into(),
        ));
    }
    Ok(())
}

fn resolve<'d>(
    data: &'d CorpusData,
    ids: &[String],
) -> Result<Vec<&'d DataSample>, AdaptError> {
    ids.iter().map(|id| data.get(id)).collect()
}

fn shuffle<T>(v: &mut [T], r: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = r.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Both classes must appear in a pool whose labels will be trained on
/// (and whose PR-AUC the epoch log reports).
fn check_two_classes(pool: &[&DataSample], name: &'static str) -> Result<(), AdaptError> {
    let mut seen = [false; 2];
    for s in pool {
        seen[s.truth().index()] = true;
    }
    if seen.iter().all(|&b| b) {
        Ok(())
    } else {
        Err(AdaptError::DegenerateLabels(format!(
            "{name} contains only one class"
        )))
    }
}

fn run_training(
    config: &TrainConfig,
    data: &CorpusData,
    split: &DomainSplit,
    mut model: ModelGraph,
) -> Result<TrainedRun, AdaptError> {
    split.validate()?;
    let regime = config.regime;

    let anchor = if regime.target_anchored() {
        let pool = resolve(data, &split.target_adapt)?;
        if pool.is_empty() {
            return Err(AdaptError::EmptySplit("target_adapt"));
        }
        pool
    } else {
        let pool = resolve(data, &split.source_train)?;
        if pool.is_empty() {
            return Err(AdaptError::EmptySplit("source_train"));
        }
        pool
    };
    let target_pool = if regime.uses_device_loss() {
        let pool = resolve(data, &split.target_adapt)?;
        if pool.is_empty() {
            return Err(AdaptError::EmptySplit("target_adapt"));
        }
        pool
    } else {
        Vec::new()
    };

    // the pool whose labels drive L_y, also used for the epoch PR-AUC
    let label_pool: Vec<&DataSample> = match regime {
        Regime::DatSupervised => anchor
            .iter()
            .chain(resolve(data, &split.target_adapt)?.iter())
            .copied()
            .collect(),
        _ => anchor.clone(),
    };
    check_two_classes(&label_pool, "label-training pool")?;

    let reads_before = data.target_label_reads();
    let _forbid = if regime == Regime::DatUnsupervised {
        Some(ForbidGuard::new(Arc::clone(&data.audit)))
    } else {
        None
    };

    let frozen = regime == Regime::FrozenFineTune;
    let batch = config.batch_size;
    let steps_per_epoch = anchor.len().div_ceil(batch);
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let adam_cfg = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.all_params());
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..anchor.len()).collect();
        shuffle(
            &mut order,
            &mut rng::stream_indexed(config.seed, "batch.anchor", epoch as u64),
        );
        let mut target_rng = rng::stream_indexed(config.seed, "batch.target", epoch as u64);

        let mut epoch_ly = 0.0;
        let mut epoch_ld = 0.0;
        let mut epoch_lambda = 0.0;
        let mut n_steps = 0usize;

        for chunk in order.chunks(batch) {
            let p = global_step as f64 / total_steps as f64;
            let lam = if regime.uses_device_loss() {
                config.lambda.value(p)
            } else {
                0.0
            };
            model.device_head.set_lambda(lam);
            model.zero_grads();

            let chunk_samples: Vec<&DataSample> = chunk.iter().map(|&i| anchor[i]).collect();
            // mixed batches: one target draw per anchor item, with
            // replacement (target_adapt is much smaller than source_train)
            let target_draw: Vec<&DataSample> = if regime.uses_device_loss() {
                use rand::Rng;
                (0..chunk_samples.len())
                    .map(|_| target_pool[target_rng.random_range(0..target_pool.len())])
                    .collect()
            } else {
                Vec::new()
            };

            let n_label = chunk_samples.len()
                + if regime == Regime::DatSupervised {
                    target_draw.len()
                } else {
                    0
                };
            let n_dev = chunk_samples.len() + target_draw.len();
            // λ exactly 0 disables the whole adversarial branch: no device
            // forward, no device-head updates — this is what makes a λ=0
            // DAT run bit-identical to source-only
            let device_active = regime.uses_device_loss() && lam != 0.0;

            let mut step_ly = 0.0;
            let mut step_ld = 0.0;
            for s in &chunk_samples {
                accumulate_sample(
                    &mut model,
                    s,
                    Some(s.label()),
                    device_active,
                    n_label,
                    n_dev,
                    frozen,
                    &mut step_ly,
                    &mut step_ld,
                )?;
            }
            for s in &target_draw {
                let label = if regime == Regime::DatSupervised {
                    Some(s.label())
                } else {
                    None
                };
                accumulate_sample(
                    &mut model,
                    s,
                    label,
                    device_active,
                    n_label,
                    n_dev,
                    frozen,
                    &mut step_ly,
                    &mut step_ld,
                )?;
            }

            clip_group_norm(&mut model.detector_params_mut(), GRAD_CLIP);
            if device_active {
                clip_group_norm(&mut model.device_params_mut(), GRAD_CLIP);
            }
            adam.step(&mut model.all_params_mut(), &adam_cfg);

            epoch_ly += step_ly;
            epoch_ld += step_ld;
            epoch_lambda += lam;
            n_steps += 1;
            global_step += 1;
        }

        let auc = train_pool_auc(&model, &label_pool)?;
        metrics.push(EpochMetrics {
            epoch,
            label_loss: epoch_ly / n_steps as f64,
            device_loss: epoch_ld / n_steps as f64,
            lambda: epoch_lambda / n_steps as f64,
            train_pr_auc: auc,
        });
    }

    Ok(TrainedRun {
        model,
        metrics,
        target_label_reads: data.target_label_reads() - reads_before,
        config: config.clone(),
    })
}

/// Forward one sample and accumulate its label and/or device gradients.
#[allow(clippy::too_many_arguments)]
fn accumulate_sample(
    model: &mut ModelGraph,
    s: &DataSample,
    label: Option<Label>,
    device_active: bool,
    n_label: usize,
    n_dev: usize,
    frozen: bool,
    step_ly: &mut f64,
    step_ld: &mut f64,
) -> Result<(), AdaptError> {
    let fwd = model.forward(&s.features)?;
    let dlabel = label.map(|l| {
        let (loss, d) = ModelGraph::label_loss(&fwd, l.index(), 1.0 / n_label as f64);
        *step_ly += loss;
        d
    });
    let dz = if device_active {
        let logits = model.device_head.forward(&fwd.z);
        let (loss, mut dlogits) = cross_entropy(&logits, s.device.index());
        *step_ld += loss / n_dev as f64;
        dlogits.mapv_inplace(|v| v / n_dev as f64);
        Some(model.device_head.backward(&dlogits))
    } else {
        None
    };
    if frozen {
        // only the label head accumulates; the encoder stays bit-frozen
        if let Some(dl) = &dlabel {
            model.label_head.backward(dl);
        }
    } else if dlabel.is_some() || dz.is_some() {
        model.backward(&fwd, dlabel.as_ref(), dz.as_ref());
    }
    Ok(())
}

/// PR-AUC over the label-training pool. Uses the audited accessor on
/// purpose: a regime that shouldn't see target labels would panic here
/// rather than silently leak them into its own training log.
fn train_pool_auc(model: &ModelGraph, pool: &[&DataSample]) -> Result<f64, AdaptError> {
    let mut scores = Vec::with_capacity(pool.len());
    let mut labels = Vec::with_capacity(pool.len());
    for s in pool {
        scores.push(model.score(&s.features)?);
        labels.push(s.label());
    }
    Ok(eval::pr_auc(&scores, &labels)?.auc)
}

#[cfg(test)]
mod tests;
