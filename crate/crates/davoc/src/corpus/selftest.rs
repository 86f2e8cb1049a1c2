//! Corpus self-test: linear probes that certify the synthetic data
//! actually contains the two signals the experiments need.
//!
//! A logistic-regression probe on time-averaged log filterbank energies
//! must (a) separate the two device channels almost perfectly and
//! (b) separate pathological from control voices on *clean* audio, before
//! any channel is applied. If either probe fails, the corpus recipe is
//! broken and every downstream result is meaningless — so this runs as a
//! cheap gate rather than waiting for a full training run to look wrong.

use ndarray::{Array1, Array2};

use crate::dsp::{self, Device, FeatureConfig, FeatureKind, Label};

use super::{apply_channel, plan_with_voices, synth_vowel, CorpusError, CorpusSpec};

/// Probe accuracies over one re-synthesized corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    pub n_utterances: usize,
    /// Linear separability of source vs. target channel (post-channel audio).
    pub device_probe_accuracy: f64,
    /// Linear separability of pathological vs. control (clean audio).
    pub pathology_probe_accuracy: f64,
}

impl SelfTestReport {
    pub const DEVICE_THRESHOLD: f64 = 0.95;
    pub const PATHOLOGY_THRESHOLD: f64 = 0.85;

    pub fn passed(&self) -> bool {
        self.device_probe_accuracy > Self::DEVICE_THRESHOLD
            && self.pathology_probe_accuracy > Self::PATHOLOGY_THRESHOLD
    }
}

/// Re-synthesize the corpus described by `(spec, seed)` in memory and run
/// both probes. Uses exactly the per-utterance seeds that
/// [`super::generate_corpus`] uses, so it certifies the corpus a given
/// seed would put on disk without touching the filesystem.
pub fn run_selftest(spec: &CorpusSpec, seed: u64) -> Result<SelfTestReport, CorpusError> {
    spec.validate()?;
    let feat_config = FeatureConfig::new(FeatureKind::FilterBank, 25.0, false);

    let mut clean_feats: Vec<Array1<f64>> = Vec::new();
    let mut channel_feats: Vec<Array1<f64>> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    let mut devices: Vec<Device> = Vec::new();

    for (item, voice, utt_seed) in plan_with_voices(spec, seed) {
        let clean = synth_vowel(&voice, utt_seed)?;
        let profile = match item.device {
            Device::Source => &spec.source_profile,
            Device::Target => &spec.target_profile,
        };
        let channeled = apply_channel(&clean, profile, utt_seed)?;
        clean_feats.push(mean_fbank(&clean, &feat_config)?);
        channel_feats.push(mean_fbank(&channeled, &feat_config)?);
        labels.push(item.label);
        devices.push(item.device);
    }

    let device_targets: Vec<f64> = devices.iter().map(|d| d.index() as f64).collect();
    let label_targets: Vec<f64> = labels.iter().map(|l| l.index() as f64).collect();

    Ok(SelfTestReport {
        n_utterances: labels.len(),
        device_probe_accuracy: probe_accuracy(&channel_feats, &device_targets),
        pathology_probe_accuracy: probe_accuracy(&clean_feats, &label_targets),
    })
}

fn mean_fbank(
    utterance: &crate::dsp::Utterance,
    config: &FeatureConfig,
) -> Result<Array1<f64>, CorpusError> {
    let feats = dsp::extract_features(utterance, config)?;
    Ok(feats.data.mean_axis(ndarray::Axis(0)).expect("nonzero frames"))
}

/// Train a logistic-regression probe on all examples and report its
/// training accuracy. This measures linear *separability* (is the signal
/// present at all?), so training accuracy is the right quantity; no
/// held-out split is wanted. Features are standardized per dimension,
/// weights start at zero, and 400 full-batch gradient steps at rate 0.5
/// are fully deterministic.
pub(crate) fn probe_accuracy(features: &[Array1<f64>], targets: &[f64]) -> f64 {
    let n = features.len();
    let d = features[0].len();
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, f) in features.iter().enumerate() {
        x.row_mut(i).assign(f);
    }
    // standardize each column; a constant column stays at zero
    for j in 0..d {
        let col = x.column(j).to_owned();
        let mean = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        let denom = if std > 1e-12 { std } else { 1.0 };
        for i in 0..n {
            x[[i, j]] = (x[[i, j]] - mean) / denom;
        }
    }

    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    let lr = 0.5;
    for _ in 0..400 {
        let mut gw = Array1::<f64>::zeros(d);
        let mut gb = 0.0f64;
        for i in 0..n {
            let z = x.row(i).dot(&w) + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - targets[i];
            gw.scaled_add(err, &x.row(i));
            gb += err;
        }
        w.scaled_add(-lr / n as f64, &gw);
        b -= lr / n as f64 * gb;
    }

    let correct = (0..n)
        .filter(|&i| {
            let z = x.row(i).dot(&w) + b;
            let predicted = if z > 0.0 { 1.0 } else { 0.0 };
            predicted == targets[i]
        })
        .count();
    correct as f64 / n as f64
}
