//! Acoustic front end: MFCC and log mel filter-bank extraction.
//!
//! The chain is pre-emphasis, framing with a frame shift of exactly half the
//! window length, Hamming windowing, power spectrum, mel filtering, log, and
//! (for MFCCs) an orthonormal DCT-II. Features can be normalized to zero
//! mean / unit variance per dimension over the utterance, and stacked with
//! their neighboring frames for sequence models.

mod cache;
mod wav;

pub use cache::{load_feature_cache, save_feature_cache, CacheError};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav, WavError};

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Which recording device an utterance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Device {
    /// The large labeled collection (high-quality microphone).
    Source,
    /// The small adaptation collection (smartphone).
    Target,
}

impl Device {
    /// Class index used by the device classifier.
    pub fn index(self) -> usize {
        match self {
            Device::Source => 0,
            Device::Target => 1,
        }
    }
}

/// Pathology label of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Control,
    Pathological,
}

impl Label {
    /// Class index used by the label predictor; `Pathological` is the
    /// positive class everywhere.
    pub fn index(self) -> usize {
        match self {
            Label::Control => 0,
            Label::Pathological => 1,
        }
    }
}

/// One voice recording plus its metadata: the (x, d, y) triplet.
#[derive(Debug, Clone)]
pub struct Utterance {
    /// Mono amplitude samples in [-1, 1].
    pub samples: Vec<f64>,
    /// Sampling rate in Hz.
    pub sample_rate: u32,
    /// Recording device tag.
    pub device: Device,
    /// Pathology label, when known.
    pub label: Option<Label>,
    /// Stable identifier (file stem in corpora).
    pub id: String,
}

impl Utterance {
    pub fn with_device(mut self, device: Device) -> Self {
        self.device = device;
        self
    }

    pub fn with_label(mut self, label: Option<Label>) -> Self {
        self.label = label;
        self
    }

    /// Check the basic invariants: non-empty, positive rate, finite samples.
    pub fn validate(&self) -> Result<(), DspError> {
        if self.samples.is_empty() {
            return Err(DspError::EmptyUtterance(self.id.clone()));
        }
        if self.sample_rate == 0 {
            return Err(DspError::BadSampleRate(self.id.clone()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteSamples(self.id.clone()));
        }
        Ok(())
    }
}

/// Feature family: cepstral coefficients or log filter-bank energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Mfcc,
    FilterBank,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::FilterBank => "fbank",
        }
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mfcc" => Ok(FeatureKind::Mfcc),
            "fbank" | "filterbank" | "filter-bank" => Ok(FeatureKind::FilterBank),
            other => Err(format!("unknown feature kind '{other}' (expected mfcc|fbank)")),
        }
    }
}

/// Front-end configuration.
///
/// The frame shift is always `window_len / 2` (integer floor division) in
/// samples, and the FFT size is the smallest power of two that holds one
/// window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    /// Analysis window length in milliseconds (32 or 100 in the experiments).
    pub window_ms: f64,
    /// Normalize each dimension to zero mean / unit variance over time.
    pub normalized: bool,
    /// Number of triangular mel filters.
    pub n_mel_filters: usize,
    /// Number of retained cepstral coefficients (c0 included).
    pub n_cepstra: usize,
    /// Pre-emphasis coefficient in [0, 1).
    pub pre_emphasis: f64,
    /// Context stacking width in frames (odd).
    pub context: usize,
}

impl FeatureConfig {
    pub fn new(kind: FeatureKind, window_ms: f64, normalized: bool) -> Self {
        FeatureConfig {
            kind,
            window_ms,
            normalized,
            n_mel_filters: 40,
            n_cepstra: 26,
            pre_emphasis: 0.97,
            context: 11,
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_ms <= 0.0 || !self.window_ms.is_finite() {
            return Err(DspError::BadConfig(format!("window_ms {} must be positive", self.window_ms)));
        }
        if self.n_cepstra > self.n_mel_filters {
            return Err(DspError::BadConfig(format!(
                "n_cepstra {} exceeds n_mel_filters {}",
                self.n_cepstra, self.n_mel_filters
            )));
        }
        if self.n_mel_filters == 0 {
            return Err(DspError::BadConfig("n_mel_filters must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(DspError::BadConfig(format!(
                "pre_emphasis {} outside [0, 1)",
                self.pre_emphasis
            )));
        }
        if self.context == 0 || self.context % 2 == 0 {
            return Err(DspError::ContextNotOdd(self.context));
        }
        Ok(())
    }

    /// Window length in samples: `round(window_ms * sample_rate / 1000)`.
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frame shift in samples: half the window, floored.
    pub fn frame_shift(&self, sample_rate: u32) -> usize {
        self.window_len(sample_rate) / 2
    }

    /// Feature dimensionality before context stacking.
    pub fn base_dims(&self) -> usize {
        match self.kind {
            FeatureKind::Mfcc => self.n_cepstra,
            FeatureKind::FilterBank => self.n_mel_filters,
        }
    }

    /// Dimensionality after context stacking (286 for 26-dim MFCCs, 440 for
    /// 40-dim filter banks at the default context of 11).
    pub fn stacked_dims(&self) -> usize {
        self.context * self.base_dims()
    }
}

/// Frames-by-dims feature matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// One row per frame.
    pub data: Array2<f64>,
    pub config: FeatureConfig,
    pub utterance_id: String,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }
}

/// Floor added inside the log to keep silent frames finite.
pub const LOG_GUARD: f64 = 1e-10;

/// Errors from the feature pipeline.
#[derive(Debug, thiserror::Error)]
pub enum DspError {
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("utterance '{0}' has no samples")]
    EmptyUtterance(String),
    #[error("utterance '{0}' has a zero sample rate")]
    BadSampleRate(String),
    #[error("utterance '{0}' contains non-finite samples")]
    NonFiniteSamples(String),
    #[error("invalid feature config: {0}")]
    BadConfig(String),
    #[error("signal of {len} samples is shorter than one {window}-sample window")]
    SignalTooShort { len: usize, window: usize },
    #[error("{0} mel filters are too many for the FFT resolution (an empty filter would result)")]
    FilterbankTooFine(usize),
    #[error("time normalization needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("context width {0} must be odd and >= 1")]
    ContextNotOdd(usize),
}

/// Smallest power of two >= `n`.
pub fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// First-order pre-emphasis: `y[0] = x[0]`, `y[n] = x[n] - coeff * x[n-1]`.
pub fn pre_emphasize(signal: &[f64], coeff: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&coeff), "pre-emphasis coeff {coeff} outside [0, 1)");
    let mut out = Vec::with_capacity(signal.len());
    let mut prev = 0.0;
    for (n, &x) in signal.iter().enumerate() {
        out.push(if n == 0 { x } else { x - coeff * prev });
        prev = x;
    }
    out
}

/// Slice a signal into overlapping frames (rows of the returned matrix).
///
/// Frame starts sit on the shift grid `0, shift, 2*shift, ...`. Full frames
/// are taken as long as a whole window fits; if trailing samples would
/// otherwise be covered by no frame, one final frame is taken from the next
/// grid position and zero-padded to the window length.
pub fn frame_signal(
    signal: &[f64],
    config: &FeatureConfig,
    sample_rate: u32,
) -> Result<Array2<f64>, DspError> {
    let window = config.window_len(sample_rate);
    let shift = config.frame_shift(sample_rate);
    let len = signal.len();
    if len < window {
        return Err(DspError::SignalTooShort { len, window });
    }
    let n_full = (len - window) / shift + 1;
    let covered_end = (n_full - 1) * shift + window;
    let tail = covered_end < len;
    let n_frames = n_full + usize::from(tail);

    let mut frames = Array2::<f64>::zeros((n_frames, window));
    for i in 0..n_full {
        let start = i * shift;
        for j in 0..window {
            frames[[i, j]] = signal[start + j];
        }
    }
    if tail {
        let start = n_full * shift;
        for (j, &x) in signal[start..].iter().enumerate() {
            frames[[n_full, j]] = x;
        }
    }
    Ok(frames)
}

/// Symmetric Hamming window of length `n`.
pub fn hamming_window(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// One-sided power spectrum of a frame.
///
/// The frame is Hamming-windowed, zero-padded to the smallest power of two
/// that holds it, transformed, and the squared magnitudes of bins
/// `0..=fft/2` are scaled by `1/fft_size`.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    assert!(!frame.is_empty(), "power spectrum of an empty frame");
    let fft_size = next_pow2(frame.len());
    let window = hamming_window(frame.len());
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    power_spectrum_windowed(frame, &window, fft.as_ref(), fft_size)
}

fn power_spectrum_windowed(
    frame: &[f64],
    window: &[f64],
    fft: &dyn rustfft::Fft<f64>,
    fft_size: usize,
) -> Vec<f64> {
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for (i, (&x, &w)) in frame.iter().zip(window).enumerate() {
        buf[i] = Complex::new(x * w, 0.0);
    }
    fft.process(&mut buf);
    let scale = 1.0 / fft_size as f64;
    buf[..=fft_size / 2].iter().map(|c| c.norm_sqr() * scale).collect()
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of `n_filters` triangular filters equally spaced
/// on the mel scale between 0 Hz and `sample_rate / 2`.
pub fn mel_center_frequencies(n_filters: usize, sample_rate: u32) -> Vec<f64> {
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let step = mel_max / (n_filters + 1) as f64;
    (1..=n_filters).map(|i| mel_to_hz(step * i as f64)).collect()
}

/// Triangular mel filter bank: `n_filters x (fft_size/2 + 1)`, peak 1.
pub fn mel_filterbank_matrix(
    n_filters: usize,
    fft_size: usize,
    sample_rate: u32,
) -> Result<Array2<f64>, DspError> {
    assert!(n_filters >= 1, "need at least one mel filter");
    let n_bins = fft_size / 2 + 1;
    let mel_max = hz_to_mel(sample_rate as f64 / 2.0);
    let step = mel_max / (n_filters + 1) as f64;
    let edges: Vec<f64> = (0..n_filters + 2).map(|i| mel_to_hz(step * i as f64)).collect();

    let mut m = Array2::<f64>::zeros((n_filters, n_bins));
    let bin_hz = sample_rate as f64 / fft_size as f64;
    for f in 0..n_filters {
        let (lo, center, hi) = (edges[f], edges[f + 1], edges[f + 2]);
        let mut any = false;
        for k in 0..n_bins {
            let freq = k as f64 * bin_hz;
            let w = if freq <= center {
                (freq - lo) / (center - lo)
            } else {
                (hi - freq) / (hi - center)
            };
            if w > 0.0 {
                m[[f, k]] = w;
                any = true;
            }
        }
        if !any {
            return Err(DspError::FilterbankTooFine(n_filters));
        }
    }
    Ok(m)
}

/// Log mel filter-bank features for one utterance.
pub fn log_filterbank_features(
    utterance: &Utterance,
    config: &FeatureConfig,
) -> Result<FeatureMatrix, DspError> {
    utterance.validate()?;
    config.validate()?;
    let fbank = log_mel_frames(utterance, config)?;
    Ok(FeatureMatrix {
        data: fbank,
        config: config.clone(),
        utterance_id: utterance.id.clone(),
    })
}

/// Shared fbank stage: pre-emphasis, framing, power spectra, mel filtering, log.
fn log_mel_frames(utterance: &Utterance, config: &FeatureConfig) -> Result<Array2<f64>, DspError> {
    let emphasized = pre_emphasize(&utterance.samples, config.pre_emphasis);
    let frames = frame_signal(&emphasized, config, utterance.sample_rate)?;
    let window_len = config.window_len(utterance.sample_rate);
    let fft_size = next_pow2(window_len);
    let fb = mel_filterbank_matrix(config.n_mel_filters, fft_size, utterance.sample_rate)?;
    let window = hamming_window(window_len);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);

    let n_frames = frames.nrows();
    let mut out = Array2::<f64>::zeros((n_frames, config.n_mel_filters));
    for t in 0..n_frames {
        let frame: Vec<f64> = frames.row(t).to_vec();
        let ps = power_spectrum_windowed(&frame, &window, fft.as_ref(), fft_size);
        let ps = Array1::from_vec(ps);
        let energies = fb.dot(&ps);
        for (d, &e) in energies.iter().enumerate() {
            out[[t, d]] = (e + LOG_GUARD).ln();
        }
    }
    Ok(out)
}

/// Orthonormal DCT-II matrix rows `0..n_out` over inputs of length `n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n_out, n_in));
    let n = n_in as f64;
    for k in 0..n_out {
        let norm = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for i in 0..n_in {
            m[[k, i]] =
                norm * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

/// MFCC features: DCT-II of the log filter-bank frames, keeping the first
/// `n_cepstra` coefficients (c0 included).
pub fn mfcc_features(utterance: &Utterance, config: &FeatureConfig) -> Result<FeatureMatrix, DspError> {
    utterance.validate()?;
    config.validate()?;
    let fbank = log_mel_frames(utterance, config)?;
    let dct = dct_matrix(config.n_cepstra, config.n_mel_filters);
    let data = fbank.dot(&dct.t());
    Ok(FeatureMatrix {
        data,
        config: config.clone(),
        utterance_id: utterance.id.clone(),
    })
}

/// Shift/scale each dimension to zero mean and unit standard deviation over
/// the utterance's frames. Dimensions with std below 1e-12 are only
/// mean-shifted.
pub fn normalize_over_time(features: &FeatureMatrix) -> Result<FeatureMatrix, DspError> {
    let n = features.n_frames();
    if n < 2 {
        return Err(DspError::TooFewFrames(n));
    }
    let mut data = features.data.clone();
    let nf = n as f64;
    for d in 0..data.ncols() {
        let col = data.column(d);
        let mean = col.sum() / nf;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let std = var.sqrt();
        if std < 1e-12 {
            for t in 0..n {
                data[[t, d]] -= mean;
            }
        } else {
            for t in 0..n {
                data[[t, d]] = (data[[t, d]] - mean) / std;
            }
        }
    }
    Ok(FeatureMatrix {
        data,
        config: features.config.clone(),
        utterance_id: features.utterance_id.clone(),
    })
}

/// Concatenate each frame with its neighbors: frame `t` becomes the
/// concatenation of frames `t-c ..= t+c` where `c = (context-1)/2`, with
/// edge frames replicated. Output dims = `context * base_dims`.
pub fn stack_context(features: &FeatureMatrix, context: usize) -> Result<FeatureMatrix, DspError> {
    if context == 0 || context % 2 == 0 {
        return Err(DspError::ContextNotOdd(context));
    }
    let n = features.n_frames();
    let dims = features.dims();
    let half = (context - 1) / 2;
    let mut data = Array2::<f64>::zeros((n, context * dims));
    for t in 0..n {
        for (slot, off) in (-(half as isize)..=half as isize).enumerate() {
            let src = (t as isize + off).clamp(0, n as isize - 1) as usize;
            for d in 0..dims {
                data[[t, slot * dims + d]] = features.data[[src, d]];
            }
        }
    }
    Ok(FeatureMatrix {
        data,
        config: features.config.clone(),
        utterance_id: features.utterance_id.clone(),
    })
}

/// Full front end for one utterance: MFCC or filter-bank features per
/// `config.kind`, normalized over time when `config.normalized` is set.
/// Context stacking is left to the caller (sequence models stack, the
/// per-frame MLP does not).
pub fn extract_features(utterance: &Utterance, config: &FeatureConfig) -> Result<FeatureMatrix, DspError> {
    let base = match config.kind {
        FeatureKind::Mfcc => mfcc_features(utterance, config)?,
        FeatureKind::FilterBank => log_filterbank_features(utterance, config)?,
    };
    if config.normalized {
        normalize_over_time(&base)
    } else {
        Ok(base)
    }
}
