//! Deterministic synthetic two-device vowel corpus.
//!
//! Clinical recordings cannot ship with the code, so experiments run on a
//! source-filter stand-in: an impulse-train glottal source with commanded
//! jitter, shimmer, and harmonics-to-noise ratio, filtered through
//! second-order formant resonators for a sustained /a/. Device channels
//! are simulated separately — an FIR impulse response, a spectral-tilt
//! rolloff, a brickwall bandlimit, and a noise floor — so the *same*
//! pathology cues appear under two different channel conditions and the
//! channel mismatch is fully controllable.
//!
//! Everything derives from one corpus seed: utterance `i` uses
//! `derive_seed_indexed(seed, "corpus/utterance", i)`, so per-utterance
//! generation can run in any order (or in parallel) without changing a
//! single sample.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};

use crate::dsp::{self, next_pow2, Device, Label, Utterance, WavError};
use crate::rng;

mod selftest;

pub use selftest::{run_selftest, SelfTestReport};
#[cfg(test)]
pub(crate) use selftest::probe_accuracy;

pub const SAMPLE_RATE: u32 = 44_100;

/// Peak amplitude after synthesis normalization.
const SYNTH_PEAK: f64 = 0.9;

/// Below this frequency the spectral tilt filter applies unit gain, so a
/// negative tilt is a pure high-frequency rolloff.
const TILT_PIVOT_HZ: f64 = 250.0;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error("manifest csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid voice spec: {0}")]
    BadVoice(String),
    #[error("unstable resonator: center {center} Hz, bandwidth {bandwidth} Hz at {sample_rate} Hz")]
    UnstableResonator {
        center: f64,
        bandwidth: f64,
        sample_rate: u32,
    },
    #[error("invalid device profile: {0}")]
    BadProfile(String),
    #[error("invalid corpus spec: {0}")]
    BadSpec(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

// ---- voice model ---------------------------------------------------------

/// Parameters of one synthetic sustained vowel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceSpec {
    pub f0_hz: f64,
    /// Fractional cycle-to-cycle period perturbation (e.g. 0.03 = 3%).
    pub jitter: f64,
    /// Fractional cycle-to-cycle amplitude perturbation.
    pub shimmer: f64,
    /// Harmonics-to-noise ratio; `f64::INFINITY` means noiseless.
    pub hnr_db: f64,
    /// `(center_hz, bandwidth_hz)` resonators, applied in cascade.
    pub formants: Vec<(f64, f64)>,
    pub duration_s: f64,
    pub label: Label,
}

impl VoiceSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.f0_hz.is_finite() && self.f0_hz > 0.0) {
            return Err(CorpusError::BadVoice(format!("f0 {} Hz", self.f0_hz)));
        }
        if self.f0_hz >= SAMPLE_RATE as f64 / 2.0 {
            return Err(CorpusError::BadVoice(format!(
                "f0 {} Hz at or above Nyquist",
                self.f0_hz
            )));
        }
        if self.jitter < 0.0 || self.shimmer < 0.0 {
            return Err(CorpusError::BadVoice("negative jitter/shimmer".into()));
        }
        if self.hnr_db.is_nan() {
            return Err(CorpusError::BadVoice("hnr is NaN".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(CorpusError::BadVoice(format!(
                "duration {} s",
                self.duration_s
            )));
        }
        for &(center, bandwidth) in &self.formants {
            check_resonator(center, bandwidth, SAMPLE_RATE)?;
        }
        Ok(())
    }
}

fn check_resonator(center: f64, bandwidth: f64, sample_rate: u32) -> Result<(), CorpusError> {
    let nyquist = sample_rate as f64 / 2.0;
    let ok = center.is_finite()
        && bandwidth.is_finite()
        && center > 0.0
        && center < nyquist
        && bandwidth > 0.0
        && bandwidth < nyquist / 2.0;
    if ok {
        Ok(())
    } else {
        Err(CorpusError::UnstableResonator {
            center,
            bandwidth,
            sample_rate,
        })
    }
}

/// Synthesize one vowel: impulse-train source with per-period jitter and
/// shimmer, additive source noise at `hnr_db`, cascaded formant
/// resonators, peak-normalized to 0.9 at 44.1 kHz.
///
/// Identical `(spec, seed)` produce bit-identical audio.
pub fn synth_vowel(spec: &VoiceSpec, seed: u64) -> Result<Utterance, CorpusError> {
    spec.validate()?;
    let sr = SAMPLE_RATE;
    let n = (spec.duration_s * sr as f64).round() as usize;
    let mut jitter_rng = rng::stream(seed, "voice/jitter");
    let mut shimmer_rng = rng::stream(seed, "voice/shimmer");
    let mut noise_rng = rng::stream(seed, "voice/noise");

    // glottal source: one impulse per period, period and amplitude
    // perturbed per cycle
    let t0 = sr as f64 / spec.f0_hz;
    let mut source = vec![0.0f64; n];
    let mut pos = 0.0f64;
    loop {
        let idx = pos.round() as usize;
        if idx >= n {
            break;
        }
        let amp = 1.0 + spec.shimmer * rng::normal(&mut shimmer_rng);
        source[idx] += amp;
        let period = t0 * (1.0 + spec.jitter * rng::normal(&mut jitter_rng));
        // a wild jitter draw must not stall or reverse the train
        pos += period.max(0.2 * t0);
    }

    if spec.hnr_db.is_finite() {
        let p_harm = source.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let noise_std = (p_harm * 10f64.powf(-spec.hnr_db / 10.0)).sqrt();
        for v in source.iter_mut() {
            *v += noise_std * rng::normal(&mut noise_rng);
        }
    }

    let mut y = source;
    for &(center, bandwidth) in &spec.formants {
        y = resonate(&y, center, bandwidth, sr);
    }

    let peak = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        let scale = SYNTH_PEAK / peak;
        for v in y.iter_mut() {
            *v *= scale;
        }
    }

    Ok(Utterance {
        samples: y,
        sample_rate: sr,
        device: Device::Source,
        label: Some(spec.label),
        id: String::new(),
    })
}

/// Two-pole resonator: poles at `r e^{±jθ}`, `r = exp(−π·bw/sr)`,
/// `θ = 2π·center/sr`. Gain is left unnormalized; the synthesizer
/// peak-normalizes at the end.
fn resonate(x: &[f64], center: f64, bandwidth: f64, sample_rate: u32) -> Vec<f64> {
    let r = (-std::f64::consts::PI * bandwidth / sample_rate as f64).exp();
    let theta = 2.0 * std::f64::consts::PI * center / sample_rate as f64;
    let a1 = 2.0 * r * theta.cos();
    let a2 = -r * r;
    let mut y = vec![0.0f64; x.len()];
    let mut y1 = 0.0;
    let mut y2 = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let yi = xi + a1 * y1 + a2 * y2;
        y[i] = yi;
        y2 = y1;
        y1 = yi;
    }
    y
}

// ---- device channels -----------------------------------------------------

/// Simulated recording channel for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device: Device,
    /// Gain slope above [`TILT_PIVOT_HZ`]; negative rolls off highs.
    pub spectral_tilt_db_per_octave: f64,
    /// Brickwall cutoff; bins above this frequency are zeroed.
    pub bandlimit_hz: f64,
    /// Additive white noise level in dB relative to signal RMS;
    /// `f64::NEG_INFINITY` disables it.
    pub noise_floor_db: f64,
    /// FIR impulse response, normalized to unit peak gain (max |H(f)| = 1).
    pub ir: Vec<f64>,
}

impl DeviceProfile {
    /// Build a profile, normalizing `ir` to unit peak gain.
    pub fn new(
        device: Device,
        spectral_tilt_db_per_octave: f64,
        bandlimit_hz: f64,
        noise_floor_db: f64,
        ir: Vec<f64>,
    ) -> Result<Self, CorpusError> {
        if ir.is_empty() || ir.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::BadProfile("IR must be finite and non-empty".into()));
        }
        let peak = ir_peak_gain(&ir);
        if peak <= 0.0 {
            return Err(CorpusError::BadProfile("IR has zero frequency response".into()));
        }
        let ir = ir.iter().map(|v| v / peak).collect();
        let p = DeviceProfile {
            device,
            spectral_tilt_db_per_octave,
            bandlimit_hz,
            noise_floor_db,
            ir,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !self.spectral_tilt_db_per_octave.is_finite() {
            return Err(CorpusError::BadProfile("tilt must be finite".into()));
        }
        if !(self.bandlimit_hz > 0.0) {
            return Err(CorpusError::BadProfile(format!(
                "bandlimit {} Hz",
                self.bandlimit_hz
            )));
        }
        if self.noise_floor_db.is_nan() || self.noise_floor_db == f64::INFINITY {
            return Err(CorpusError::BadProfile("noise floor must be < +inf".into()));
        }
        if self.ir.is_empty() || self.ir.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::BadProfile("IR must be finite and non-empty".into()));
        }
        let peak = ir_peak_gain(&self.ir);
        if (peak - 1.0).abs() > 1e-6 {
            return Err(CorpusError::BadProfile(format!(
                "IR peak gain {peak} is not 1"
            )));
        }
        Ok(())
    }

    /// Transparent studio channel: flat IR, no tilt, no bandlimit inside
    /// the audio band, very low noise floor.
    pub fn default_source() -> Self {
        DeviceProfile::new(Device::Source, 0.0, 21_000.0, -60.0, vec![1.0]).expect("static profile")
    }

    /// Handset-like channel: strong high-frequency rolloff, 4 kHz
    /// bandlimit, smeared IR, faint noise floor. The mismatch is dominated
    /// by the linear filtering, so it shifts feature statistics without
    /// burying the voice-quality cues themselves.
    pub fn default_target() -> Self {
        DeviceProfile::new(
            Device::Target,
            -6.0,
            4_000.0,
            -45.0,
            vec![0.55, 0.30, 0.15, 0.08],
        )
        .expect("static profile")
    }
}

/// Peak magnitude of the IR's frequency response on a 4096-point grid.
fn ir_peak_gain(ir: &[f64]) -> f64 {
    let len = next_pow2(ir.len().max(4096));
    let mut buf: Vec<Complex<f64>> = ir
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    buf.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Pass an utterance through a device channel: FIR convolution, spectral
/// tilt, brickwall bandlimit, additive noise floor; the output carries the
/// profile's device tag. Deterministic in `(utterance, profile, seed)`.
pub fn apply_channel(
    utterance: &Utterance,
    profile: &DeviceProfile,
    seed: u64,
) -> Result<Utterance, CorpusError> {
    profile.validate()?;
    utterance.validate()?;
    let sr = utterance.sample_rate;
    let n = utterance.samples.len();

    // FIR convolution, output truncated to the input length
    let mut conv = vec![0.0f64; n];
    for (j, &h) in profile.ir.iter().enumerate() {
        for i in j..n {
            conv[i] += h * utterance.samples[i - j];
        }
    }

    // zero-phase tilt + bandlimit in the frequency domain
    let len = next_pow2(n);
    let mut buf: Vec<Complex<f64>> = conv
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(len)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for k in 0..=len / 2 {
        let f = k as f64 * sr as f64 / len as f64;
        let g = if f > profile.bandlimit_hz {
            0.0
        } else if f <= TILT_PIVOT_HZ {
            1.0
        } else {
            10f64.powf(profile.spectral_tilt_db_per_octave * (f / TILT_PIVOT_HZ).log2() / 20.0)
        };
        buf[k] *= g;
        let mirror = (len - k) % len;
        if mirror != k {
            buf[mirror] *= g;
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let mut out: Vec<f64> = buf[..n].iter().map(|c| c.re / len as f64).collect();

    if profile.noise_floor_db.is_finite() {
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        let noise_std = rms * 10f64.powf(profile.noise_floor_db / 20.0);
        let mut noise_rng = rng::stream(seed, "channel/noise");
        for v in out.iter_mut() {
            *v += noise_std * rng::normal(&mut noise_rng);
        }
    }

    // keep WAV encoding linear if filtering pushed the peak near clipping
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.99 {
        let scale = 0.95 / peak;
        for v in out.iter_mut() {
            *v *= scale;
        }
    }

    Ok(Utterance {
        samples: out,
        sample_rate: sr,
        device: profile.device,
        label: utterance.label,
        id: utterance.id.clone(),
    })
}

// ---- corpus layout -------------------------------------------------------

/// Which experimental pool an utterance belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Subset {
    SourceTrain,
    SourceTest,
    TargetAdapt,
    TargetTest,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::SourceTrain => "source_train",
            Subset::SourceTest => "source_test",
            Subset::TargetAdapt => "target_adapt",
            Subset::TargetTest => "target_test",
        }
    }

    pub fn all() -> [Subset; 4] {
        [
            Subset::SourceTrain,
            Subset::SourceTest,
            Subset::TargetAdapt,
            Subset::TargetTest,
        ]
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source_train" => Ok(Subset::SourceTrain),
            "source_test" => Ok(Subset::SourceTest),
            "target_adapt" => Ok(Subset::TargetAdapt),
            "target_test" => Ok(Subset::TargetTest),
            other => Err(format!("unknown subset '{other}'")),
        }
    }
}

/// Uniform sampling ranges for one population's voice parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceRanges {
    pub f0_hz: (f64, f64),
    pub jitter: (f64, f64),
    pub shimmer: (f64, f64),
    pub hnr_db: (f64, f64),
    /// Per formant: (center range, bandwidth range).
    pub formants: Vec<((f64, f64), (f64, f64))>,
}

impl VoiceRanges {
    /// Healthy sustained /a/: low perturbation, clean harmonics.
    pub fn default_control() -> Self {
        VoiceRanges {
            f0_hz: (110.0, 220.0),
            jitter: (0.0, 0.005),
            shimmer: (0.0, 0.03),
            hnr_db: (18.0, 28.0),
            formants: default_formant_ranges(),
        }
    }

    /// Disordered voice: strong jitter/shimmer, heavy aspiration noise.
    pub fn default_pathological() -> Self {
        VoiceRanges {
            f0_hz: (100.0, 240.0),
            jitter: (0.02, 0.05),
            shimmer: (0.08, 0.20),
            hnr_db: (2.0, 10.0),
            formants: default_formant_ranges(),
        }
    }

    fn sample(&self, label: Label, duration_s: f64, rng: &mut rand_chacha::ChaCha8Rng) -> VoiceSpec {
        use rand::Rng;
        let mut draw = |range: (f64, f64)| -> f64 {
            range.0 + (range.1 - range.0) * rng.random::<f64>()
        };
        let f0_hz = draw(self.f0_hz);
        let jitter = draw(self.jitter);
        let shimmer = draw(self.shimmer);
        let hnr_db = draw(self.hnr_db);
        let formants = self
            .formants
            .iter()
            .map(|&(c, b)| (draw(c), draw(b)))
            .collect();
        VoiceSpec {
            f0_hz,
            jitter,
            shimmer,
            hnr_db,
            formants,
            duration_s,
            label,
        }
    }
}

/// Formant regions of a sustained /a/ (F1–F4).
fn default_formant_ranges() -> Vec<((f64, f64), (f64, f64))> {
    vec![
        ((650.0, 850.0), (60.0, 120.0)),
        ((1050.0, 1250.0), (70.0, 130.0)),
        ((2400.0, 2700.0), (100.0, 180.0)),
        ((3200.0, 3600.0), (120.0, 200.0)),
    ]
}

/// Full corpus recipe: population counts, split fractions, voice and
/// channel parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub source_pathological: usize,
    pub source_control: usize,
    pub target_pathological: usize,
    pub target_control: usize,
    /// Fraction of each source label group held out as source_test.
    pub source_test_fraction: f64,
    /// Fraction of each target label group held out as target_test.
    pub target_test_fraction: f64,
    pub duration_range_s: (f64, f64),
    pub control_voice: VoiceRanges,
    pub pathological_voice: VoiceRanges,
    pub source_profile: DeviceProfile,
    pub target_profile: DeviceProfile,
}

impl Default for CorpusSpec {
    /// The experimental shape: 133+50 source, 52+20 target; one fifth of
    /// each source group held out, half of each target group held out
    /// (26 pathological + 10 control in target_test).
    fn default() -> Self {
        CorpusSpec {
            source_pathological: 133,
            source_control: 50,
            target_pathological: 52,
            target_control: 20,
            source_test_fraction: 0.2,
            target_test_fraction: 0.5,
            duration_range_s: (0.4, 0.6),
            control_voice: VoiceRanges::default_control(),
            pathological_voice: VoiceRanges::default_pathological(),
            source_profile: DeviceProfile::default_source(),
            target_profile: DeviceProfile::default_target(),
        }
    }
}

impl CorpusSpec {
    /// Thirty-file corpus for fast continuous-integration runs.
    pub fn ci() -> Self {
        CorpusSpec {
            source_pathological: 10,
            source_control: 10,
            target_pathological: 6,
            target_control: 4,
            ..CorpusSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (name, n) in [
            ("source_pathological", self.source_pathological),
            ("source_control", self.source_control),
            ("target_pathological", self.target_pathological),
            ("target_control", self.target_control),
        ] {
            if n == 0 {
                return Err(CorpusError::BadSpec(format!("{name} must be >= 1")));
            }
        }
        for (name, f) in [
            ("source_test_fraction", self.source_test_fraction),
            ("target_test_fraction", self.target_test_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(CorpusError::BadSpec(format!("{name} {f} outside [0, 1)")));
            }
        }
        let (lo, hi) = self.duration_range_s;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(CorpusError::BadSpec(format!(
                "duration range ({lo}, {hi})"
            )));
        }
        if self.source_profile.device != Device::Source
            || self.target_profile.device != Device::Target
        {
            return Err(CorpusError::BadSpec(
                "profiles must carry their own device tags".into(),
            ));
        }
        self.source_profile.validate()?;
        self.target_profile.validate()?;
        Ok(())
    }

    pub fn total_utterances(&self) -> usize {
        self.source_pathological + self.source_control + self.target_pathological + self.target_control
    }
}

/// One planned utterance before synthesis.
#[derive(Debug, Clone)]
pub struct PlanItem {
    pub global_index: usize,
    pub id: String,
    pub device: Device,
    pub label: Label,
}

/// Deterministic enumeration order: source pathological, source control,
/// target pathological, target control.
pub fn corpus_plan(spec: &CorpusSpec) -> Vec<PlanItem> {
    let groups = [
        (Device::Source, Label::Pathological, spec.source_pathological, "src-path"),
        (Device::Source, Label::Control, spec.source_control, "src-ctrl"),
        (Device::Target, Label::Pathological, spec.target_pathological, "tgt-path"),
        (Device::Target, Label::Control, spec.target_control, "tgt-ctrl"),
    ];
    let mut plan = Vec::with_capacity(spec.total_utterances());
    let mut global_index = 0;
    for (device, label, count, prefix) in groups {
        for k in 0..count {
            plan.push(PlanItem {
                global_index,
                id: format!("{prefix}-{k:03}"),
                device,
                label,
            });
            global_index += 1;
        }
    }
    plan
}

/// The plan with each item's sampled voice and its synthesis seed — shared
/// by generation (which applies the channel) and the self-test (which also
/// inspects the clean signal).
pub fn plan_with_voices(spec: &CorpusSpec, seed: u64) -> Vec<(PlanItem, VoiceSpec, u64)> {
    use rand::Rng;
    corpus_plan(spec)
        .into_iter()
        .map(|item| {
            let utt_seed = rng::derive_seed_indexed(seed, "corpus/utterance", item.global_index as u64);
            let mut voice_rng = rng::stream(utt_seed, "voice/sample");
            let (lo, hi) = spec.duration_range_s;
            let duration = lo + (hi - lo) * voice_rng.random::<f64>();
            let ranges = match item.label {
                Label::Control => &spec.control_voice,
                Label::Pathological => &spec.pathological_voice,
            };
            let voice = ranges.sample(item.label, duration, &mut voice_rng);
            (item, voice, utt_seed)
        })
        .collect()
}

// ---- manifest ------------------------------------------------------------

/// One manifest line: where a file lives and what it is.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestRow {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub path: String,
    pub device: String,
    pub label: String,
    pub subset: String,
}

impl ManifestRow {
    pub fn device(&self) -> Result<Device, CorpusError> {
        match self.device.as_str() {
            "source" => Ok(Device::Source),
            "target" => Ok(Device::Target),
            other => Err(CorpusError::Manifest(format!("unknown device '{other}'"))),
        }
    }

    pub fn label(&self) -> Result<Label, CorpusError> {
        match self.label.as_str() {
            "pathological" => Ok(Label::Pathological),
            "control" => Ok(Label::Control),
            other => Err(CorpusError::Manifest(format!("unknown label '{other}'"))),
        }
    }

    pub fn subset(&self) -> Result<Subset, CorpusError> {
        Subset::from_str(&self.subset).map_err(CorpusError::Manifest)
    }
}

/// A generated corpus on disk.
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub manifest_path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// Synthesize all utterances, pass them through their device channels,
/// write WAVs and the manifest, and assign train/test subsets (stratified
/// by device and label).
pub fn generate_corpus(
    spec: &CorpusSpec,
    seed: u64,
    out_dir: &Path,
) -> Result<GeneratedCorpus, CorpusError> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir)?;

    let subsets = assign_subsets(spec, seed);
    let mut rows = Vec::with_capacity(spec.total_utterances());
    for (item, voice, utt_seed) in plan_with_voices(spec, seed) {
        let clean = synth_vowel(&voice, utt_seed)?;
        let profile = match item.device {
            Device::Source => &spec.source_profile,
            Device::Target => &spec.target_profile,
        };
        let mut utt = apply_channel(&clean, profile, utt_seed)?;
        utt.id = item.id.clone();
        let rel_path = format!("wav/{}.wav", item.id);
        dsp::write_wav(&out_dir.join(&rel_path), &utt.samples, utt.sample_rate)?;
        rows.push(ManifestRow {
            id: item.id.clone(),
            path: rel_path,
            device: match item.device {
                Device::Source => "source".into(),
                Device::Target => "target".into(),
            },
            label: match item.label {
                Label::Pathological => "pathological".into(),
                Label::Control => "control".into(),
            },
            subset: subsets[item.global_index].as_str().to_string(),
        });
    }

    let manifest_path = out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(CorpusError::Io)?;
    Ok(GeneratedCorpus {
        manifest_path,
        rows,
    })
}

/// Stratified subset assignment, indexed by global plan position. Within
/// each (device, label) group a seeded shuffle picks `round(n·fraction)`
/// test members; the rest are source_train / target_adapt.
fn assign_subsets(spec: &CorpusSpec, seed: u64) -> Vec<Subset> {
    use rand::Rng;
    let plan = corpus_plan(spec);
    let mut subsets = vec![Subset::SourceTrain; plan.len()];
    let groups = [
        (Device::Source, Label::Pathological, "split/src-path"),
        (Device::Source, Label::Control, "split/src-ctrl"),
        (Device::Target, Label::Pathological, "split/tgt-path"),
        (Device::Target, Label::Control, "split/tgt-ctrl"),
    ];
    for (device, label, tag) in groups {
        let members: Vec<usize> = plan
            .iter()
            .filter(|p| p.device == device && p.label == label)
            .map(|p| p.global_index)
            .collect();
        let fraction = match device {
            Device::Source => spec.source_test_fraction,
            Device::Target => spec.target_test_fraction,
        };
        let n_test = (members.len() as f64 * fraction).round() as usize;
        let mut order = members.clone();
        let mut r = rng::stream(seed, tag);
        for i in (1..order.len()).rev() {
            let j = r.random_range(0..=i);
            order.swap(i, j);
        }
        for (rank, &gi) in order.iter().enumerate() {
            subsets[gi] = match (device, rank < n_test) {
                (Device::Source, true) => Subset::SourceTest,
                (Device::Source, false) => Subset::SourceTrain,
                (Device::Target, true) => Subset::TargetTest,
                (Device::Target, false) => Subset::TargetAdapt,
            };
        }
    }
    subsets
}

/// Read a manifest written by [`generate_corpus`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, CorpusError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: Result<Vec<ManifestRow>, csv::Error> = r.deserialize().collect();
    let rows = rows?;
    if rows.is_empty() {
        return Err(CorpusError::Manifest(format!(
            "{} contains no rows",
            path.display()
        )));
    }
    Ok(rows)
}

/// Load every utterance referenced by a manifest, tagged with its metadata.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<(ManifestRow, Utterance)>, CorpusError> {
    let base = manifest_path
        .parent()
        .ok_or_else(|| CorpusError::Manifest("manifest has no parent directory".into()))?;
    let rows = read_manifest(manifest_path)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut utt = dsp::read_wav(&base.join(&row.path))?;
        utt.id = row.id.clone();
        utt.device = row.device()?;
        utt.label = Some(row.label()?);
        out.push((row, utt));
    }
    Ok(out)
}

/// SHA-256 of a file, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String, std::io::Error> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_string(&hasher.finalize()))
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
