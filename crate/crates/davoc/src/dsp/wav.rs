//! Minimal RIFF/WAVE reader and writer for 16-bit integer PCM.
//!
//! Only what the corpus needs: mono or stereo PCM16 input (stereo is
//! collapsed by channel average), mono PCM16 output. Samples are scaled to
//! [-1, 1] by dividing by 32768.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Device, Utterance};

/// Errors from WAV parsing and writing.
#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported codec: {0}")]
    UnsupportedCodec(String),
    #[error("zero-length audio payload")]
    ZeroLengthPayload,
}

/// Read a PCM16 WAV file into an [`Utterance`].
///
/// The utterance id is the file stem; the device tag defaults to `Source`
/// and the label to `None` — callers attach the real metadata from the
/// corpus manifest.
pub fn read_wav(path: &Path) -> Result<Utterance, WavError> {
    let bytes = fs::read(path)?;
    let (samples, sample_rate) = decode_wav(&bytes)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Utterance {
        samples,
        sample_rate,
        device: Device::Source,
        label: None,
        id,
    })
}

/// Decode PCM16 WAV bytes into normalized mono samples and the sample rate.
pub fn decode_wav(bytes: &[u8]) -> Result<(Vec<f64>, u32), WavError> {
    if bytes.len() < 12 {
        return Err(WavError::MalformedHeader("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::MalformedHeader("missing RIFF tag".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader("missing WAVE tag".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12usize;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_start = off + 8;
        let body_end = body_start.checked_add(size).filter(|e| *e <= bytes.len());
        let body_end = match body_end {
            Some(e) => e,
            None => {
                return Err(WavError::MalformedHeader(format!(
                    "chunk {:?} overruns file",
                    String::from_utf8_lossy(id)
                )))
            }
        };
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::MalformedHeader("fmt chunk too small".into()));
                }
                let b = &bytes[body_start..body_end];
                let format = u16::from_le_bytes(b[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(b[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(b[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(b[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // skip LIST, fact, ...
        }
        // RIFF chunks are word-aligned
        off = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| WavError::MalformedHeader("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| WavError::MalformedHeader("missing data chunk".into()))?;

    if format != 1 {
        return Err(WavError::UnsupportedCodec(format!(
            "audio format {format} (only integer PCM is supported)"
        )));
    }
    if bits != 16 {
        return Err(WavError::UnsupportedCodec(format!("{bits}-bit samples (only 16-bit)")));
    }
    if channels == 0 || channels > 2 {
        return Err(WavError::UnsupportedCodec(format!("{channels} channels (only mono/stereo)")));
    }
    if rate == 0 {
        return Err(WavError::MalformedHeader("zero sample rate".into()));
    }
    if data.is_empty() {
        return Err(WavError::ZeroLengthPayload);
    }
    if data.len() % (2 * channels as usize) != 0 {
        return Err(WavError::MalformedHeader("data chunk not a whole number of frames".into()));
    }
    if rate != 44_100 {
        log::warn!("WAV sample rate {rate} Hz differs from the expected 44100 Hz corpus format");
    }

    let ch = channels as usize;
    let n_frames = data.len() / (2 * ch);
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..ch {
            let i = (f * ch + c) * 2;
            let v = i16::from_le_bytes([data[i], data[i + 1]]);
            acc += f64::from(v) / 32768.0;
        }
        samples.push(acc / ch as f64);
    }
    Ok((samples, rate))
}

/// Write mono samples as a PCM16 WAV file. Values are clamped to [-1, 1]
/// and quantized by rounding `x * 32768` into the i16 range.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), WavError> {
    let bytes = encode_wav(samples, sample_rate);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Encode mono samples as PCM16 WAV bytes.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * 32768.0).round();
        let v = q.clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
