//! Checkpoint header: the model and feature configuration, so a loaded
//! model refuses features it was not trained on.

use crate::dsp::{FeatureConfig, FeatureKind};
use crate::net::CheckpointError;

use super::{ModelConfig, ModelKind};

/// Fixed-size little-endian header (39 bytes).
pub(super) fn encode_header(config: &ModelConfig) -> Vec<u8> {
    let mut h = Vec::with_capacity(39);
    h.push(match config.kind {
        ModelKind::Blstm => 0u8,
        ModelKind::Mlp => 1u8,
    });
    h.extend_from_slice(&(config.hidden as u32).to_le_bytes());
    h.extend_from_slice(&(config.device_hidden as u32).to_le_bytes());
    let f = &config.feature;
    h.push(match f.kind {
        FeatureKind::Mfcc => 0u8,
        FeatureKind::FilterBank => 1u8,
    });
    h.extend_from_slice(&f.window_ms.to_le_bytes());
    h.push(f.normalized as u8);
    h.extend_from_slice(&(f.n_mel_filters as u32).to_le_bytes());
    h.extend_from_slice(&(f.n_cepstra as u32).to_le_bytes());
    h.extend_from_slice(&f.pre_emphasis.to_le_bytes());
    h.extend_from_slice(&(f.context as u32).to_le_bytes());
    h
}

pub(super) fn decode_header(h: &[u8]) -> Result<ModelConfig, CheckpointError> {
    if h.len() != 39 {
        return Err(CheckpointError::Corrupt(format!(
            "model header is {} bytes, expected 39",
            h.len()
        )));
    }
    let kind = match h[0] {
        0 => ModelKind::Blstm,
        1 => ModelKind::Mlp,
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "unknown model kind byte {other}"
            )))
        }
    };
    let hidden = u32::from_le_bytes(h[1..5].try_into().unwrap()) as usize;
    let device_hidden = u32::from_le_bytes(h[5..9].try_into().unwrap()) as usize;
    let feature_kind = match h[9] {
        0 => FeatureKind::Mfcc,
        1 => FeatureKind::FilterBank,
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "unknown feature kind byte {other}"
            )))
        }
    };
    let window_ms = f64::from_le_bytes(h[10..18].try_into().unwrap());
    let normalized = match h[18] {
        0 => false,
        1 => true,
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "bad normalized flag {other}"
            )))
        }
    };
    let n_mel_filters = u32::from_le_bytes(h[19..23].try_into().unwrap()) as usize;
    let n_cepstra = u32::from_le_bytes(h[23..27].try_into().unwrap()) as usize;
    let pre_emphasis = f64::from_le_bytes(h[27..35].try_into().unwrap());
    let context = u32::from_le_bytes(h[35..39].try_into().unwrap()) as usize;

    let feature = FeatureConfig {
        kind: feature_kind,
        window_ms,
        normalized,
        n_mel_filters,
        n_cepstra,
        pre_emphasis,
        context,
    };
    Ok(ModelConfig {
        kind,
        feature,
        hidden,
        device_hidden,
    })
}
