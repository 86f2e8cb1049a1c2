//! Flat binary feature cache.
//!
//! Layout: magic `DAVF`, version `u32`, dims `u32`, frames `u32`, then
//! `frames * dims` row-major f64 values. All integers and floats are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

const MAGIC: &[u8; 4] = b"DAVF";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature cache file (bad magic)")]
    BadMagic,
    #[error("unsupported feature cache version {0}")]
    BadVersion(u32),
    #[error("feature cache truncated: expected {expected} bytes of data, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Write a frames-by-dims matrix to `path`.
pub fn save_feature_cache(path: &Path, data: &Array2<f64>) -> Result<(), CacheError> {
    let (frames, dims) = data.dim();
    let mut out = Vec::with_capacity(16 + frames * dims * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    for t in 0..frames {
        for d in 0..dims {
            out.extend_from_slice(&data[[t, d]].to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Read a matrix written by [`save_feature_cache`].
pub fn load_feature_cache(path: &Path) -> Result<Array2<f64>, CacheError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CacheError::BadVersion(version));
    }
    let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = frames * dims * 8;
    let found = bytes.len() - 16;
    if found < expected {
        return Err(CacheError::Truncated { expected, found });
    }
    let mut data = Array2::<f64>::zeros((frames, dims));
    let mut off = 16;
    for t in 0..frames {
        for d in 0..dims {
            data[[t, d]] = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
    }
    Ok(data)
}
