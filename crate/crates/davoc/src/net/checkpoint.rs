//! Binary checkpoint container.
//!
//! Layout: magic `DAVC`, version `u32`, header length `u32` + opaque header
//! bytes (interpreted by the model layer), parameter count `u32`, then per
//! parameter: name length `u32` + UTF-8 name, rank `u32`, each dim `u32`,
//! and the values as little-endian `f64`. Saving a loaded checkpoint
//! reproduces the input byte for byte because parameter order is the
//! model's canonical order and every field is written deterministically.

use std::io::{Read, Write};

use super::Param;
use ndarray::ArrayD;

pub const MAGIC: &[u8; 4] = b"DAVC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// One deserialized parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamRecord {
    pub fn from_param(p: &Param) -> Self {
        ParamRecord {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.as_slice().expect("contiguous param").to_vec(),
        }
    }

    /// Copy the stored values into a live parameter; name and shape must
    /// already agree.
    pub fn apply_to(&self, p: &mut Param) -> Result<(), CheckpointError> {
        if p.name != self.name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter order mismatch: expected {}, found {}",
                p.name, self.name
            )));
        }
        if p.value.shape() != self.shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                self.name,
                p.value.shape(),
                self.shape
            )));
        }
        let arr = ArrayD::from_shape_vec(self.shape.clone(), self.values.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("{}: {e}", self.name)))?;
        p.value = arr;
        Ok(())
    }
}

pub fn write_checkpoint<W: Write + ?Sized>(
    w: &mut W,
    header: &[u8],
    params: &[&Param],
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.value.as_slice().expect("contiguous param") {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read + ?Sized>(
    r: &mut R,
) -> Result<(Vec<u8>, Vec<ParamRecord>), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = read_u32(r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let n_params = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("non-UTF-8 parameter name".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        records.push(ParamRecord {
            name,
            shape,
            values,
        });
    }
    Ok((header, records))
}

fn read_u32<R: Read + ?Sized>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut r = rng::stream(97, "ckpt");
        let a = Param::glorot2("layer.w", 3, 4, &mut r);
        let b = Param::zeros1("layer.b", 3);
        let header = vec![1u8, 2, 3, 250];

        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &header, &[&a, &b]).unwrap();

        let (h2, records) = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(h2, header);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].shape, vec![3, 4]);

        // load into fresh params, save again: bytes must match exactly
        let mut a2 = Param::zeros1("layer.w", 0);
        a2.value = ndarray::ArrayD::zeros(vec![3, 4]);
        a2.grad = ndarray::ArrayD::zeros(vec![3, 4]);
        let mut b2 = Param::zeros1("layer.b", 3);
        records[0].apply_to(&mut a2).unwrap();
        records[1].apply_to(&mut b2).unwrap();
        let mut bytes2 = Vec::new();
        write_checkpoint(&mut bytes2, &h2, &[&a2, &b2]).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let bad = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CheckpointError::BadMagic)
        ));

        let mut bytes = Vec::new();
        let p = Param::zeros1("p", 1);
        write_checkpoint(&mut bytes, &[], &[&p]).unwrap();
        bytes[4] = 9; // version
        assert!(matches!(
            read_checkpoint(&mut bytes.as_slice()),
            Err(CheckpointError::BadVersion(9))
        ));
    }

    #[test]
    fn apply_rejects_mismatches() {
        let p = Param::zeros1("a", 2);
        let rec = ParamRecord::from_param(&p);
        let mut wrong_name = Param::zeros1("b", 2);
        assert!(rec.apply_to(&mut wrong_name).is_err());
        let mut wrong_shape = Param::zeros1("a", 3);
        assert!(rec.apply_to(&mut wrong_shape).is_err());
    }
}
