//! The "FBCK" checkpoint container: every parameter of a [`ParamStore`],
//! in insertion order, with a trailing checksum.
//!
//! Layout: magic "FBCK", u32 version, u64 param count, then per parameter:
//! u32 name length, name bytes (UTF-8), u8 dtype, u8 rank, rank x u64 dims,
//! little-endian payload. Trailing u64 FNV-1a over all preceding bytes.
//!
//! Loading restores values into an already-constructed store and demands an
//! exact match of names, order, dims and dtype, so a checkpoint cannot be
//! silently applied to the wrong architecture.

use std::fs;
use std::path::Path;

use crate::container::{fnv1a, Reader};
use crate::error::{Error, Result};
use crate::nn::store::ParamStore;
use crate::tensor::{Dtype, Scalar};

pub const FBCK_MAGIC: &[u8; 4] = b"FBCK";
pub const FBCK_VERSION: u32 = 1;

pub fn encode_checkpoint<S: Scalar>(store: &ParamStore<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FBCK_MAGIC);
    out.extend_from_slice(&FBCK_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(S::DTYPE as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.value.payload_bytes());
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Restore parameter values from `bytes` into `store`.
pub fn decode_checkpoint_into<S: Scalar>(bytes: &[u8], store: &mut ParamStore<S>) -> Result<()> {
    if bytes.len() < 8 {
        return Err(Error::Data("checkpoint shorter than its header".into()));
    }
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let body = &bytes[..bytes.len() - 8];
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Data(format!(
            "checkpoint checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }
    let mut r = Reader::new(body);
    let magic = r.take(4)?;
    if magic != FBCK_MAGIC {
        return Err(Error::Data(format!(
            "bad checkpoint magic {magic:?}, expected \"FBCK\""
        )));
    }
    let version = r.u32()?;
    if version != FBCK_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, expected {FBCK_VERSION}"
        )));
    }
    let count = r.u64()? as usize;
    if count != store.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {count} parameters, model expects {}",
            store.len()
        )));
    }
    let expected: Vec<String> = store.names().map(|s| s.to_string()).collect();
    for want_name in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data("checkpoint parameter name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Data(format!(
                "checkpoint parameter {name:?} where model expects {want_name:?}"
            )));
        }
        let dtype = Dtype::from_byte(r.u8()?)?;
        if dtype != S::DTYPE {
            return Err(Error::Data(format!(
                "checkpoint dtype {dtype:?} does not match model dtype {:?}",
                S::DTYPE
            )));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let p = store.get_mut(name)?;
        if p.value.dims() != dims.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint dims {:?} for {name:?}, model expects {:?}",
                dims,
                p.value.dims()
            )));
        }
        let width = S::DTYPE.byte_width();
        let payload = r.take(p.value.len() * width)?;
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            *x = S::read_le(&payload[i * width..(i + 1) * width]);
        }
        p.value.validate_finite()?;
    }
    if r.pos != body.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after last checkpoint parameter",
            body.len() - r.pos
        )));
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path, store: &mut ParamStore<S>) -> Result<()> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint_into(&bytes, store)
}
