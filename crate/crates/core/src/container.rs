//! The "FBT1" binary tensor container and the FNV-1a checksum shared by all
//! on-disk formats.
//!
//! Layout: magic "FBT1", u8 dtype (0=f32, 1=f64), u8 rank, rank x u64 dims,
//! little-endian row-major payload, trailing u64 FNV-1a checksum of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const FBT1_MAGIC: &[u8; 4] = b"FBT1";

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Incremental FNV-1a, for formats that hash while writing.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Fnv1a {
        Fnv1a(FNV_OFFSET)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a::new()
    }
}

/// Serialize a tensor into FBT1 bytes.
pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + t.len() * S::DTYPE.byte_width());
    out.extend_from_slice(FBT1_MAGIC);
    out.push(S::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&t.payload_bytes());
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Parse FBT1 bytes into a tensor of element type `S`. The stored dtype must
/// match `S`; checksum and truncation are verified.
pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != FBT1_MAGIC {
        return Err(Error::Data(format!(
            "bad tensor magic {:?}, expected \"FBT1\"",
            &magic
        )));
    }
    let dtype = Dtype::from_byte(r.u8()?)?;
    if dtype != S::DTYPE {
        return Err(Error::Data(format!(
            "tensor dtype {dtype:?} does not match requested {:?}",
            S::DTYPE
        )));
    }
    let rank = r.u8()? as usize;
    if rank == 0 || rank > 3 {
        return Err(Error::Data(format!("tensor rank {rank} out of range 1..=3")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let count: usize = dims.iter().product();
    let width = S::DTYPE.byte_width();
    let payload = r.take(count.checked_mul(width).ok_or_else(|| {
        Error::Data(format!("tensor dims {dims:?} overflow payload size"))
    })?)?;
    let body_end = r.pos;
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after tensor checksum",
            bytes.len() - r.pos
        )));
    }
    let actual = fnv1a(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Data(format!(
            "tensor checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        data.push(S::read_le(&payload[i * width..(i + 1) * width]));
    }
    // Finiteness is reported with the flat index; callers that know the
    // logical layout re-map it (see data::load_view_features).
    Tensor::new(dims, data)
}

pub fn write_tensor<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read tensor {}: {e}", path.display())))?;
    decode_tensor(&bytes)
}

/// Little cursor over a byte slice with truncation errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Reader<'a> {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "truncated input: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
