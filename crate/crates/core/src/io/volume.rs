//! `SVOL` volume container.
//!
//! All integers and floats are little-endian.
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `SVOL`                            |
//! | 4      | 2    | version (u16, currently 1)              |
//! | 6      | 1    | dtype: 1 = f32, 2 = u8 binary mask      |
//! | 7      | 12   | D, H, W (u32 each)                      |
//! | 19     | 12   | spacing in mm along D, H, W (f32 each)  |
//! | 31     | 4    | CRC-32 (IEEE) of bytes 0..31            |
//! | 35     | ...  | payload, row-major with W innermost     |
//!
//! The payload holds exactly `D * H * W * size_of(dtype)` bytes.

use crate::anatomy::BinaryMask3;
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 35;
const CRC_AT: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    U8 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    /// Binary mask, values 0 or 1.
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims3,
    pub spacing: [f32; 3],
    pub payload: Payload,
}

fn check_binary(data: &[u8]) -> Result<()> {
    match data.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::Validation(format!(
            "mask must be binary: value {} at voxel {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

impl Volume {
    /// From a `(1, 1, D, H, W)` or `(D, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f32; 3]) -> Result<Self> {
        let dims = match t.shape() {
            [1, 1, d, h, w] | [d, h, w] => [*d, *h, *w],
            s => return Err(Error::dim("volume", format!("cannot store {s:?} as one volume"))),
        };
        Ok(Self {
            dims,
            spacing,
            payload: Payload::F32(t.data().to_vec()),
        })
    }

    pub fn from_mask(m: &BinaryMask3) -> Self {
        Self {
            dims: m.dims(),
            spacing: m.spacing(),
            payload: Payload::U8(m.data().to_vec()),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.payload {
            Payload::F32(_) => Dtype::F32,
            Payload::U8(_) => Dtype::U8,
        }
    }

    /// `(1, 1, D, H, W)`; masks become zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        let data = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::U8(v) => v.iter().map(|&b| b as f32).collect(),
        };
        Tensor::new(&[1, 1, d, h, w], data).expect("payload length checked")
    }

    pub fn to_mask(&self) -> Result<BinaryMask3> {
        match &self.payload {
            Payload::U8(v) => BinaryMask3::new(self.dims, self.spacing, v.clone()),
            Payload::F32(_) => Err(Error::Validation("expected a u8 mask volume, found f32".into())),
        }
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        let len = match &self.payload {
            Payload::F32(v) => {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Validation(format!("non-finite value at voxel {i}")));
                }
                v.len()
            }
            Payload::U8(v) => {
                check_binary(v)?;
                v.len()
            }
        };
        if len != n {
            return Err(Error::dim("volume", format!("{len} values for dims {:?}", self.dims)));
        }
        if self.dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return Err(Error::Validation(format!("dims {:?} out of range", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        Ok(())
    }
}

pub fn encode(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let n: usize = v.dims.iter().product();
    let mut out = Vec::with_capacity(HEADER_LEN + n * v.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(v.dtype() as u8);
    for d in v.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    match &v.payload {
        Payload::F32(data) => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(data) => out.extend_from_slice(data),
    }
    Ok(out)
}

fn bad(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_LEN {
        return Err(bad(
            bytes.len(),
            format!("truncated header: expected {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad(0, "bad magic, expected SVOL"));
    }
    let stored = u32_at(bytes, CRC_AT);
    let actual = crc32fast::hash(&bytes[..CRC_AT]);
    if stored != actual {
        return Err(bad(
            CRC_AT,
            format!("header checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let dtype = match bytes[6] {
        1 => Dtype::F32,
        2 => Dtype::U8,
        c => return Err(bad(6, format!("unknown dtype code {c}"))),
    };
    let dims = [0, 1, 2].map(|i| u32_at(bytes, 7 + 4 * i) as usize);
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(bad(7 + 4 * i, "zero dimension"));
    }
    let spacing = [0, 1, 2].map(|i| f32::from_bits(u32_at(bytes, 19 + 4 * i)));
    if let Some(i) = spacing.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(bad(19 + 4 * i, format!("invalid spacing {}", spacing[i])));
    }
    let expected = dims
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(7, "dims overflow"))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual != expected {
        let kind = if actual < expected { "truncated" } else { "oversized" };
        return Err(bad(
            HEADER_LEN,
            format!("{kind} payload: expected {expected} bytes, got {actual}"),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    let payload = match dtype {
        Dtype::F32 => Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ),
        Dtype::U8 => {
            check_binary(body)?;
            Payload::U8(body.to_vec())
        }
    };
    Ok(Volume { dims, spacing, payload })
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    std::fs::write(path, encode(v)?)?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode(&std::fs::read(path)?)
}
