//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! | field            | size                                  |
//! |------------------|---------------------------------------|
//! | magic `CKPT`     | 4                                     |
//! | version          | u16                                   |
//! | metadata length  | u32                                   |
//! | metadata JSON    | `{ "config": .., "seed": .. }`        |
//! | parameter count  | u32                                   |
//! | per parameter    | u16 name length, name (UTF-8), u8 trainable, u8 rank, rank x u32 dims, f32 values |
//!
//! Running batch-norm statistics are stored as non-trainable parameters.

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: NetworkConfig,
    seed: u64,
}

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: net.config.clone(),
        seed: net.seed,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(net.store.len() as u32).to_le_bytes());
    for (_, p) in net.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn bad(&self, at: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: at as u64,
            detail: detail.into(),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.bad(0, "bad magic, expected CKPT"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.bad(4, format!("unsupported version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| r.bad(meta_at, format!("metadata: {e}")))?;
    let mut net = Network::new(meta.config, meta.seed)?;
    let count_at = r.pos;
    let count = r.u32("parameter count")? as usize;
    if count != net.store.len() {
        return Err(r.bad(
            count_at,
            format!("{count} parameters stored, architecture has {}", net.store.len()),
        ));
    }
    for _ in 0..count {
        let entry_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?).map_err(|_| r.bad(entry_at + 2, "name is not UTF-8"))?;
        let id = net
            .store
            .id(name)
            .ok_or_else(|| r.bad(entry_at, format!("unknown parameter `{name}`")))?;
        let trainable = r.u8("trainable flag")? != 0;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let expected = net.store.get(id);
        if expected.value.shape() != shape.as_slice() || expected.trainable != trainable {
            return Err(r.bad(
                entry_at,
                format!("`{name}` stored as {shape:?}, architecture expects {:?}", expected.value.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        net.store.set(id, Tensor::new(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(r.bad(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(net)
}

pub fn save(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    std::fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&std::fs::read(path)?)
}
