//! Binary checkpoints.
//!
//! Layout (little-endian): magic `CODIST01`, `u32` record count, then per
//! tensor `u32` name length, name bytes, `u32` rank, `rank × u32` dims and the
//! `f32` payload; a trailing `u64` FNV-1a checksum covers every preceding
//! byte. The model config travels as the first record, `__config__`.

use std::fs;
use std::path::Path;

use super::params::{ModelParams, Tensor};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CODIST01";
const CONFIG_RECORD: &str = "__config__";

fn config_values(c: &ModelConfig) -> [usize; 7] {
    [
        c.layers,
        c.embed_dim,
        c.heads,
        c.ffn_dim,
        c.vocab_size,
        c.max_positions,
        c.feature_dim,
    ]
}

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.tensors.len() as u32 + 1).to_le_bytes());
    let cfg = config_values(&params.config);
    put_record(
        &mut buf,
        CONFIG_RECORD,
        &[cfg.len()],
        cfg.iter().map(|&v| v as f32),
    );
    for t in &params.tensors {
        put_record(
            &mut buf,
            &t.name,
            &t.shape,
            t.data.iter().map(|v| v.as_f32()),
        );
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointFormat("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::CheckpointFormat("tensor name not utf-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?;
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::CheckpointFormat("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, shape, data))
    }
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::CheckpointFormat("no records".into()));
    }
    let (name, _, cfg) = r.record()?;
    if name != CONFIG_RECORD || cfg.len() != 7 {
        return Err(Error::CheckpointFormat("missing config record".into()));
    }
    let c: Vec<usize> = cfg.iter().map(|&v| v as usize).collect();
    let config = ModelConfig {
        layers: c[0],
        embed_dim: c[1],
        heads: c[2],
        ffn_dim: c[3],
        vocab_size: c[4],
        max_positions: c[5],
        feature_dim: c[6],
    };
    let mut tensors = Vec::with_capacity(count - 1);
    for _ in 1..count {
        let (name, shape, data) = r.record()?;
        tensors.push(Tensor {
            name,
            shape,
            data: data.into_iter().map(|v| T::lit(f64::from(v))).collect(),
        });
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointFormat("trailing bytes".into()));
    }
    ModelParams::from_tensors(&config, tensors)
}

pub fn write_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes)
}
