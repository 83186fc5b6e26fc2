//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"RFGA1"`, record count `u32`, then per record: name length `u32`,
//! UTF-8 name, rank `u32`, `rank` dims as `u64`, and the row-major data as
//! `f64`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rfga_core::backbone::BackboneParams;
use rfga_core::Tensor;

pub const MAGIC: &[u8; 5] = b"RFGA1";

pub fn encode(records: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            bail!("checkpoint truncated at byte {}", self.pos);
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    ensure!(r.take(MAGIC.len())? == MAGIC, "not a checkpoint (bad magic)");
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .context("record name is not UTF-8")?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| Ok(usize::try_from(r.u64()?)?))
            .collect::<Result<Vec<usize>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len())) else {
            bail!("record '{name}' has implausible shape {shape:?}");
        };
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).with_context(|| format!("record '{name}'"))?;
        out.push((name, t));
    }
    ensure!(r.pos == bytes.len(), "{} trailing bytes after last record", bytes.len() - r.pos);
    Ok(out)
}

pub fn save(path: &Path, params: &BackboneParams) -> Result<()> {
    std::fs::write(path, encode(&params.named_tensors()))
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Copies checkpoint records into `params`; names and shapes must match exactly.
pub fn apply(params: &mut BackboneParams, records: Vec<(String, Tensor)>) -> Result<()> {
    let mut slots = params.named_tensors_mut();
    let expected: Vec<String> = slots.iter().map(|(n, _)| n.clone()).collect();
    for (name, _) in &records {
        if !expected.contains(name) {
            bail!("checkpoint has tensor '{name}' which this model does not have (model variant mismatch?)");
        }
    }
    for (name, slot) in slots.iter_mut() {
        let Some((_, t)) = records.iter().find(|(n, _)| n == name) else {
            bail!("checkpoint lacks tensor '{name}' (model variant mismatch?)");
        };
        if t.shape() != slot.shape() {
            bail!(
                "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            );
        }
        **slot = t.clone();
    }
    params.mark_stats_tracked();
    Ok(())
}

pub fn load_into(path: &Path, params: &mut BackboneParams) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let records = decode(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    apply(params, records).with_context(|| format!("loading {}", path.display()))
}
