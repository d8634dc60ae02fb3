//! Binary checkpoints: little-endian, parameters narrowed to f32.
//!
//! Layout: magic `MNDC`, u32 version, u32 tensor count, then per tensor a u16
//! name length, the name bytes, u8 rank, u32 dims and the f32 payload. The run
//! config travels as the tensor `meta.config` (its text form, one byte per
//! element) and the optimizer step count as `meta.step`.

use std::path::Path;

use super::{Mind, MindConfig};
use crate::error::{MindError, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MNDC";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_CONFIG: &str = "meta.config";
const META_STEP: &str = "meta.step";

fn format_err(msg: impl Into<String>) -> MindError {
    MindError::Format(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| format_err(format!("tensor name too long: {name}")))?;
    out.extend(len.to_le_bytes());
    out.extend(name.as_bytes());
    let rank = u8::try_from(t.rank()).map_err(|_| format_err(format!("rank too large for {name}")))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err(format!("dimension too large for {name}")))?;
        out.extend(d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend((v as f32).to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(mind: &Mind) -> Result<Vec<u8>> {
    let text = mind.config.to_text();
    let config = Tensor::new(&[text.len()], text.bytes().map(f64::from).collect())?;
    // f32 holds integers exactly up to 2^24
    let step = Tensor::scalar(mind.step.min(1 << 24) as f64);
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(((mind.params.len() + 2) as u32).to_le_bytes());
    put_tensor(&mut out, META_CONFIG, &config)?;
    put_tensor(&mut out, META_STEP, &step)?;
    for (_, name, t) in mind.params.iter() {
        put_tensor(&mut out, name, t)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Rebuilds the model from checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mind> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    let (mut config, mut step) = (None, None);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format_err("tensor name is not UTF-8"))?.to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| format_err(format!("tensor {name} too large")))?;
        let data = r.take(payload)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format_err(e.to_string()))?;
        match name.as_str() {
            META_CONFIG => {
                let text: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
                let text = String::from_utf8(text).map_err(|_| format_err("config echo is not UTF-8"))?;
                config = Some(MindConfig::from_text(&text).map_err(|e| format_err(format!("config echo: {e}")))?);
            }
            META_STEP => step = Some(t.data().first().copied().unwrap_or(0.0) as u64),
            _ => {
                store.add(name, t).map_err(|e| format_err(e.to_string()))?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    let config = config.ok_or_else(|| format_err("checkpoint has no config echo"))?;
    let mut mind = Mind::new(config)?;
    mind.params.load_from(&store).map_err(|e| format_err(e.to_string()))?;
    mind.step = step.unwrap_or(0);
    Ok(mind)
}

pub fn save_checkpoint(mind: &Mind, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(mind)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mind> {
    decode_checkpoint(&std::fs::read(path)?)
}
