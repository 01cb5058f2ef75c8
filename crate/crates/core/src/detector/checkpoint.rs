//! Checkpoint container.
//!
//! ```text
//! "PDET1\n"
//! u32 spec_len, spec (JSON, UTF-8)
//! u64 step
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u32 dims[ndim], f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::model::{ModelSpec, ModelState};
use super::nn::{Param, ParamMap};
use super::DetectorError;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PDET1\n";

fn fmt_err(m: impl Into<String>) -> DetectorError {
    DetectorError::Checkpoint(m.into())
}

pub fn write_checkpoint(model: &ModelState, mut w: impl Write) -> Result<(), DetectorError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let spec = serde_json::to_vec(&model.spec).map_err(|e| fmt_err(e.to_string()))?;
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    buf.extend_from_slice(&model.step.to_le_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, p) in &model.params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DetectorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, DetectorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DetectorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ModelState, DetectorError> {
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(fmt_err("not a PDET1 checkpoint"));
    }
    let spec_len = c.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(c.take(spec_len)?).map_err(|e| fmt_err(format!("spec: {e}")))?;
    spec.validate()?;
    let step = c.u64()?;
    let count = c.u32()? as usize;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| fmt_err("parameter name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Param { shape, data });
    }
    if c.pos != data.len() {
        return Err(fmt_err("trailing bytes after last tensor"));
    }
    let expected = spec.parameter_layout();
    if expected.len() != params.len()
        || expected
            .iter()
            .any(|(name, shape)| params.get(name).map(|p| &p.shape) != Some(shape))
    {
        return Err(fmt_err("parameters do not match the stored spec"));
    }
    Ok(ModelState { spec, params, step })
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<(), DetectorError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState, DetectorError> {
    read_checkpoint(fs::File::open(path)?)
}
