//! Binary checkpoint: model config plus a named parameter table.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DigitModel, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DGTC";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_bytes(model: &DigitModel<f32>) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(64 + 4 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len());
    for (_, name, t) in model.params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a checkpoint into its config and `(name, tensor)` table.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor<f32>)>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        table.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
    }
    Ok((config, table))
}

/// Copies a parameter table into `model`, naming the first parameter that disagrees.
pub fn load_params(model: &mut DigitModel<f32>, table: Vec<(String, Tensor<f32>)>) -> Result<()> {
    if table.len() != model.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            table.len(),
            model.params.len()
        )));
    }
    for (name, t) in table {
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} does not exist in the model")))?;
        if model.params.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "shape mismatch in layer {name}: checkpoint {:?} vs model {:?}",
                t.shape(),
                model.params.get(id).shape()
            )));
        }
        model.params.set(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &DigitModel<f32>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

/// Rebuilds the model from the stored config and fills its parameters.
pub fn load_checkpoint(path: &Path) -> Result<DigitModel<f32>> {
    let (config, table) = parse_checkpoint(&fs::read(path)?)?;
    let mut model = DigitModel::new(config, 0)?;
    load_params(&mut model, table)?;
    Ok(model)
}
