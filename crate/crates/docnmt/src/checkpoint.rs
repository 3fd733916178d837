//! Checkpoint container: one binary file holding a versioned header, the
//! serialized model configuration, and every saved parameter as a named,
//! partition-tagged tensor of raw little-endian values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DocTransformer, ModelConfig};
use crate::params::{ParamStore, Partition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DOCNMTCK";
const VERSION: u32 = 1;

/// A parameter entry as stored on disk.
#[derive(Debug, Clone)]
pub struct RawEntry {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    /// Raw little-endian values in the file's dtype.
    pub bytes: Vec<u8>,
}

/// A checkpoint read back from disk, not yet applied to a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Element width of the stored values: 4 (f32) or 8 (f64).
    pub dtype: u8,
    pub entries: Vec<RawEntry>,
}

/// Write `store` parameters (optionally restricted to one partition) plus
/// the model configuration.
pub fn save<F: Scalar>(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore<F>,
    subset: Option<Partition>,
) -> Result<()> {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| subset.map_or(true, |p| store.partition(id) == p))
        .collect();
    let cfg_json = serde_json::to_vec(config)
        .map_err(|e| Error::Data(format!("config serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::WIDTH);
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(store.partition(id).tag());
        let t = store.value(id);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Read a checkpoint file without applying it.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Data(format!("unsupported element width {dtype}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Data(format!("bad checkpoint config: {e}")))?;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?;
        let partition = Partition::from_tag(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * dtype as usize)?.to_vec();
        entries.push(RawEntry {
            name,
            partition,
            shape,
            bytes,
        });
    }
    Ok(Checkpoint {
        config,
        dtype,
        entries,
    })
}

impl Checkpoint {
    /// Decode one entry into the requested element type, converting across
    /// precision when the widths differ.
    pub fn tensor<F: Scalar>(&self, entry: &RawEntry) -> Result<Tensor<F>> {
        let w = self.dtype as usize;
        let data: Vec<F> = match self.dtype {
            4 => entry
                .bytes
                .chunks_exact(w)
                .map(|c| F::from_f64(f32::read_le(c).to_f64()))
                .collect(),
            8 => entry
                .bytes
                .chunks_exact(w)
                .map(|c| F::from_f64(f64::read_le(c)))
                .collect(),
            other => return Err(Error::Data(format!("unsupported element width {other}"))),
        };
        Tensor::new(entry.shape.clone(), data)
    }

    /// Copy every stored entry into the model. Unknown names and shape
    /// mismatches are hard errors listing all offenders; returns the names
    /// of model parameters the checkpoint did not cover.
    pub fn apply<F: Scalar>(&self, model: &mut DocTransformer<F>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        let mut mismatched = Vec::new();
        let mut staged = Vec::new();
        for entry in &self.entries {
            match model.store().lookup(&entry.name) {
                None => unknown.push(entry.name.clone()),
                Some(id) => {
                    if model.store().value(id).shape() != entry.shape.as_slice() {
                        mismatched.push(format!(
                            "{} (checkpoint {:?} vs model {:?})",
                            entry.name,
                            entry.shape,
                            model.store().value(id).shape()
                        ));
                    } else {
                        staged.push((id, self.tensor::<F>(entry)?));
                    }
                }
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Data(format!(
                "checkpoint parameters unknown to this model: {}",
                unknown.join(", ")
            )));
        }
        if !mismatched.is_empty() {
            return Err(Error::Data(format!(
                "checkpoint shape mismatches: {}",
                mismatched.join("; ")
            )));
        }
        let mut covered = vec![false; model.store().len()];
        for (id, tensor) in staged {
            model.store_mut().set(id, tensor)?;
            covered[id.0] = true;
        }
        Ok(model
            .store()
            .ids()
            .filter(|id| !covered[id.0])
            .map(|id| model.store().name(id).to_string())
            .collect())
    }
}
