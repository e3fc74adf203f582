//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FNDRCKPT"                       8 bytes
//! format version                   u32
//! model config                     u32 length + JSON
//! blob count                       u32
//! per blob: name                   u32 length + UTF-8
//!           rank                   u32
//!           dims                   u64 × rank
//!           values                 f32 × product(dims)
//! checksum                         u64, CRC-64/XZ of all preceding bytes
//! ```
//!
//! Blobs are the trainable parameters in layout order followed by the
//! `<layer>.running_mean` / `<layer>.running_var` statistics of each
//! batch-norm layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::binfmt::{unframe, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::nn::{Model, ModelConfig};
use crate::tensor::{BatchNormState, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FNDRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

fn write_blob(w: &mut Writer, name: &str, t: &Tensor<f32>) {
    w.str(name);
    w.u32(t.rank() as u32);
    for &d in t.shape() {
        w.u64(d as u64);
    }
    w.f32s(t.data().iter().copied());
}

pub fn to_bytes<T: Element>(model: &Model<T>) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config = serde_json::to_vec(model.config()).expect("model config serializes");
    w.u32(config.len() as u32);
    w.bytes(&config);
    let states = model.batchnorm_states();
    w.u32((model.parameters().len() + 2 * states.len()) as u32);
    for (name, t) in model.parameters() {
        write_blob(&mut w, name, &t.cast());
    }
    for (name, st) in states {
        write_blob(&mut w, &format!("{name}{MEAN_SUFFIX}"), &st.running_mean.cast());
        write_blob(&mut w, &format!("{name}{VAR_SUFFIX}"), &st.running_var.cast());
    }
    w.finish()
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let body = unframe(bytes, CHECKPOINT_MAGIC)?;
    let mut r = Reader::new(body);
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        }
        .into());
    }
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| FormatError::Malformed(format!("model config: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()?;
        if rank > 8 {
            return Err(FormatError::Malformed(format!("blob {name:?} has rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = r.u64()?;
            shape.push(usize::try_from(d).map_err(|_| FormatError::Malformed(format!("dimension {d} too large")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| FormatError::Malformed(format!("blob {name:?} size overflows")))?;
        let data: Vec<T> = r.f32s(numel)?.into_iter().map(|v| T::lit(v as f64)).collect();
        let tensor = Tensor::new(shape, data)?;
        if let Some(layer) = name.strip_suffix(MEAN_SUFFIX) {
            means.insert(layer.to_string(), tensor);
        } else if let Some(layer) = name.strip_suffix(VAR_SUFFIX) {
            vars.insert(layer.to_string(), tensor);
        } else {
            params.push((name, tensor));
        }
    }
    r.expect_end()?;
    if means.len() != vars.len() {
        return Err(Error::Integrity("unpaired batch-norm statistics in checkpoint".into()));
    }
    let mut states = BTreeMap::new();
    for (layer, running_mean) in means {
        let running_var = vars
            .remove(&layer)
            .ok_or_else(|| Error::Integrity(format!("missing running variance for {layer:?}")))?;
        let mut st = BatchNormState::new(running_mean.len());
        st.running_mean = running_mean;
        st.running_var = running_var;
        states.insert(layer, st);
    }
    Model::from_parts(&config, params, states)
}

pub fn save<T: Element>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; the model comes back in eval mode.
pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
