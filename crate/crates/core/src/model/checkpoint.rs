//! Single-file checkpoint archive.
//!
//! Layout:
//!
//! ```text
//! b"HANETCK1"                    8-byte magic
//! u64 little endian              length of the JSON header in bytes
//! JSON header                    config, epoch, validation F1, tensor index
//! f64 little endian payload      tensors back to back, in index order
//! ```
//!
//! Each index entry carries the tensor's hierarchical name, dtype and shape.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{HaNet, HaNetConfig};
use crate::error::{Error, Result};
use crate::nn::Module;

const MAGIC: &[u8; 8] = b"HANETCK1";
const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: HaNetConfig,
    epoch: usize,
    val_f1: Option<f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: HaNetConfig,
    pub epoch: usize,
    pub val_f1: Option<f64>,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn from_model(model: &HaNet, epoch: usize, val_f1: Option<f64>) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        Self { config: model.config.clone(), epoch, val_f1, tensors }
    }

    /// Rebuilds the network described by the stored config and loads every tensor.
    pub fn to_model(&self) -> Result<HaNet> {
        let mut model = HaNet::new(self.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut HaNet) -> Result<()> {
        if model.config != self.config {
            return Err(Error::Checkpoint("model config differs from the checkpoint config".into()));
        }
        let mut missing = Vec::new();
        let mut seen = 0;
        model.visit_mut("", &mut |name, p| match self.tensors.get(name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value.assign(t);
                seen += 1;
            }
            Some(t) => missing.push(format!("{name}: shape {:?} vs {:?}", t.shape(), p.value.shape())),
            None => missing.push(format!("{name}: absent")),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("incompatible tensors: {}", missing.join(", "))));
        }
        if seen != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model uses {seen}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            val_f1: self.val_f1,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), dtype: DTYPE.into(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec_pretty(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.tensors.values() {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint archive (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = BTreeMap::new();
        let mut buf = [0u8; 8];
        for entry in header.tensors {
            if entry.dtype != DTYPE {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
            tensors.insert(entry.name, t);
        }
        Ok(Self { config: header.config, epoch: header.epoch, val_f1: header.val_f1, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn roundtrip_reproduces_predictions() {
        let cfg = HaNetConfig::for_tile(16, [2, 2, 2, 4]);
        let mut net = HaNet::new(cfg, 5).unwrap();
        let ckpt = Checkpoint::from_model(&net, 3, Some(0.5));
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);

        let mut restored = back.to_model().unwrap();
        let x = Tensor::from_shape_fn((1, 3, 16, 16), |(_, c, i, j)| ((c + i + 2 * j) % 9) as f64 / 9.0);
        let y = x.mapv(|v| 1.0 - v);
        assert_eq!(net.forward(&x, &y, false).unwrap(), restored.forward(&x, &y, false).unwrap());
    }

    #[test]
    fn rejects_mismatched_model() {
        let net = HaNet::new(HaNetConfig::for_tile(16, [2, 2, 2, 4]), 0).unwrap();
        let ckpt = Checkpoint::from_model(&net, 0, None);
        let mut other = HaNet::new(HaNetConfig::for_tile(16, [2, 2, 4, 4]), 0).unwrap();
        assert!(ckpt.load_into(&mut other).is_err());
        assert!(Checkpoint::read_from(&b"NOTACKPT00000000"[..]).is_err());
    }
}
