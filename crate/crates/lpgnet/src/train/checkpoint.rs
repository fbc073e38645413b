//! Versioned checkpoint container: a small JSON manifest followed by raw
//! little-endian f64 payloads. Round-trips are bitwise exact.

use crate::error::{LpgError, Result};
use crate::model::{LpgNet, ModelConfig, PATH_NAMES};
use crate::train::{EpochRecord, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LPGNETC1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: LpgNet,
    pub epoch: usize,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// offset into the payload, in f64 elements
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// All persisted arrays: learnable tensors plus batch-norm running stats.
    fn persisted(model: &LpgNet) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = model
            .params
            .entries(true)
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone(), t.data.clone()))
            .collect();
        for (i, p) in model.params.paths.iter().enumerate() {
            let n = PATH_NAMES[i];
            let d = p.bn_running_mean.len();
            out.push((format!("lpia.{n}.bn.running_mean"), vec![d], p.bn_running_mean.clone()));
            out.push((format!("lpia.{n}.bn.running_var"), vec![d], p.bn_running_var.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let arrays = Self::persisted(&self.model);
        let mut tensors = Vec::with_capacity(arrays.len());
        let mut offset = 0usize;
        for (name, shape, data) in &arrays {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let manifest = Manifest {
            version: 1,
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            tensors,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&manifest_bytes)?;
        for (_, _, data) in &arrays {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(LpgError::schema("not a checkpoint file (bad magic)".to_string()));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        r.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        if manifest.version != 1 {
            return Err(LpgError::schema(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
        if payload.len() != total * 8 {
            return Err(LpgError::schema(format!(
                "payload holds {} bytes, manifest expects {}",
                payload.len(),
                total * 8
            )));
        }
        let mut model = LpgNet::new(manifest.model_config.clone(), 0)?;
        for entry in &manifest.tensors {
            let data: Vec<f64> = payload[entry.offset * 8..(entry.offset + entry.len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(stat) = entry.name.strip_prefix("lpia.").and_then(|rest| {
                let (p, tail) = rest.split_once('.')?;
                let i = PATH_NAMES.iter().position(|n| *n == p)?;
                Some((i, tail))
            }) {
                let (i, tail) = stat;
                match tail {
                    "bn.running_mean" => {
                        model.params.paths[i].bn_running_mean = data;
                        continue;
                    }
                    "bn.running_var" => {
                        model.params.paths[i].bn_running_var = data;
                        continue;
                    }
                    _ => {}
                }
            }
            let t = model.params.entry_mut(&entry.name).ok_or_else(|| {
                LpgError::schema(format!("checkpoint names unknown tensor {}", entry.name))
            })?;
            if t.shape != entry.shape {
                return Err(LpgError::schema(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name, entry.shape, t.shape
                )));
            }
            t.data = data;
        }
        Ok(Checkpoint {
            model,
            epoch: manifest.epoch,
            train_config: manifest.train_config,
            history: manifest.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{SynthMode, SynthSpec};
    use crate::train::{train, TrainConfig};

    fn tiny_trained() -> Checkpoint {
        let spec = SynthSpec {
            f_t: 6,
            f_a: 6,
            train_dialogues: 8,
            val_dialogues: 4,
            test_dialogues: 4,
            min_len: 3,
            max_len: 5,
            mode: SynthMode::Both,
            ..SynthSpec::default()
        };
        let data = crate::data::synth::synth_generate(&spec, 3).unwrap();
        let config = TrainConfig {
            hidden: 8,
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::desk()
        };
        train(&config, &data).unwrap().checkpoint
    }

    #[test]
    fn save_load_round_trip_is_bitwise() {
        let ckpt = tiny_trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.epoch, ckpt.epoch);
        assert_eq!(loaded.history.len(), ckpt.history.len());
        for (a, b) in loaded.history.iter().zip(&ckpt.history) {
            assert_eq!(a.mean_train_loss.to_bits(), b.mean_train_loss.to_bits());
            assert_eq!(a.val_macro_f1.to_bits(), b.val_macro_f1.to_bits());
        }

        let before = ckpt.model.params.entries(true);
        let after = loaded.model.params.entries(true);
        assert_eq!(before.len(), after.len());
        for ((na, ta), (nb, tb)) in before.iter().zip(after.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            for (x, y) in ta.data.iter().zip(tb.data.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (pa, pb) in ckpt.model.params.paths.iter().zip(loaded.model.params.paths.iter()) {
            for (x, y) in pa.bn_running_mean.iter().zip(pb.bn_running_mean.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in pa.bn_running_var.iter().zip(pb.bn_running_var.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let ckpt = tiny_trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ckpt = tiny_trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
