//! Checkpoint file: 8-byte magic, u64 little-endian manifest length, JSON
//! manifest, then every named f32 array in manifest order (little endian).
//!
//! Arrays are the model parameters in declaration order followed by the
//! first and second optimizer moments (`adam.m.*`, `adam.v.*`).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::train::{AdamW, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SPKCKPT1";
const FORMAT: &str = "despeckle-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer_step: u64,
    pub history: Vec<EpochRecord>,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: TrainState,
}

pub fn save(path: &Path, state: &TrainState, train: &TrainConfig) -> Result<()> {
    let decls = &state.params.arch.decls;
    let mut arrays: Vec<ArrayEntry> = decls
        .iter()
        .map(|d| ArrayEntry { name: d.name.clone(), shape: d.shape.clone() })
        .collect();
    for prefix in ["adam.m.", "adam.v."] {
        arrays.extend(decls.iter().map(|d| ArrayEntry {
            name: format!("{prefix}{}", d.name),
            shape: d.shape.clone(),
        }));
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: state.params.config.clone(),
        train: train.clone(),
        epoch: state.epoch,
        seed: state.seed,
        optimizer_step: state.optimizer.step,
        history: state.history.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&manifest)?;
    let n_values: usize = 3 * state.params.count();
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * n_values);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let groups = [&state.params.values, &state.optimizer.m, &state.optimizer.v];
    for v in groups.into_iter().flatten().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("ckpt.tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let body = buf.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad("unsupported checkpoint format or version"));
    }
    let mut payload = buf[16 + len..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let values: Vec<f32> = payload.by_ref().take(n).collect();
        if values.len() != n {
            return Err(bad("payload shorter than the manifest declares"));
        }
        arrays.push(values);
    }
    if payload.next().is_some() {
        return Err(bad("trailing data after the declared arrays"));
    }
    let k = arrays.len() / 3;
    if arrays.len() != 3 * k {
        return Err(bad("array count is not params + two moment sets"));
    }
    let v = arrays.split_off(2 * k);
    let m = arrays.split_off(k);
    let params = ModelParameters::from_values(manifest.model.clone(), arrays)?;
    for (entry, name) in manifest.arrays.iter().zip(params.names()) {
        if entry.name != name {
            return Err(bad(&format!("array {} does not match parameter {name}", entry.name)));
        }
    }
    let state = TrainState {
        params,
        optimizer: AdamW { m, v, step: manifest.optimizer_step },
        epoch: manifest.epoch,
        seed: manifest.seed,
        history: manifest.history.clone(),
    };
    Ok(Checkpoint { manifest, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut state = TrainState::new(&ModelConfig::with_widths([2, 3, 4, 5]), 17).unwrap();
        state.optimizer.m[0][0] = 0.125;
        state.optimizer.v[3][1] = f32::MIN_POSITIVE;
        state.optimizer.step = 9;
        state.epoch = 3;
        state.history.push(EpochRecord { epoch: 3, lr: 1e-3, agreement: 0.1, reconstruction: 0.2, total: 0.1 + 0.2 });
        save(&path, &state, &TrainConfig::default()).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.state.params.values, state.params.values);
        assert_eq!(back.state.optimizer, state.optimizer);
        assert_eq!(back.state.history, state.history);
        assert_eq!(back.state.epoch, 3);
        assert_eq!(back.manifest.seed, 17);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load(&path).is_err());
    }
}
