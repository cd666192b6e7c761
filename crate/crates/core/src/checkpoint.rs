//! Single-file model checkpoints.
//!
//! Layout: 4-byte magic `CDVK`, `u32` format version, `u64` header length, a
//! JSON header (config, window geometry, normalization, tensor index), then
//! every tensor as little-endian `f64` in index order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelShape};
use crate::nn::Snapshot;
use crate::train::{ExperimentConfig, TrainedModel};

const MAGIC: &[u8; 4] = b"CDVK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ExperimentConfig,
    shape: ModelShape,
    with_energy: bool,
    norm: Option<NormStats>,
    target_dims: Vec<usize>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(trained: &TrainedModel) -> Result<Vec<u8>> {
    let snap = trained.model.store.snapshot()?;
    let header = Header {
        config: trained.config.clone(),
        shape: trained.shape(),
        with_energy: trained.model.energy.is_some(),
        norm: trained.norm.clone(),
        target_dims: trained.target_dims.clone(),
        tensors: snap
            .iter()
            .map(|(name, (shape, _))| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * trained.model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, data) in snap.values() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames it into place.
pub fn save(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(trained)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut buf, 8, "header length")?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(&mut buf, len as usize, "header")?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let mut snap = Snapshot::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut buf, 8 * n, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        snap.insert(entry.name.clone(), (entry.shape.clone(), data));
    }
    if !buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len())));
    }

    let model = ForecastModel::new(
        &header.config.model,
        header.shape,
        header.with_energy,
        header.config.seed,
    )
    .and_then(|m| m.with_target_dims(header.target_dims.clone()))
    .map_err(|e| Error::Checkpoint(format!("cannot rebuild model: {e}")))?;
    model.store.restore(&snap)?;
    Ok(TrainedModel {
        model,
        config: header.config,
        norm: header.norm,
        target_dims: header.target_dims,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Loads and checks that the stored architecture and data geometry agree with `expected`.
pub fn load_expecting(path: impl AsRef<Path>, expected: &ExperimentConfig) -> Result<TrainedModel> {
    let trained = load(path)?;
    let got = &trained.config;
    let mut diffs = Vec::new();
    if got.model != expected.model {
        diffs.push("model");
    }
    if got.window != expected.window {
        diffs.push("window");
    }
    if got.schedule != expected.schedule {
        diffs.push("schedule");
    }
    if got.ablation.use_dsm != expected.ablation.use_dsm {
        diffs.push("ablation.use_dsm");
    }
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint config differs in: {}",
            diffs.join(", ")
        )));
    }
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::EnergyConfig;
    use crate::model::ModelConfig;

    fn trained() -> TrainedModel {
        let config = ExperimentConfig {
            model: ModelConfig {
                level: crate::model::LevelMode::WindowMean,
                embed_dim: 4,
                rnn_hidden: 4,
                rnn_layers: 1,
                hidden: 8,
                blocks: 2,
                factors: 2,
                energy: EnergyConfig {
                    hidden: 8,
                    ..EnergyConfig::default()
                },
            },
            ..ExperimentConfig::default()
        };
        let shape = ModelShape {
            l_x: 8,
            l_y: 8,
            in_dims: 3,
            out_dims: 1,
        };
        TrainedModel {
            model: ForecastModel::new(&config.model, shape, true, 9)
                .unwrap()
                .with_target_dims(vec![2])
                .unwrap(),
            config,
            norm: Some(NormStats {
                mean: vec![0.5, 1.0, -2.0],
                scale: vec![1.0, 2.0, 3.0],
            }),
            target_dims: vec![2],
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let t = trained();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        save(&t, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.model.store.snapshot().unwrap(), t.model.store.snapshot().unwrap());
        assert_eq!(back.norm, t.norm);
        assert_eq!(back.config, t.config);
        assert_eq!(to_bytes(&back).unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let t = trained();
        let bytes = to_bytes(&t).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        save(&t, &p).unwrap();
        assert!(load_expecting(&p, &t.config).is_ok());
        let mut other = t.config.clone();
        other.model.factors = 3;
        let err = load_expecting(&p, &other).unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
    }
}
