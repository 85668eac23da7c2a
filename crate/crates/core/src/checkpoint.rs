//! Checkpoints: `manifest.json` plus one little-endian parameter blob `params.bin`.
//!
//! Every tensor (model parameters, then momentum buffers named
//! `momentum.<param>`) occupies a contiguous byte range of the blob, listed in
//! the manifest. Blobs hold `f32` values for single-precision runs and `f64`
//! for double-precision ones, so a save/load cycle is exact either way.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::layers::{FactorizedParam, LayerSpec};
use crate::model::{InputShape, Layer, Model, ParamId, ParamKind, Weights};
use crate::regularization::LossConfig;
use crate::tensor::{Precision, Tensor};
use crate::training::{PlateauState, SgdConfig, SgdState, TrainState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const MOMENTUM_PREFIX: &str = "momentum.";

/// Run settings stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub precision: Precision,
    pub augment: bool,
    /// Standardization statistics of the training data.
    pub stats: Option<NormStats>,
    /// Free-form description of the data source.
    pub data: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha key.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Input(format!("malformed RNG state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length.
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub input: InputShape,
    pub architecture: Vec<LayerSpec>,
    /// Completed epochs.
    pub epoch: usize,
    /// Current rank of each factorized layer.
    pub ranks: Vec<usize>,
    /// Initial rank of each factorized layer.
    pub theta: Vec<usize>,
    /// Singular values of each factorized layer (also in the blob).
    pub sigma: Vec<Vec<f64>>,
    pub lr: f64,
    pub plateau: PlateauState,
    pub rng: RngState,
    pub meta: CheckpointMeta,
    pub blob: String,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_for(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// Writes `state` to directory `dir`, creating it if needed.
pub fn save(dir: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dtype = dtype_for(meta.precision);
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor| -> Result<()> {
        let offset = blob.len() as u64;
        for &v in t.data() {
            match dtype {
                DType::F32 => {
                    let f = v as f32;
                    if f as f64 != v {
                        return Err(Error::Numeric(format!("{name} holds a value not representable in f32")));
                    }
                    blob.extend_from_slice(&f.to_le_bytes());
                }
                DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
            }
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() as u64 - offset,
        });
        Ok(())
    };
    for (id, t) in state.model.params() {
        push(id.to_string(), t)?;
    }
    for (id, t) in &state.sgd.momentum {
        push(format!("{MOMENTUM_PREFIX}{id}"), t)?;
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        input: state.model.input,
        architecture: state.model.specs(),
        epoch: state.epoch,
        ranks: state.model.ranks(),
        theta: state.model.factors().map(|p| p.theta).collect(),
        sigma: state.model.factors().map(|p| p.sigma.data().to_vec()).collect(),
        lr: state.lr,
        plateau: state.plateau,
        rng: RngState::capture(&state.rng),
        meta: meta.clone(),
        blob: BLOB_FILE.into(),
        dtype,
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format { offset: 0, msg: format!("{MANIFEST_FILE}: {e}") })?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported checkpoint version {}", m.version),
        });
    }
    Ok(m)
}

fn decode(entry: &TensorEntry, blob: &[u8], dtype: DType) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let want = (n * dtype.width()) as u64;
    if entry.bytes != want {
        return Err(Error::Format {
            offset: entry.offset,
            msg: format!("{}: {} bytes for shape {:?}", entry.name, entry.bytes, entry.shape),
        });
    }
    let end = entry.offset.checked_add(entry.bytes).filter(|&e| e <= blob.len() as u64);
    let Some(end) = end else {
        return Err(Error::Format {
            offset: entry.offset,
            msg: format!("{}: range ends past the {}-byte blob", entry.name, blob.len()),
        });
    };
    let bytes = &blob[entry.offset as usize..end as usize];
    let data = match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data).map_err(|e| Error::Format {
        offset: entry.offset,
        msg: format!("{}: {e}", entry.name),
    })
}

/// Restores a training state and its run settings from `dir`.
pub fn load(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let m = read_manifest(dir)?;
    let blob = fs::read(dir.join(&m.blob))
        .map_err(|e| Error::Input(format!("{}: {e}", dir.join(&m.blob).display())))?;
    let mut params = std::collections::BTreeMap::new();
    let mut sgd = SgdState::default();
    for entry in &m.tensors {
        let t = decode(entry, &blob, m.dtype)?;
        if let Some(name) = entry.name.strip_prefix(MOMENTUM_PREFIX) {
            sgd.momentum.insert(name.parse::<ParamId>()?, t);
        } else {
            params.insert(entry.name.parse::<ParamId>()?, t);
        }
    }
    let missing = |id: ParamId| Error::Format {
        offset: 0,
        msg: format!("checkpoint lacks tensor {id}"),
    };
    let mut take = |layer, kind| {
        let id = ParamId { layer, kind };
        params.remove(&id).ok_or_else(|| missing(id))
    };
    let mut layers = Vec::with_capacity(m.architecture.len());
    let mut theta = m.theta.iter();
    for (i, spec) in m.architecture.iter().enumerate() {
        let weights = if spec.is_factorized() {
            let th = *theta.next().ok_or_else(|| Error::Format {
                offset: 0,
                msg: "theta list shorter than factorized layer count".into(),
            })?;
            let u = take(i, ParamKind::U)?;
            let sigma = take(i, ParamKind::Sigma)?;
            let v = take(i, ParamKind::V)?;
            let bias = take(i, ParamKind::Bias)?;
            Some(Weights::Factorized(FactorizedParam::from_parts(u, sigma, v, th, Some(bias))?))
        } else if spec.has_weights() {
            Some(Weights::Dense {
                weight: take(i, ParamKind::Weight)?,
                bias: take(i, ParamKind::Bias)?,
            })
        } else {
            None
        };
        layers.push(Layer { spec: *spec, weights });
    }
    if let Some(extra) = params.keys().next() {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unexpected tensor {extra}"),
        });
    }
    let model = Model {
        input: m.input,
        layers,
    };
    crate::model::propagate_shapes(model.input, &model.specs())?;
    if model.ranks() != m.ranks {
        return Err(Error::Format {
            offset: 0,
            msg: format!("manifest ranks {:?} disagree with stored factors {:?}", m.ranks, model.ranks()),
        });
    }
    let state = TrainState {
        model,
        sgd,
        plateau: m.plateau,
        lr: m.lr,
        epoch: m.epoch,
        rng: m.rng.restore()?,
    };
    Ok((state, m.meta))
}
