//! Parameter, compression and MAC accounting, plus accuracy metrics.
//!
//! MAC convention: one multiply plus one add; bias adds, pooling and
//! activations are not counted. Factorized conv layers pay for rebuilding
//! the filter (`r·SC·L1L2`) on top of the convolution itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::LayerSpec;
use crate::model::{propagate_shapes, ActShape, InputShape, Model};
use crate::tensor::Tensor;

fn weighted_dims(spec: &LayerSpec) -> Result<(usize, usize)> {
    spec.matrix_dims()
        .ok_or_else(|| Error::Usage(format!("{spec:?} has no weights")))
}

/// `(P_dense, P_fact)` at rank `r`, biases excluded.
pub fn param_counts(spec: &LayerSpec, r: usize) -> Result<(usize, usize)> {
    let (h, w) = weighted_dims(spec)?;
    if r == 0 || r > h.min(w) {
        return Err(Error::Usage(format!("rank {r} outside 1..={}", h.min(w))));
    }
    Ok((h * w, r * (h + w + 1)))
}

/// `1 − P_fact / P_dense`; negative when the factors outweigh the dense parameter.
pub fn compression_rate(spec: &LayerSpec, r: usize) -> Result<f64> {
    let (dense, fact) = param_counts(spec, r)?;
    Ok(1.0 - fact as f64 / dense as f64)
}

/// Largest real rank at which factorization still does not add parameters: `hw / (h + w + 1)`.
pub fn break_even_rank(spec: &LayerSpec) -> Result<f64> {
    let (h, w) = weighted_dims(spec)?;
    Ok((h * w) as f64 / (h + w + 1) as f64)
}

fn bias_len(spec: &LayerSpec) -> usize {
    match spec {
        LayerSpec::Conv { shape, .. } => shape.out_channels,
        LayerSpec::Fc { shape, .. } => shape.out_features,
        _ => 0,
    }
}

/// MACs of one layer for a single input, given its incoming activation and (for factorized layers) rank.
pub fn layer_macs(spec: &LayerSpec, input: ActShape, rank: Option<usize>) -> Result<u64> {
    Ok(match (spec, input) {
        (LayerSpec::Conv { shape, .. }, ActShape::Spatial { h, w, .. }) => {
            let oh = crate::tensor::conv_output_extent(h, shape.kernel_height, shape.padding, shape.stride);
            let ow = crate::tensor::conv_output_extent(w, shape.kernel_width, shape.padding, shape.stride);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::Config(format!("unresolvable conv output for {h}x{w} input")));
            };
            let filter = (shape.h() * shape.w()) as u64;
            let conv = filter * (oh * ow) as u64;
            conv + rank.map_or(0, |r| r as u64 * filter)
        }
        (LayerSpec::Fc { shape, .. }, _) => match rank {
            Some(r) => (r * (shape.in_features + shape.out_features)) as u64,
            None => (shape.in_features * shape.out_features) as u64,
        },
        (LayerSpec::AvgPool { .. } | LayerSpec::GlobalAvgPool, _) => 0,
        (spec, act) => {
            return Err(Error::Config(format!("cannot place {spec:?} after {act:?}")));
        }
    })
}

/// Per-layer accounting row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccount {
    pub layer: usize,
    pub kind: String,
    pub factorized: bool,
    pub h: usize,
    pub w: usize,
    /// Current rank (factorized) or `min(h, w)` for dense layers.
    pub rank: usize,
    pub p_dense: usize,
    /// Stored weight scalars: `r(h+w+1)` for factorized layers, `hw` for dense ones.
    pub p_actual: usize,
    pub bias: usize,
    pub compression: f64,
    pub macs: u64,
}

/// Whole-model accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccount {
    pub layers: Vec<LayerAccount>,
    /// Dense-equivalent trainable count, biases included.
    pub dense_params: usize,
    /// Stored trainable count, biases included.
    pub trainable_params: usize,
    /// `1 − trainable / dense`.
    pub compression: f64,
    pub macs: u64,
}

fn account_layout(input: InputShape, specs: &[LayerSpec], ranks: &[Option<usize>]) -> Result<ModelAccount> {
    let acts = propagate_shapes(input, specs)?;
    let mut layers = Vec::new();
    let mut macs = 0;
    for (i, spec) in specs.iter().enumerate() {
        let m = layer_macs(spec, acts[i], ranks[i])?;
        macs += m;
        let Some((h, w)) = spec.matrix_dims() else { continue };
        let (p_dense, p_actual, rank) = match ranks[i] {
            Some(r) => {
                let (d, f) = param_counts(spec, r)?;
                (d, f, r)
            }
            None => (h * w, h * w, h.min(w)),
        };
        layers.push(LayerAccount {
            layer: i,
            kind: match spec {
                LayerSpec::Conv { .. } => "conv".into(),
                _ => "fc".into(),
            },
            factorized: ranks[i].is_some(),
            h,
            w,
            rank,
            p_dense,
            p_actual,
            bias: bias_len(spec),
            compression: 1.0 - p_actual as f64 / p_dense as f64,
            macs: m,
        });
    }
    let dense_params = layers.iter().map(|l| l.p_dense + l.bias).sum();
    let trainable_params = layers.iter().map(|l| l.p_actual + l.bias).sum();
    Ok(ModelAccount {
        compression: 1.0 - trainable_params as f64 / dense_params as f64,
        layers,
        dense_params,
        trainable_params,
        macs,
    })
}

/// Accounting of a live model at its current ranks.
pub fn model_account(model: &Model) -> Result<ModelAccount> {
    let ranks: Vec<Option<usize>> = model
        .layers
        .iter()
        .map(|l| l.factors().map(|p| p.rank()))
        .collect();
    account_layout(model.input, &model.specs(), &ranks)
}

/// Accounting of an architecture description, factorized layers at full rank.
pub fn layout_account(input: InputShape, specs: &[LayerSpec]) -> Result<ModelAccount> {
    let ranks: Vec<Option<usize>> = specs
        .iter()
        .map(|s| {
            if s.is_factorized() {
                s.matrix_dims().map(|(h, w)| h.min(w))
            } else {
                None
            }
        })
        .collect();
    account_layout(input, specs, &ranks)
}

/// Total MACs of a model for a single input.
pub fn mac_count(model: &Model) -> Result<u64> {
    Ok(model_account(model)?.macs)
}

/// Fraction of rows whose label is among the `k` largest logits; ties go to the lower class index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (b, nc) = logits.matrix_dims("topk_accuracy")?;
    if labels.len() != b {
        return Err(Error::shape("topk_accuracy", logits.shape(), &[labels.len()]));
    }
    if k == 0 || k > nc {
        return Err(Error::Usage(format!("k = {k} outside 1..={nc}")));
    }
    let mut hits = 0usize;
    for (row, &y) in logits.data().chunks(nc).zip(labels) {
        if y >= nc {
            return Err(Error::Input(format!("label {y} out of range for {nc} classes")));
        }
        let target = row[y];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// Rescales an accuracy reported against another baseline onto ours.
pub fn scaled_accuracy(a_source: f64, a_base_source: f64, a_base_ours: f64) -> Result<f64> {
    if a_base_source == 0.0 {
        return Err(Error::Input("source baseline accuracy must be non-zero".into()));
    }
    Ok(a_source * (a_base_ours / a_base_source))
}
