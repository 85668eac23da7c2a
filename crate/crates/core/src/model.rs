//! Feed-forward CNN assembled from [`LayerSpec`]s.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    draw_dense, forward_conv, forward_fc, init_factorized, ConvShape, FactorVars, FactorizedParam, FcShape,
    LayerSpec,
};
use crate::tensor::{conv_output_extent, Precision, Tensor};

/// Per-sample input geometry `C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Activation geometry between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Walks an architecture, returning the activation shape entering each layer plus the final one.
pub fn propagate_shapes(input: InputShape, specs: &[LayerSpec]) -> Result<Vec<ActShape>> {
    let mut cur = ActShape::Spatial {
        c: input.channels,
        h: input.height,
        w: input.width,
    };
    let mut out = vec![cur];
    for (i, spec) in specs.iter().enumerate() {
        cur = match (spec, cur) {
            (LayerSpec::Conv { shape, .. }, ActShape::Spatial { c, h, w }) => {
                shape.validate()?;
                if c != shape.in_channels {
                    return Err(Error::Config(format!(
                        "layer {i}: conv expects {} input channels, got {c}",
                        shape.in_channels
                    )));
                }
                let oh = conv_output_extent(h, shape.kernel_height, shape.padding, shape.stride);
                let ow = conv_output_extent(w, shape.kernel_width, shape.padding, shape.stride);
                match (oh, ow) {
                    (Some(h), Some(w)) => ActShape::Spatial {
                        c: shape.out_channels,
                        h,
                        w,
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "layer {i}: conv output extent for {h}x{w} input is not a positive integer"
                        )))
                    }
                }
            }
            (LayerSpec::Fc { shape, .. }, act) => {
                shape.validate()?;
                let d = match act {
                    ActShape::Spatial { c, h, w } => c * h * w,
                    ActShape::Flat(d) => d,
                };
                if d != shape.in_features {
                    return Err(Error::Config(format!(
                        "layer {i}: fc expects {} features, got {d}",
                        shape.in_features
                    )));
                }
                ActShape::Flat(shape.out_features)
            }
            (LayerSpec::AvgPool { size }, ActShape::Spatial { c, h, w }) => {
                if *size == 0 || h % size != 0 || w % size != 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: pool window {size} does not tile {h}x{w}"
                    )));
                }
                ActShape::Spatial {
                    c,
                    h: h / size,
                    w: w / size,
                }
            }
            (LayerSpec::GlobalAvgPool, ActShape::Spatial { c, .. }) => ActShape::Flat(c),
            (spec, act) => {
                return Err(Error::Config(format!(
                    "layer {i}: {spec:?} cannot follow activation {act:?}"
                )))
            }
        };
        out.push(cur);
    }
    Ok(out)
}

/// The reference desk-scale network: three 3×3 conv blocks and a classifier, all factorized.
pub fn desk_architecture(in_channels: usize, num_classes: usize) -> Vec<LayerSpec> {
    let conv = |c_in, c_out| LayerSpec::Conv {
        shape: ConvShape::square(c_out, c_in, 3, 1, 1),
        factorized: true,
        relu: true,
    };
    vec![
        conv(in_channels, 8),
        LayerSpec::AvgPool { size: 2 },
        conv(8, 16),
        LayerSpec::AvgPool { size: 2 },
        conv(16, 32),
        LayerSpec::GlobalAvgPool,
        LayerSpec::Fc {
            shape: FcShape {
                in_features: 32,
                out_features: num_classes,
            },
            factorized: true,
            relu: false,
        },
    ]
}

/// ResNet-20 (CIFAR variant) conv/FC layout, for complexity analysis only.
/// Identity shortcuts carry no weights, so the plain layer chain has the same MAC count.
/// Each 3×3 stride-2 downsampling conv is written as a 2×2 average pool followed by a
/// stride-1 conv: same output extent and MACs, without a fractional output size.
pub fn resnet20_layout(num_classes: usize) -> Vec<LayerSpec> {
    let conv = |c_in, c_out| LayerSpec::Conv {
        shape: ConvShape::square(c_out, c_in, 3, 1, 1),
        factorized: false,
        relu: true,
    };
    let mut layers = vec![conv(3, 16)];
    let mut c_in = 16;
    for (stage, width) in [16, 32, 64].into_iter().enumerate() {
        for block in 0..3 {
            if stage > 0 && block == 0 {
                layers.push(LayerSpec::AvgPool { size: 2 });
            }
            layers.push(conv(c_in, width));
            layers.push(conv(width, width));
            c_in = width;
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::Fc {
        shape: FcShape {
            in_features: 64,
            out_features: num_classes,
        },
        factorized: false,
        relu: false,
    });
    layers
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Factorized(FactorizedParam),
    /// Conv filter `S×C×L2×L1` or FC matrix `D2×D1`, plus bias.
    Dense { weight: Tensor, bias: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Option<Weights>,
}

impl Layer {
    pub fn factors(&self) -> Option<&FactorizedParam> {
        match &self.weights {
            Some(Weights::Factorized(p)) => Some(p),
            _ => None,
        }
    }

    pub fn factors_mut(&mut self) -> Option<&mut FactorizedParam> {
        match &mut self.weights {
            Some(Weights::Factorized(p)) => Some(p),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    U,
    Sigma,
    V,
    Bias,
    Weight,
}

impl ParamKind {
    fn as_str(self) -> &'static str {
        match self {
            ParamKind::U => "u",
            ParamKind::Sigma => "sigma",
            ParamKind::V => "v",
            ParamKind::Bias => "bias",
            ParamKind::Weight => "weight",
        }
    }
}

/// Identifies one trainable tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.as_str())
    }
}

impl std::str::FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("bad parameter name `{s}`"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (idx, kind) = rest.split_once('.').ok_or_else(bad)?;
        let layer = idx.parse().map_err(|_| bad())?;
        let kind = match kind {
            "u" => ParamKind::U,
            "sigma" => ParamKind::Sigma,
            "v" => ParamKind::V,
            "bias" => ParamKind::Bias,
            "weight" => ParamKind::Weight,
            _ => return Err(bad()),
        };
        Ok(ParamId { layer, kind })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub bindings: Vec<(ParamId, Var)>,
    /// Factor handles of every factorized layer, in layer order.
    pub factors: Vec<FactorVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

impl Model {
    /// Draws every weighted layer; factorized layers start at full rank.
    pub fn init<R: Rng + ?Sized>(
        input: InputShape,
        specs: &[LayerSpec],
        rng: &mut R,
        precision: Precision,
    ) -> Result<Self> {
        propagate_shapes(input, specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let weights = match spec {
                LayerSpec::Conv { factorized: true, .. } | LayerSpec::Fc { factorized: true, .. } => {
                    Some(Weights::Factorized(init_factorized(spec, rng, precision)?))
                }
                LayerSpec::Conv { shape, .. } => {
                    let mut weight = draw_dense(spec, rng)?;
                    precision.round_slice(weight.data_mut());
                    Some(Weights::Dense {
                        weight,
                        bias: Tensor::zeros([shape.out_channels]),
                    })
                }
                LayerSpec::Fc { shape, .. } => {
                    let mut weight = draw_dense(spec, rng)?;
                    precision.round_slice(weight.data_mut());
                    Some(Weights::Dense {
                        weight,
                        bias: Tensor::zeros([shape.out_features]),
                    })
                }
                _ => None,
            };
            layers.push(Layer { spec: *spec, weights });
        }
        Ok(Model { input, layers })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn num_classes(&self) -> Result<usize> {
        match propagate_shapes(self.input, &self.specs())?.last() {
            Some(ActShape::Flat(n)) => Ok(*n),
            other => Err(Error::Config(format!("model output is not flat: {other:?}"))),
        }
    }

    /// Indices of factorized layers, in order.
    pub fn factorized_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.factors().is_some())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn factors(&self) -> impl Iterator<Item = &FactorizedParam> {
        self.layers.iter().filter_map(Layer::factors)
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            let id = |kind| ParamId { layer, kind };
            match &l.weights {
                Some(Weights::Factorized(p)) => {
                    out.push((id(ParamKind::U), &p.u));
                    out.push((id(ParamKind::Sigma), &p.sigma));
                    out.push((id(ParamKind::V), &p.v));
                    if let Some(b) = &p.bias {
                        out.push((id(ParamKind::Bias), b));
                    }
                }
                Some(Weights::Dense { weight, bias }) => {
                    out.push((id(ParamKind::Weight), weight));
                    out.push((id(ParamKind::Bias), bias));
                }
                None => {}
            }
        }
        out
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match (self.layers.get_mut(id.layer)?.weights.as_mut()?, id.kind) {
            (Weights::Factorized(p), ParamKind::U) => Some(&mut p.u),
            (Weights::Factorized(p), ParamKind::Sigma) => Some(&mut p.sigma),
            (Weights::Factorized(p), ParamKind::V) => Some(&mut p.v),
            (Weights::Factorized(p), ParamKind::Bias) => p.bias.as_mut(),
            (Weights::Dense { weight, .. }, ParamKind::Weight) => Some(weight),
            (Weights::Dense { bias, .. }, ParamKind::Bias) => Some(bias),
            _ => None,
        }
    }

    /// Number of stored trainable scalars, counted tensor by tensor.
    pub fn trainable_param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Current rank of every factorized layer.
    pub fn ranks(&self) -> Vec<usize> {
        self.factors().map(FactorizedParam::rank).collect()
    }

    /// Records all parameters on `g` and runs the network on the `N×C×H×W` batch `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ForwardPass> {
        let mut bindings = Vec::new();
        let mut factors = Vec::new();
        let mut h = x;
        for (layer, l) in self.layers.iter().enumerate() {
            let id = |kind| ParamId { layer, kind };
            h = match (&l.spec, &l.weights) {
                (LayerSpec::Conv { shape, .. }, Some(Weights::Factorized(p))) => {
                    let vars = p.bind(g);
                    push_factor_bindings(&mut bindings, layer, vars);
                    factors.push(vars);
                    forward_conv(g, vars, shape, h)?
                }
                (LayerSpec::Fc { .. }, Some(Weights::Factorized(p))) => {
                    let vars = p.bind(g);
                    push_factor_bindings(&mut bindings, layer, vars);
                    factors.push(vars);
                    let h = flatten(g, h)?;
                    forward_fc(g, vars, h)?
                }
                (LayerSpec::Conv { shape, .. }, Some(Weights::Dense { weight, bias })) => {
                    let k = g.param(weight.clone());
                    let b = g.param(bias.clone());
                    bindings.push((id(ParamKind::Weight), k));
                    bindings.push((id(ParamKind::Bias), b));
                    let y = g.conv2d(h, k, shape.padding, shape.stride)?;
                    g.add_channel_bias(y, b)?
                }
                (LayerSpec::Fc { .. }, Some(Weights::Dense { weight, bias })) => {
                    let w = g.param(weight.clone());
                    let b = g.param(bias.clone());
                    bindings.push((id(ParamKind::Weight), w));
                    bindings.push((id(ParamKind::Bias), b));
                    let h = flatten(g, h)?;
                    let wt = g.transpose(w)?;
                    let y = g.matmul(h, wt)?;
                    g.add_row_bias(y, b)?
                }
                (LayerSpec::AvgPool { size }, None) => g.avg_pool(h, *size)?,
                (LayerSpec::GlobalAvgPool, None) => g.global_avg_pool(h)?,
                (spec, _) => {
                    return Err(Error::Config(format!(
                        "layer {layer}: weights do not match spec {spec:?}"
                    )))
                }
            };
            if l.spec.relu() {
                h = g.relu(h);
            }
        }
        Ok(ForwardPass {
            logits: h,
            bindings,
            factors,
        })
    }

    /// Logits for a batch of images, evaluated in chunks without keeping the tape.
    pub fn predict(&self, images: &Tensor, precision: Precision, chunk: usize) -> Result<Tensor> {
        let [n, c, hh, ww] = *images.shape() else {
            return Err(Error::Input(format!(
                "expected an N×C×H×W batch, got {:?}",
                images.shape()
            )));
        };
        if (c, hh, ww) != (self.input.channels, self.input.height, self.input.width) {
            return Err(Error::Input(format!(
                "images are {c}×{hh}×{ww} but the model expects {}×{}×{}",
                self.input.channels, self.input.height, self.input.width
            )));
        }
        let per = c * hh * ww;
        let mut out = Vec::new();
        let mut classes = 0;
        for start in (0..n).step_by(chunk.max(1)) {
            let len = chunk.max(1).min(n - start);
            let batch = Tensor::from_parts(
                vec![len, c, hh, ww],
                images.data()[start * per..(start + len) * per].to_vec(),
            );
            let mut g = Graph::new(precision);
            let x = g.constant(batch);
            let fwd = self.forward(&mut g, x)?;
            g.check_finite()?;
            let logits = g.value(fwd.logits);
            classes = logits.shape()[1];
            out.extend_from_slice(logits.data());
        }
        Tensor::new([n, classes], out)
    }
}

fn push_factor_bindings(bindings: &mut Vec<(ParamId, Var)>, layer: usize, vars: FactorVars) {
    let id = |kind| ParamId { layer, kind };
    bindings.push((id(ParamKind::U), vars.u));
    bindings.push((id(ParamKind::Sigma), vars.sigma));
    bindings.push((id(ParamKind::V), vars.v));
    if let Some(b) = vars.bias {
        bindings.push((id(ParamKind::Bias), b));
    }
}

fn flatten(g: &mut Graph, h: Var) -> Result<Var> {
    let shape = g.value(h).shape().to_vec();
    if shape.len() == 2 {
        return Ok(h);
    }
    let n = shape[0];
    let d = shape[1..].iter().product::<usize>();
    g.reshape(h, &[n, d])
}
