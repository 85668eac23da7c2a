//! SVD-factorized convolutional and fully-connected layers.
//!
//! A conv filter `S×C×L2×L1` is matricized to `M ∈ R^{SC × L1L2}` (row
//! index `s·C + c`, column index `l2·L1 + l1`, zero-based), which for a
//! row-major filter is exactly a reshape. The trainable parameters are the
//! thin factors `U (h×r)`, `σ (r)`, `V (w×r)` with `M = U·diag(σ)·Vᵀ`.
//! FC weights `W (D2×D1)` are factorized the same way with `h = D2`, `w = D1`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::svd::svd;
use crate::tensor::{Precision, Tensor};

/// Convolution geometry (symmetric padding and stride).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvShape {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_width: usize,
    pub kernel_height: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl ConvShape {
    /// Square kernel of size `l`.
    pub fn square(out_channels: usize, in_channels: usize, l: usize, padding: usize, stride: usize) -> Self {
        ConvShape {
            out_channels,
            in_channels,
            kernel_width: l,
            kernel_height: l,
            padding,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.in_channels == 0
            || self.kernel_width == 0
            || self.kernel_height == 0
            || self.stride == 0
        {
            return Err(Error::Config(format!("conv shape has a zero extent: {self:?}")));
        }
        Ok(())
    }

    /// Matricized row count `S·C`.
    pub fn h(&self) -> usize {
        self.out_channels * self.in_channels
    }

    /// Matricized column count `L1·L2`.
    pub fn w(&self) -> usize {
        self.kernel_width * self.kernel_height
    }

    pub fn filter_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_height,
            self.kernel_width,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.w()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcShape {
    pub in_features: usize,
    pub out_features: usize,
}

impl FcShape {
    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::Config(format!("fc shape has a zero extent: {self:?}")));
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        self.out_features
    }

    pub fn w(&self) -> usize {
        self.in_features
    }
}

/// One element of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        shape: ConvShape,
        factorized: bool,
        relu: bool,
    },
    Fc {
        shape: FcShape,
        factorized: bool,
        relu: bool,
    },
    /// Non-overlapping average pooling.
    AvgPool { size: usize },
    /// Spatial mean, `N×C×H×W → N×C`.
    GlobalAvgPool,
}

impl LayerSpec {
    pub fn is_factorized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { factorized: true, .. } | LayerSpec::Fc { factorized: true, .. }
        )
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    /// Matricized extents `(h, w)` for weighted layers.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv { shape, .. } => Some((shape.h(), shape.w())),
            LayerSpec::Fc { shape, .. } => Some((shape.h(), shape.w())),
            _ => None,
        }
    }

    pub fn relu(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { relu: true, .. } | LayerSpec::Fc { relu: true, .. }
        )
    }
}

/// Trainable SVD factors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedParam {
    /// `h×r` left factor.
    pub u: Tensor,
    /// Length-`r` singular values.
    pub sigma: Tensor,
    /// `w×r` right factor.
    pub v: Tensor,
    /// Rank at construction, `min(h, w)`.
    pub theta: usize,
    /// Optional length-`h_out` bias (output channels for conv, `D2` for FC); never factorized.
    pub bias: Option<Tensor>,
}

impl FactorizedParam {
    /// Builds factors from explicit parts, checking their shapes agree.
    pub fn from_parts(u: Tensor, sigma: Tensor, v: Tensor, theta: usize, bias: Option<Tensor>) -> Result<Self> {
        let (h, r) = u.matrix_dims("factorized param")?;
        let (w, r2) = v.matrix_dims("factorized param")?;
        if r != r2 || sigma.shape() != [r] {
            return Err(Error::shape("factorized param", u.shape(), v.shape()));
        }
        if r > h.min(w) || theta < r || theta > h.min(w) {
            return Err(Error::Usage(format!(
                "rank {r} / initial rank {theta} invalid for a {h}x{w} matrix"
            )));
        }
        Ok(FactorizedParam { u, sigma, v, theta, bias })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn h(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.v.shape()[0]
    }

    /// `r·(h + w + 1)`, biases excluded.
    pub fn factor_param_count(&self) -> usize {
        self.u.len() + self.sigma.len() + self.v.len()
    }

    pub fn bias_count(&self) -> usize {
        self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// `U·diag(σ)·Vᵀ` without the tape.
    pub fn reconstruct(&self) -> Tensor {
        let (h, w, r) = (self.h(), self.w(), self.rank());
        let s = self.sigma.data();
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            let urow = &self.u.data()[i * r..(i + 1) * r];
            for j in 0..w {
                let vrow = &self.v.data()[j * r..(j + 1) * r];
                out[i * w + j] = (0..r).map(|g| urow[g] * s[g] * vrow[g]).sum();
            }
        }
        Tensor::from_parts(vec![h, w], out)
    }

    /// Records the factors as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> FactorVars {
        FactorVars {
            u: g.param(self.u.clone()),
            sigma: g.param(self.sigma.clone()),
            v: g.param(self.v.clone()),
            bias: self.bias.as_ref().map(|b| g.param(b.clone())),
        }
    }
}

/// Tape handles of one factorized layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct FactorVars {
    pub u: Var,
    pub sigma: Var,
    pub v: Var,
    pub bias: Option<Var>,
}

/// Folds an `S×C×L2×L1` filter into its `SC × L1L2` matrix.
pub fn reshape_filter(k: &Tensor) -> Result<Tensor> {
    let [s, c, l2, l1] = *k.shape() else {
        return Err(Error::Input(format!(
            "reshape_filter needs a rank-4 filter, got {:?}",
            k.shape()
        )));
    };
    k.reshape([s * c, l2 * l1])
}

/// Unfolds an `SC × L1L2` matrix back into an `S×C×L2×L1` filter.
pub fn inverse_reshape(m: &Tensor, shape: &ConvShape) -> Result<Tensor> {
    let (h, w) = m.matrix_dims("inverse_reshape")?;
    if h != shape.h() || w != shape.w() {
        return Err(Error::shape("inverse_reshape", m.shape(), &shape.filter_shape()));
    }
    m.reshape(shape.filter_shape())
}

/// Dense parameter drawn with fan-in normal scaling, `std = sqrt(2 / fan_in)`.
/// Conv layers yield an `S×C×L2×L1` filter, FC layers a `D2×D1` matrix.
pub fn draw_dense<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Tensor> {
    let (shape, fan_in): (Vec<usize>, usize) = match spec {
        LayerSpec::Conv { shape, .. } => {
            shape.validate()?;
            (shape.filter_shape().to_vec(), shape.fan_in())
        }
        LayerSpec::Fc { shape, .. } => {
            shape.validate()?;
            (vec![shape.out_features, shape.in_features], shape.in_features)
        }
        other => return Err(Error::Usage(format!("{other:?} has no weights"))),
    };
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data)
}

/// Full-rank factors of a dense parameter (conv filter or FC matrix).
pub fn factorize_dense(spec: &LayerSpec, dense: &Tensor, precision: Precision) -> Result<FactorizedParam> {
    let (m, bias_len) = match spec {
        LayerSpec::Conv { shape, .. } => (reshape_filter(dense)?, shape.out_channels),
        LayerSpec::Fc { shape, .. } => {
            if dense.shape() != [shape.out_features, shape.in_features] {
                return Err(Error::shape(
                    "factorize_dense",
                    dense.shape(),
                    &[shape.out_features, shape.in_features],
                ));
            }
            (dense.clone(), shape.out_features)
        }
        other => return Err(Error::Usage(format!("{other:?} has no weights"))),
    };
    let mut s = svd(&m)?;
    precision.round_slice(s.u.data_mut());
    precision.round_slice(s.v.data_mut());
    let mut sigma = s.sigma;
    precision.round_slice(&mut sigma);
    let theta = sigma.len();
    FactorizedParam::from_parts(
        s.u,
        Tensor::from_parts(vec![theta], sigma),
        s.v,
        theta,
        Some(Tensor::zeros([bias_len])),
    )
}

/// Draws a dense parameter and returns its full-rank SVD factors, `θ = min(h, w)`.
pub fn init_factorized<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R, precision: Precision) -> Result<FactorizedParam> {
    if !spec.is_factorized() {
        return Err(Error::Usage(format!("{spec:?} is not a factorized layer")));
    }
    let mut dense = draw_dense(spec, rng)?;
    precision.round_slice(dense.data_mut());
    factorize_dense(spec, &dense, precision)
}

/// Reconstructs the filter on the tape, then convolves and adds the per-channel bias.
pub fn forward_conv(g: &mut Graph, p: FactorVars, shape: &ConvShape, x: Var) -> Result<Var> {
    let us = g.scale_cols(p.u, p.sigma)?;
    let vt = g.transpose(p.v)?;
    let m = g.matmul(us, vt)?;
    let k = g.reshape(m, &shape.filter_shape())?;
    let y = g.conv2d(x, k, shape.padding, shape.stride)?;
    match p.bias {
        Some(b) => g.add_channel_bias(y, b),
        None => Ok(y),
    }
}

/// `y = x·V·diag(σ)·Uᵀ (+ b)` as three thin products; the `h×w` weight is never formed.
pub fn forward_fc(g: &mut Graph, p: FactorVars, x: Var) -> Result<Var> {
    let xv = g.matmul(x, p.v)?;
    let xvs = g.scale_cols(xv, p.sigma)?;
    let ut = g.transpose(p.u)?;
    let y = g.matmul(xvs, ut)?;
    match p.bias {
        Some(b) => g.add_row_bias(y, b),
        None => Ok(y),
    }
}
