//! Dense row-major tensors and the raw numeric kernels behind the tape.
//!
//! Storage is always `f64`. When the engine runs in [`Precision::F32`] every
//! op output is rounded through `f32`, so stored values stay exactly
//! representable in single precision (checkpoints rely on this).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric precision of the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Single precision; the training default.
    #[default]
    F32,
    /// Double precision, used by oracle and property checks.
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn round_slice(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking extents and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Input(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose output shape is correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new([data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer, new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Keeps the first `cols` columns of a matrix.
    pub fn take_columns(&self, cols: usize) -> Result<Tensor> {
        let (m, n) = self.matrix_dims("take_columns")?;
        if cols == 0 || cols > n {
            return Err(Error::Usage(format!(
                "cannot keep {cols} columns of a {m}x{n} matrix"
            )));
        }
        let mut data = Vec::with_capacity(m * cols);
        for row in self.data.chunks(n) {
            data.extend_from_slice(&row[..cols]);
        }
        Ok(Tensor::from_parts(vec![m, cols], data))
    }

    /// Keeps the first `len` entries of a vector.
    pub fn take_prefix(&self, len: usize) -> Result<Tensor> {
        if self.rank() != 1 || len == 0 || len > self.data.len() {
            return Err(Error::Usage(format!(
                "cannot keep {len} entries of shape {:?}",
                self.shape
            )));
        }
        Ok(Tensor::from_parts(vec![len], self.data[..len].to_vec()))
    }
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.matrix_dims("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Geometry of a 2-D convolution over a batched `N×C×H×W` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub s: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output extent of one spatial axis, or `None` when it is not a positive integer.
pub fn conv_output_extent(input: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], pad: usize, stride: usize) -> Result<Self> {
        let (n, c, h, w) = match *x {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", x, k)),
        };
        let [s, kc, kh, kw] = *k else {
            return Err(Error::shape("conv2d", x, k));
        };
        if kc != c {
            return Err(Error::shape("conv2d", x, k));
        }
        let oh = conv_output_extent(h, kh, pad, stride);
        let ow = conv_output_extent(w, kw, pad, stride);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeometry {
                n,
                c,
                h,
                w,
                s,
                kh,
                kw,
                pad,
                stride,
                oh,
                ow,
            }),
            _ => Err(Error::Config(format!(
                "conv2d output extent is not a positive integer: input {h}x{w}, \
                 kernel {kh}x{kw}, padding {pad}, stride {stride}"
            ))),
        }
    }

    /// Range of output positions along one axis whose input tap `offset` lands inside `0..extent`.
    #[inline]
    fn valid(&self, offset: usize, extent: usize, out_extent: usize) -> std::ops::Range<usize> {
        // input index = o * stride + offset - pad
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > offset {
            ((extent + self.pad - offset - 1) / self.stride + 1).min(out_extent)
        } else {
            0
        };
        lo..hi.max(lo)
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.n, self.s, self.oh, self.ow]
        } else {
            vec![self.s, self.oh, self.ow]
        }
    }

    /// Visits every (input index, kernel index, output index) triple of the convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeometry {
            n,
            c,
            h,
            w,
            s,
            kh,
            kw,
            pad,
            stride,
            oh,
            ow,
        } = *self;
        for b in 0..n {
            for so in 0..s {
                let out_base = (b * s + so) * oh * ow;
                for ci in 0..c {
                    let in_base = (b * c + ci) * h * w;
                    for ky in 0..kh {
                        let rows = self.valid(ky, h, oh);
                        for kx in 0..kw {
                            let kidx = ((so * c + ci) * kh + ky) * kw + kx;
                            let cols = self.valid(kx, w, ow);
                            for oy in rows.clone() {
                                let iy = oy * stride + ky - pad;
                                let in_row = in_base + iy * w;
                                let out_row = out_base + oy * ow;
                                for ox in cols.clone() {
                                    let ix = ox * stride + kx - pad;
                                    f(in_row + ix, kidx, out_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.s * self.oh * self.ow];
        self.for_each_tap(|i, kk, o| out[o] += k[kk] * x[i]);
        out
    }

    pub fn backward_input(&self, g: &[f64], k: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.n * self.c * self.h * self.w];
        self.for_each_tap(|i, kk, o| gx[i] += g[o] * k[kk]);
        gx
    }

    pub fn backward_kernel(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let mut gk = vec![0.0; self.s * self.c * self.kh * self.kw];
        self.for_each_tap(|i, kk, o| gk[kk] += g[o] * x[i]);
        gk
    }
}

/// Cross-correlation of `x` (`C×H×W` or `N×C×H×W`) with `k` (`S×C×L2×L1`), zero padding.
pub fn conv2d(x: &Tensor, k: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(&x.shape, &k.shape, pad, stride)?;
    let out = geom.forward(&x.data, &k.data);
    Ok(Tensor::from_parts(geom.out_shape(x.rank() == 4), out))
}

/// Numerically stable row-wise softmax of a `B×n` matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (b, n) = logits.matrix_dims("softmax")?;
    let mut out = vec![0.0; b * n];
    for i in 0..b {
        let row = &logits.data[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * n..(i + 1) * n];
        let mut z = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    Ok(Tensor::from_parts(vec![b, n], out))
}
