//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and the operands it
//! needs for its backward rule. [`Graph::backward`] replays the tape in strict
//! reverse order of recording.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Precision, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Sum(Var),
    Norm(Var),
    Reshape(Var),
    Slice { src: Var, start: usize },
    ScaleCols(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    AvgPool { x: Var, size: usize },
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::Norm(_) => "norm",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::ScaleCols(..) => "scale_cols",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The gradient tape. Single-owner; build one per forward/backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            first_non_finite: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shapes of every value recorded so far, in tape order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Fails with the first op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        self.precision.round_slice(value.data_mut());
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleCols(a, b)
            | Op::AddChannelBias(a, b)
            | Op::AddRowBias(a, b) => vec![a, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Norm(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a) => vec![a],
            Op::Slice { src, .. } => vec![src],
            Op::AvgPool { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    /// A trainable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// `max(x, 0)`; subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// `|x|`; subgradient 0 at zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Unsquared Frobenius / Euclidean norm; subgradient 0 at zero.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).frobenius_norm();
        self.push(Tensor::scalar(n), Op::Norm(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Contiguous sub-range `start..start + len` of a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(src);
        if t.rank() != 1 || len == 0 || start + len > t.len() {
            return Err(Error::Usage(format!(
                "slice {start}..{} out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let out = Tensor::from_parts(vec![len], t.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice { src, start }))
    }

    /// `a · diag(s)` for `a` of shape `m×r` and `s` of length `r`.
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (_, r) = ta.matrix_dims("scale_cols")?;
        if ts.shape() != [r] {
            return Err(Error::shape("scale_cols", ta.shape(), ts.shape()));
        }
        let sv = ts.data();
        let data = ta
            .data()
            .chunks(r)
            .flat_map(|row| row.iter().zip(sv).map(|(x, y)| x * y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::ScaleCols(a, s)))
    }

    /// Cross-correlation with zero padding; `x` is `C×H×W` or `N×C×H×W`.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize, stride: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        let geom = ConvGeometry::new(tx.shape(), tk.shape(), pad, stride)?;
        let out = Tensor::from_parts(
            geom.out_shape(tx.rank() == 4),
            geom.forward(tx.data(), tk.data()),
        );
        Ok(self.push(out, Op::Conv2d { x, k, geom }))
    }

    /// Adds `b[s]` to every position of channel `s` of `x` (`S×H×W` or `N×S×H×W`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let ch = match tx.shape() {
            [s, _, _] | [_, s, _, _] => *s,
            other => return Err(Error::shape("add_channel_bias", other, tb.shape())),
        };
        if tb.shape() != [ch] {
            return Err(Error::shape("add_channel_bias", tx.shape(), tb.shape()));
        }
        let plane = tx.shape()[tx.rank() - 2] * tx.shape()[tx.rank() - 1];
        let bias = tb.data();
        let data = tx
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let bv = bias[i % ch];
                p.iter().map(move |v| v + bv)
            })
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddChannelBias(x, b)))
    }

    /// Adds `b` to every row of a `B×D` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (_, d) = tx.matrix_dims("add_row_bias")?;
        if tb.shape() != [d] {
            return Err(Error::shape("add_row_bias", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    /// Non-overlapping `size×size` average pooling over `N×C×H×W`.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = *tx.shape() else {
            return Err(Error::shape("avg_pool", tx.shape(), &[size, size]));
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::Config(format!(
                "avg_pool window {size} does not tile a {h}x{w} map"
            )));
        }
        let (oh, ow) = (h / size, w / size);
        let inv = 1.0 / (size * size) as f64;
        let src = tx.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / size) * ow + xx / size] += src[plane * h * w + y * w + xx] * inv;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(out, Op::AvgPool { x, size }))
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let [n, c, h, w] = *tx.shape() else {
            return Err(Error::shape("global_avg_pool", tx.shape(), &[]));
        };
        let inv = 1.0 / (h * w) as f64;
        let data = tx
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() * inv)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// Mean softmax cross-entropy of `B×n_c` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, nc) = tl.matrix_dims("cross_entropy")?;
        if nc < 2 {
            return Err(Error::Input(format!("cross_entropy needs at least 2 classes, got {nc}")));
        }
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", tl.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= nc) {
            return Err(Error::Input(format!("label {bad} out of range for {nc} classes")));
        }
        let probs = tensor::softmax_rows(tl)?;
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &tl.data()[i * nc..(i + 1) * nc];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        let mut order = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            order.push(idx);
            self.precision.round_slice(g.data_mut());
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contrib) in self.node_backward(&node.op, &node.value, &g)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(
                        grads
                            .get_mut(i)
                            .and_then(Option::take)
                            .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec())),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { leaves, order })
    }

    fn node_backward(&self, op: &Op, out: &Tensor, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let same = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        let gd = g.data();
        Ok(match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = tensor::matmul(g, &tensor::transpose(val(b))?)?;
                let gb = tensor::matmul(&tensor::transpose(val(a))?, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, tensor::transpose(g)?)],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ga = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                vec![(a, same(ta, ga)), (b, same(tb, gb))]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let ga = gd.iter().zip(tb.data()).map(|(g, y)| g / y).collect();
                let gb = gd
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                vec![(a, same(ta, ga)), (b, same(tb, gb))]
            }
            Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::Relu(a) => {
                let ta = val(a);
                let ga = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(a, same(ta, ga))]
            }
            Op::Abs(a) => {
                let ta = val(a);
                let ga = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                vec![(a, same(ta, ga))]
            }
            Op::Sum(a) => vec![(a, Tensor::full(val(a).shape().to_vec(), gd[0]))],
            Op::Norm(a) => {
                let ta = val(a);
                let n = out.item();
                let ga = if n > 0.0 {
                    ta.map(|x| gd[0] * x / n)
                } else {
                    Tensor::zeros(ta.shape().to_vec())
                };
                vec![(a, ga)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(val(a).shape())?)],
            Op::Slice { src, start } => {
                let ts = val(src);
                let mut gs = vec![0.0; ts.len()];
                gs[start..start + gd.len()].copy_from_slice(gd);
                vec![(src, same(ts, gs))]
            }
            Op::ScaleCols(a, s) => {
                let (ta, ts) = (val(a), val(s));
                let r = ts.len();
                let sv = ts.data();
                let mut ga = Vec::with_capacity(ta.len());
                let mut gs = vec![0.0; r];
                for (grow, arow) in gd.chunks(r).zip(ta.data().chunks(r)) {
                    for j in 0..r {
                        ga.push(grow[j] * sv[j]);
                        gs[j] += grow[j] * arow[j];
                    }
                }
                vec![(a, same(ta, ga)), (s, same(ts, gs))]
            }
            Op::Conv2d { x, k, geom } => {
                let (tx, tk) = (val(x), val(k));
                let mut out = Vec::with_capacity(2);
                if self.nodes[x.0].requires_grad {
                    out.push((x, same(tx, geom.backward_input(gd, tk.data()))));
                }
                if self.nodes[k.0].requires_grad {
                    out.push((k, same(tk, geom.backward_kernel(gd, tx.data()))));
                }
                out
            }
            Op::AddChannelBias(x, b) => {
                let tb = val(b);
                let ch = tb.len();
                let shape = g.shape();
                let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
                let mut gb = vec![0.0; ch];
                for (i, p) in gd.chunks(plane).enumerate() {
                    gb[i % ch] += p.iter().sum::<f64>();
                }
                vec![(x, g.clone()), (b, same(tb, gb))]
            }
            Op::AddRowBias(x, b) => {
                let tb = val(b);
                let d = tb.len();
                let mut gb = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(x, g.clone()), (b, same(tb, gb))]
            }
            Op::AvgPool { x, size } => {
                let tx = val(x);
                let [n, c, h, w] = *tx.shape() else { unreachable!() };
                let (oh, ow) = (h / size, w / size);
                let inv = 1.0 / (size * size) as f64;
                let mut gx = vec![0.0; tx.len()];
                for plane in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[plane * h * w + y * w + xx] =
                                gd[plane * oh * ow + (y / size) * ow + xx / size] * inv;
                        }
                    }
                }
                vec![(x, same(tx, gx))]
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(x);
                let [_, _, h, w] = *tx.shape() else { unreachable!() };
                let inv = 1.0 / (h * w) as f64;
                let gx = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                    .collect();
                vec![(x, same(tx, gx))]
            }
            Op::CrossEntropy {
                logits,
                ref probs,
                ref labels,
            } => {
                let b = labels.len();
                let nc = probs.len() / b;
                let scale = gd[0] / b as f64;
                let mut gl = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * nc + y] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                vec![(logits, same(probs, gl))]
            }
        })
    }
}

/// Result of a backward sweep: one gradient per trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a trainable leaf (zeros when the loss does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Tape indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
}
