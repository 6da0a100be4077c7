//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node order is a valid
//! topological order and the backward pass is a single reverse sweep.

use rand::Rng;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::tensor::{gemm, Tensor};

/// Floor applied to probabilities before taking their logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
    /// `-relu(x)`
    NegRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
            Activation::NegRelu => -x.max(0.0),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(x > 0.0)),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
            Activation::NegRelu => -f64::from(u8::from(x > 0.0)),
        }
    }
}

/// Running statistics and hyperparameters of one batch-normalization layer.
/// The affine parameters live on the graph as ordinary variables.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Act(Var, Activation),
    Reshape(Var),
    SoftmaxRows(Var),
    BroadcastAddChannel {
        x: Var,
        v: Var,
        segments: usize,
    },
    SegmentWeightedSum {
        x: Var,
        weights: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    CrossEntropy {
        probs: Var,
        targets: Tensor,
    },
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single differentiation tape. Not shareable across threads while being
/// built; independent graphs are independent.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no path from the root reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn grad(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf with an explicit gradient flag (used for input saliency).
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", Tensor::new(&[m, p], out)?, Op::MatMul(a, b), rg)
    }

    /// `x · wᵀ + b` with `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let (rows, inn, out_dim) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(mismatch("linear", &sw, self.shape(b)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xv[r * inn..(r + 1) * inn];
            for o in 0..out_dim {
                let wr = &wv[o * inn..(o + 1) * inn];
                out[r * out_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                for o in 0..out_dim {
                    out[r * out_dim + o] += bv[o];
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push_checked(
            "linear",
            Tensor::new(&[rows, out_dim], out)?,
            Op::Linear { x, w, b },
            rg,
        )
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push_checked("scale", t, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(mismatch("mul_const", ta.shape(), c.shape()));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a]);
        self.push_checked("mul_const", t, Op::MulConst(a, c), rg)
    }

    /// Sum of several same-shaped variables.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| invalid("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let t = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(&[a]);
        self.push_checked("activation", t, Op::Act(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Softmax along the last axis of a 1-D or 2-D tensor, with the row
    /// maximum subtracted before exponentiation.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.is_empty() || ta.shape().len() > 2 {
            return Err(invalid("softmax", format!("unsupported shape {:?}", ta.shape())));
        }
        let (rows, cols) = ta.as_matrix();
        let mut out = ta.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(ta.shape(), out)?;
        let rg = self.rg(&[a]);
        self.push_checked("softmax", t, Op::SoftmaxRows(a), rg)
    }

    /// `out[j, s·seg + p] = x[j, s·seg + p] + v[s, j]`.
    ///
    /// `x` is channels-major `[c, m]`; `v` is either `[c]` (one segment) or
    /// `[segments, c]`, splitting the `m` positions into equal contiguous
    /// segments.
    pub fn broadcast_add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        let (c, m) = self.value(x).as_matrix();
        let segments = match sv.as_slice() {
            [vc] if *vc == c => 1,
            [s, vc] if *vc == c && *s > 0 && m % s == 0 => *s,
            _ => return Err(mismatch("broadcast_add_channel", &sx, &sv)),
        };
        let seg = m / segments;
        let vv = self.value(v).data();
        let mut out = self.value(x).data().to_vec();
        for j in 0..c {
            for s in 0..segments {
                let add = vv[s * c + j];
                for o in &mut out[j * m + s * seg..j * m + (s + 1) * seg] {
                    *o += add;
                }
            }
        }
        let t = Tensor::new(&sx, out)?;
        let rg = self.rg(&[x, v]);
        self.push_checked(
            "broadcast_add_channel",
            t,
            Op::BroadcastAddChannel { x, v, segments },
            rg,
        )
    }

    /// `out[s, j] = Σ_p x[j, s·seg + p] · weights[s, p]` for channels-major
    /// `x: [c, segments·seg]` and `weights: [segments, seg]` (or `[seg]`).
    pub fn segment_weighted_sum(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (c, m) = self.value(x).as_matrix();
        let (segments, seg) = self.value(weights).as_matrix();
        if self.shape(x).len() != 2 || segments * seg != m {
            return Err(mismatch("segment_weighted_sum", self.shape(x), self.shape(weights)));
        }
        let xv = self.value(x).data();
        let wv = self.value(weights).data();
        let mut out = vec![0.0; segments * c];
        for s in 0..segments {
            let w = &wv[s * seg..(s + 1) * seg];
            for j in 0..c {
                let xr = &xv[j * m + s * seg..j * m + (s + 1) * seg];
                out[s * c + j] = xr.iter().zip(w).map(|(a, b)| a * b).sum();
            }
        }
        let shape = if self.shape(weights).len() == 1 {
            vec![c]
        } else {
            vec![segments, c]
        };
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, weights]);
        self.push_checked("segment_weighted_sum", t, Op::SegmentWeightedSum { x, weights }, rg)
    }

    /// Per-channel batch normalization of a channels-major tensor whose
    /// leading axis is the channel and whose remaining axes are pooled.
    ///
    /// In train mode, statistics come from the input and the running
    /// statistics in `state` are updated by exponential moving average;
    /// in eval mode the running statistics are used as-is.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: Mode,
    ) -> Result<Var> {
        let (c, m) = self.value(x).as_matrix();
        if state.channels() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batchnorm", self.shape(x), self.shape(gamma)));
        }
        if state.epsilon <= 0.0 {
            return Err(invalid("batchnorm", "epsilon must be positive"));
        }
        let train = mode == Mode::Train;
        if train && m == 0 {
            return Err(invalid("batchnorm", "no positions to normalize over"));
        }
        let xv = self.value(x).data();
        let mut inv_std = vec![0.0; c];
        let mut normalized = vec![0.0; c * m];
        for j in 0..c {
            let row = &xv[j * m..(j + 1) * m];
            let (mean, var) = if train {
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                let mo = state.momentum;
                state.running_mean[j] = (1.0 - mo) * state.running_mean[j] + mo * mean;
                state.running_var[j] = (1.0 - mo) * state.running_var[j] + mo * unbiased;
                (mean, var)
            } else {
                (state.running_mean[j], state.running_var[j])
            };
            let inv = 1.0 / (var + state.epsilon).sqrt();
            inv_std[j] = inv;
            for (o, v) in normalized[j * m..(j + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = normalized.clone();
        for j in 0..c {
            for o in &mut out[j * m..(j + 1) * m] {
                *o = g[j] * *o + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push_checked(
            "batchnorm",
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized: Tensor::new(&shape, normalized)?,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, Tensor::new(&shape, mask)?)
    }

    /// Mean over rows of `-Σ_i y_i log(max(p_i, LOG_FLOOR))`. Rows of both
    /// `probs` and `targets` must be probability distributions.
    pub fn cross_entropy(&mut self, probs: Var, targets: Tensor) -> Result<Var> {
        let tp = self.value(probs);
        if tp.shape() != targets.shape() {
            return Err(mismatch("cross_entropy", tp.shape(), targets.shape()));
        }
        let (rows, cols) = tp.as_matrix();
        validate_distributions("cross_entropy", tp, rows, cols)?;
        validate_distributions("cross_entropy", &targets, rows, cols)?;
        let loss: f64 = tp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &y)| if y == 0.0 { 0.0 } else { -y * p.max(LOG_FLOOR).ln() })
            .sum::<f64>()
            / rows as f64;
        let rg = self.rg(&[probs]);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { probs, targets },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// 2-D convolution on channels-major input `x: [c_in, n, h, w]` with
    /// `w: [c_out, c_in, k, k]`, returning `[c_out, n, h_out, w_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[0] != sw[1] || sw[2] != sw[3] || spec.stride == 0 {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom::new(&sx, &sw, spec)
            .ok_or_else(|| invalid("conv2d", "kernel larger than padded input"))?;
        let mut out = vec![0.0; geom.cout * geom.n * geom.ho * geom.wo];
        if let Some(b) = b {
            let plane = geom.n * geom.ho * geom.wo;
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        geom.forward(self.value(x).data(), self.value(w).data(), &mut out);
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        let t = Tensor::new(&[geom.cout, geom.n, geom.ho, geom.wo], out)?;
        self.push_checked("conv2d", t, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Reverse sweep from a scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(invalid("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![1.0])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let p = tb.shape()[1];
                if want(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(gd, tb.transpose().data(), &mut ga, m, p, k);
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?);
                }
                if want(*b) {
                    let mut gb = vec![0.0; k * p];
                    gemm(ta.transpose().data(), gd, &mut gb, k, m, p);
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (rows, inn) = (tx.shape()[0], tx.shape()[1]);
                let out_dim = tw.shape()[0];
                if want(*x) {
                    let mut gx = vec![0.0; rows * inn];
                    gemm(gd, tw.data(), &mut gx, rows, out_dim, inn);
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if want(*w) {
                    let mut gw = vec![0.0; out_dim * inn];
                    gemm(g.transpose().data(), tx.data(), &mut gw, out_dim, rows, inn);
                    accumulate(grads, *w, Tensor::new(tw.shape(), gw)?);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut gb = vec![0.0; out_dim];
                    for r in 0..rows {
                        for o in 0..out_dim {
                            gb[o] += gd[r * out_dim + o];
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(gb));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        accumulate(grads, v, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let d = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, Tensor::new(ta.shape(), d)?);
                }
                if want(*b) {
                    let d = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, Tensor::new(tb.shape(), d)?);
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::MulConst(a, c) => {
                let d = gd.iter().zip(c.data()).map(|(g, c)| g * c).collect();
                accumulate(grads, *a, Tensor::new(c.shape(), d)?);
            }
            Op::Act(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                accumulate(grads, *a, Tensor::new(node.value.shape(), d)?);
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.clone().reshaped(self.shape(*a))?);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (rows, cols) = y.as_matrix();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, &y), &g) in d[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(y.shape(), d)?);
            }
            Op::BroadcastAddChannel { x, v, segments } => {
                if want(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if want(*v) {
                    let (c, m) = g.as_matrix();
                    let seg = m / segments;
                    let mut gv = vec![0.0; segments * c];
                    for j in 0..c {
                        for s in 0..*segments {
                            gv[s * c + j] = gd[j * m + s * seg..j * m + (s + 1) * seg].iter().sum();
                        }
                    }
                    accumulate(grads, *v, Tensor::new(self.shape(*v), gv)?);
                }
            }
            Op::SegmentWeightedSum { x, weights } => {
                let (tx, tw) = (self.value(*x), self.value(*weights));
                let (c, m) = tx.as_matrix();
                let (segments, seg) = tw.as_matrix();
                if want(*x) {
                    let mut gx = vec![0.0; c * m];
                    for s in 0..segments {
                        let w = &tw.data()[s * seg..(s + 1) * seg];
                        for j in 0..c {
                            let gsj = gd[s * c + j];
                            for (o, &wp) in gx[j * m + s * seg..j * m + (s + 1) * seg].iter_mut().zip(w) {
                                *o = gsj * wp;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if want(*weights) {
                    let mut gw = vec![0.0; segments * seg];
                    for s in 0..segments {
                        for j in 0..c {
                            let gsj = gd[s * c + j];
                            let xr = &tx.data()[j * m + s * seg..j * m + (s + 1) * seg];
                            for (o, &xv) in gw[s * seg..(s + 1) * seg].iter_mut().zip(xr) {
                                *o += gsj * xv;
                            }
                        }
                    }
                    accumulate(grads, *weights, Tensor::new(tw.shape(), gw)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let (c, m) = normalized.as_matrix();
                let nd = normalized.data();
                let gam = self.value(*gamma).data();
                if want(*gamma) || want(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for j in 0..c {
                        let gr = &gd[j * m..(j + 1) * m];
                        gg[j] = gr.iter().zip(&nd[j * m..(j + 1) * m]).map(|(g, n)| g * n).sum();
                        gb[j] = gr.iter().sum();
                    }
                    if want(*gamma) {
                        accumulate(grads, *gamma, Tensor::from_vec(gg));
                    }
                    if want(*beta) {
                        accumulate(grads, *beta, Tensor::from_vec(gb));
                    }
                }
                if want(*x) {
                    let mut gx = vec![0.0; c * m];
                    for j in 0..c {
                        let gr = &gd[j * m..(j + 1) * m];
                        let nr = &nd[j * m..(j + 1) * m];
                        let scale = gam[j] * inv_std[j];
                        let out = &mut gx[j * m..(j + 1) * m];
                        if *train {
                            let mf = m as f64;
                            let sum_g: f64 = gr.iter().sum();
                            let sum_gn: f64 = gr.iter().zip(nr).map(|(g, n)| g * n).sum();
                            for ((o, &gv), &nv) in out.iter_mut().zip(gr).zip(nr) {
                                *o = scale * (gv - sum_g / mf - nv * sum_gn / mf);
                            }
                        } else {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = scale * gv;
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                }
            }
            Op::CrossEntropy { probs, targets } => {
                let tp = self.value(*probs);
                let (rows, _) = tp.as_matrix();
                let scale = gd[0] / rows as f64;
                let d = tp
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &y)| if p > LOG_FLOOR { -scale * y / p } else { 0.0 })
                    .collect();
                accumulate(grads, *probs, Tensor::new(tp.shape(), d)?);
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0]));
            }
            Op::Conv2d { x, w, b, spec } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(tx.shape(), tw.shape(), *spec).expect("validated in forward");
                if want(*x) {
                    let mut gx = vec![0.0; tx.len()];
                    geom.backward_input(gd, tw.data(), &mut gx);
                    accumulate(grads, *x, Tensor::new(tx.shape(), gx)?);
                }
                if want(*w) {
                    let mut gw = vec![0.0; tw.len()];
                    geom.backward_weight(gd, tx.data(), &mut gw);
                    accumulate(grads, *w, Tensor::new(tw.shape(), gw)?);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let plane = geom.n * geom.ho * geom.wo;
                    let gb = (0..geom.cout)
                        .map(|co| gd[co * plane..(co + 1) * plane].iter().sum())
                        .collect();
                    accumulate(grads, b, Tensor::from_vec(gb));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn validate_distributions(op: &'static str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        if row.iter().any(|&v| v < 0.0) {
            return Err(invalid(op, "negative probability"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(invalid(op, format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize], spec: Conv2dSpec) -> Option<Self> {
        let (cin, n, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let (s, p) = (spec.stride, spec.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return None;
        }
        Some(ConvGeom {
            cin,
            cout,
            n,
            h,
            w,
            k,
            ho: (h + 2 * p - k) / s + 1,
            wo: (w + 2 * p - k) / s + 1,
            stride: s,
            pad: p,
        })
    }

    /// Output index range along one axis for kernel offset `kk` such that the
    /// input index `o·stride + kk - pad` is in `[0, len)`.
    fn valid_range(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > kk {
            ((len - 1 + self.pad - kk) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(weight_index, input_row_offset, output_row_offset, ox_lo, ox_hi, kx)`
    /// for every contributing (kernel tap, output row) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, self.h, self.ho);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = self.valid_range(kx, self.w, self.wo);
                        let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                        for nn in 0..self.n {
                            for oy in oy_lo..oy_hi {
                                let iy = oy * s + ky - p;
                                let in_row = ((ci * self.n + nn) * self.h + iy) * self.w;
                                let out_row = ((co * self.n + nn) * self.ho + oy) * self.wo;
                                f(widx, in_row, out_row, ox_lo, ox_hi, kx);
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (s, p) = (self.stride, self.pad);
        self.for_each_tap(|widx, in_row, out_row, lo, hi, kx| {
            let wv = w[widx];
            for ox in lo..hi {
                out[out_row + ox] += wv * x[in_row + ox * s + kx - p];
            }
        });
    }

    fn backward_input(&self, g: &[f64], w: &[f64], gx: &mut [f64]) {
        let (s, p) = (self.stride, self.pad);
        self.for_each_tap(|widx, in_row, out_row, lo, hi, kx| {
            let wv = w[widx];
            for ox in lo..hi {
                gx[in_row + ox * s + kx - p] += wv * g[out_row + ox];
            }
        });
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], gw: &mut [f64]) {
        let (s, p) = (self.stride, self.pad);
        self.for_each_tap(|widx, in_row, out_row, lo, hi, kx| {
            let mut acc = 0.0;
            for ox in lo..hi {
                acc += x[in_row + ox * s + kx - p] * g[out_row + ox];
            }
            gw[widx] += acc;
        });
    }
}
