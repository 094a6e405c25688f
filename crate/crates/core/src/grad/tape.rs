//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and whatever
//! it needs for its backward rule. Nodes only reference earlier nodes, so a
//! single reverse sweep over the tape visits each node once, after all of
//! its consumers.

use std::collections::BTreeMap;
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use super::gemm::gemm;
use super::params::ParamStore;
use super::tensor::{Float, Tensor};
use crate::error::{dim_err, Error, Result};

/// Floor applied to probabilities before taking the log in cross-entropy.
pub const PROB_FLOOR: Float = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: Float) -> Float {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative_from_output(self, y: Float) -> Float {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding of `k - 1` split evenly (extra on the bottom/right).
    Same,
}

/// Where batch normalization takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Per-channel statistics of the current batch.
    Batch,
    /// Stored running statistics.
    Running { mean: &'a [Float], var: &'a [Float] },
}

/// Per-channel batch statistics observed by a batch-norm node; `var` is the
/// unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<Float>,
    pub var: Vec<Float>,
}

/// A user-supplied backward rule for a value computed outside the tape.
pub trait CustomOp: fmt::Debug {
    /// Gradient with respect to each input, in the order the inputs were given.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[Float]) -> Vec<Vec<Float>>;
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, x: &[Float]) -> Vec<Float> {
        let bp = self.batch * self.positions();
        let mut cols = vec![0.0; self.patch_len() * bp];
        self.walk(|row, col, src| {
            if let Some(src) = src {
                cols[row * bp + col] = x[src];
            }
        });
        cols
    }

    fn col2im(&self, cols: &[Float], dx: &mut [Float]) {
        let bp = self.batch * self.positions();
        self.walk(|row, col, src| {
            if let Some(src) = src {
                dx[src] += cols[row * bp + col];
            }
        });
    }

    /// Visits every (column-matrix row, column, input offset) triple; the
    /// offset is `None` where the window hangs over the zero padding.
    fn walk(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for b in 0..self.batch {
                        let plane = (b * self.c_in + c) * self.h * self.w;
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ki) as isize - self.pad_top as isize;
                            let row_ok = iy >= 0 && (iy as usize) < self.h;
                            for ox in 0..self.w_out {
                                let ix = (ox * self.stride + kj) as isize - self.pad_left as isize;
                                let col = b * p + oy * self.w_out + ox;
                                let src = (row_ok && ix >= 0 && (ix as usize) < self.w)
                                    .then(|| plane + iy as usize * self.w + ix as usize);
                                f(row, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Float),
    Sum(Var),
    Act(Var, Activation),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SelectStep {
        seq: Var,
        step: usize,
    },
    StackSteps(Vec<Var>),
    WeightedSum {
        weights: Var,
        seq: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<Float>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<Float>,
        inv_std: Vec<Float>,
        batch_stats: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Unrounded value of scalar reductions, carried through scalar
    /// add, sub and scale.
    wide: Option<f64>,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<Float>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[Float]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accumulate(grads: &mut [Option<Vec<Float>>], v: Var, len: usize) -> &mut [Float] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            wide: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_wide(&mut self, wide: f64, op: Op) -> Var {
        let var = self.push(Tensor::scalar(wide as Float), op);
        self.nodes[var.0].wide = Some(wide);
        var
    }

    fn wide_pair(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        Some((self.nodes[a.0].wide?, self.nodes[b.0].wide?))
    }

    /// Value of a scalar node in 64-bit precision. Sums and losses keep
    /// their accumulator instead of the rounded value, so finite
    /// differences are not limited by rounding of the final scalar.
    pub fn scalar_value(&self, x: Var) -> f64 {
        let node = &self.nodes[x.0];
        node.wide.unwrap_or_else(|| node.value.item() as f64)
    }

    /// Records a constant input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a named parameter. Repeated calls with the same name return the
    /// same node, so every use contributes to one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound on this tape, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(Float, Float) -> Float, op: Op) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape(), data).expect("shapes checked by caller");
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        if let Some((x, y)) = self.wide_pair(a, b) {
            return Ok(self.push_wide(x + y, Op::Add(a, b)));
        }
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        if let Some((x, y)) = self.wide_pair(a, b) {
            return Ok(self.push_wide(x - y, Op::Sub(a, b)));
        }
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector along the last axis of `x`, broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Var {
        if let Some(w) = self.nodes[x.0].wide {
            return self.push_wide(w * factor as f64, Op::Scale(x, factor));
        }
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push_wide(s, Op::Sum(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Act(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let k = match value.shape().last() {
            Some(&k) => k,
            None => return dim_err("softmax", "scalar input has no class axis"),
        };
        let mut out = value.clone();
        for row in out.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Mean over the batch of `-ln p[label]`, with `p` floored at
    /// [`PROB_FLOOR`]. Accepts `[batch, C]` or a single `[C]` row.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(probs);
        let (rows, classes) = match *shape {
            [c] => (1, c),
            [b, c] => (b, c),
            _ => return dim_err("cross_entropy", format!("expected [batch, C], got {shape:?}")),
        };
        if labels.len() != rows {
            return dim_err(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            );
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let p = self.value(probs).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                // `max` would turn a NaN probability into the floor and hide divergence.
                let q = p[r * classes + l];
                -(if q < PROB_FLOOR { PROB_FLOOR } else { q } as f64).ln()
            })
            .sum();
        Ok(self.push_wide(
            total / rows as f64,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; every other dimension must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dim_err("concat", "nothing to concatenate"),
        };
        if axis >= first.len() {
            return dim_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `[batch, steps, features]` → `[batch, features]` at one step.
    pub fn select_step(&mut self, seq: Var, step: usize) -> Result<Var> {
        let (b, n, f) = match *self.shape(seq) {
            [b, n, f] => (b, n, f),
            ref s => return dim_err("select_step", format!("expected [batch, steps, features], got {s:?}")),
        };
        if step >= n {
            return dim_err("select_step", format!("step {step} of {n}"));
        }
        let src = self.value(seq).data();
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            let off = (bi * n + step) * f;
            data.extend_from_slice(&src[off..off + f]);
        }
        let value = Tensor::new([b, f], data)?;
        Ok(self.push(value, Op::SelectStep { seq, step }))
    }

    /// Stacks `steps` values of shape `[batch, features]` into
    /// `[batch, steps, features]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let shape = match steps.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dim_err("stack_steps", "empty sequence"),
        };
        if shape.len() != 2 {
            return dim_err("stack_steps", format!("expected [batch, features], got {shape:?}"));
        }
        for &s in steps {
            if self.shape(s) != shape.as_slice() {
                return Err(Error::Shape {
                    op: "stack_steps",
                    lhs: shape.clone(),
                    rhs: self.shape(s).to_vec(),
                });
            }
        }
        let (b, f, n) = (shape[0], shape[1], steps.len());
        let mut data = vec![0.0; b * n * f];
        for (t, &s) in steps.iter().enumerate() {
            let src = self.value(s).data();
            for bi in 0..b {
                data[(bi * n + t) * f..(bi * n + t + 1) * f].copy_from_slice(&src[bi * f..(bi + 1) * f]);
            }
        }
        let value = Tensor::new([b, n, f], data)?;
        Ok(self.push(value, Op::StackSteps(steps.to_vec())))
    }

    /// `out[b] = Σ_t weights[b, t] · seq[b, t, :]`.
    pub fn weighted_sum(&mut self, weights: Var, seq: Var) -> Result<Var> {
        let (sw, ss) = (self.shape(weights), self.shape(seq));
        let ok = sw.len() == 2 && ss.len() == 3 && sw[0] == ss[0] && sw[1] == ss[1];
        if !ok {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: sw.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let (b, n, f) = (ss[0], ss[1], ss[2]);
        let w = self.value(weights).data();
        let s = self.value(seq).data();
        let mut out = vec![0.0; b * f];
        for bi in 0..b {
            let o = &mut out[bi * f..(bi + 1) * f];
            for t in 0..n {
                let wt = w[bi * n + t];
                let row = &s[(bi * n + t) * f..(bi * n + t + 1) * f];
                for (ov, &rv) in o.iter_mut().zip(row) {
                    *ov += wt * rv;
                }
            }
        }
        let value = Tensor::new([b, f], out)?;
        Ok(self.push(value, Op::WeightedSum { weights, seq }))
    }

    /// 2-D cross-correlation (no kernel flip) plus per-channel bias.
    ///
    /// `input` is `[C_in, H, W]` or `[batch, C_in, H, W]`; `kernels` is
    /// `[C_out, C_in, k, k]`; `bias` is `[C_out]`. The output keeps the
    /// input's rank.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        padding: Padding,
        stride: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c_in, h, w) = match *si {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return dim_err("conv2d", format!("input must be [C,H,W] or [B,C,H,W], got {si:?}")),
        };
        if sk.len() != 4 || sk[2] != sk[3] || sk[1] != c_in {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: si,
                rhs: sk,
            });
        }
        let (c_out, k) = (sk[0], sk[2]);
        if self.shape(bias) != [c_out] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: sk,
                rhs: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be positive");
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => k - 1,
        };
        let (hp, wp) = (h + pad, w + pad);
        if k > hp || k > wp {
            return dim_err(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {hp}x{wp}"),
            );
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad_top: pad / 2,
            pad_left: pad / 2,
            h_out: (hp - k) / stride + 1,
            w_out: (wp - k) / stride + 1,
        };
        let cols = geom.im2col(self.value(input).data());
        let (p, bp) = (geom.positions(), batch * geom.positions());
        let mut mat = vec![0.0; c_out * bp];
        gemm(
            c_out,
            geom.patch_len(),
            bp,
            self.value(kernels).data(),
            false,
            &cols,
            false,
            &mut mat,
            false,
        );
        let bias_v = self.value(bias).data();
        let mut out = vec![0.0; batch * c_out * p];
        for co in 0..c_out {
            for b in 0..batch {
                let src = &mat[co * bp + b * p..co * bp + (b + 1) * p];
                let dst = &mut out[(b * c_out + co) * p..(b * c_out + co + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias_v[co];
                }
            }
        }
        let shape = if si.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
        ))
    }

    /// Max pooling without padding. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let (planes, h, w) = match *si {
            [c, h, w] => (c, h, w),
            [b, c, h, w] => (b * c, h, w),
            _ => return dim_err("maxpool2d", format!("input must be [C,H,W] or [B,C,H,W], got {si:?}")),
        };
        if window == 0 || stride == 0 {
            return dim_err("maxpool2d", "window and stride must be positive");
        }
        if window > h || window > w {
            return dim_err(
                "maxpool2d",
                format!("window {window} exceeds spatial extent {h}x{w}"),
            );
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let mut shape = si.clone();
        let r = shape.len();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    /// Per-channel spatial mean: `[C,H,W]` → `[C]`, `[B,C,H,W]` → `[B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        if si.len() != 3 && si.len() != 4 {
            return dim_err("global_avg_pool", format!("input must be [C,H,W] or [B,C,H,W], got {si:?}"));
        }
        let area = si[si.len() - 2] * si[si.len() - 1];
        let data: Vec<Float> = self
            .value(input)
            .data()
            .chunks(area)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / area as f64) as Float)
            .collect();
        let value = Tensor::new(&si[..si.len() - 2], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(input)))
    }

    /// Batch normalization over axis 1 of a `[batch, C, ...]` input.
    ///
    /// With [`NormStats::Batch`] the batch's own statistics are used and
    /// returned so the caller can update its running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
        eps: Float,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let si = self.shape(input).to_vec();
        if si.len() < 2 {
            return dim_err("batch_norm", format!("input must be [batch, C, ...], got {si:?}"));
        }
        let (batch, c) = (si[0], si[1]);
        let spatial: usize = si[2..].iter().product();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return dim_err(
                    "batch_norm",
                    format!("{what} has shape {:?}, expected [{c}]", self.shape(v)),
                );
            }
        }
        let x = self.value(input).data();
        let count = batch * spatial;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        let batch_stats = matches!(stats, NormStats::Batch);
        match stats {
            NormStats::Batch => {
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        mean[ch] += x[off..off + spatial].iter().map(|&v| v as f64).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        var[ch] += x[off..off + spatial]
                            .iter()
                            .map(|&v| (v as f64 - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
            }
            NormStats::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return dim_err("batch_norm", "running statistics do not match channel count");
                }
                for ch in 0..c {
                    mean[ch] = rm[ch] as f64;
                    var[ch] = rv[ch] as f64;
                }
            }
        }
        let inv_std: Vec<Float> = var
            .iter()
            .map(|&v| (1.0 / (v + eps as f64).sqrt()) as Float)
            .collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let xh = ((x[i] as f64 - mean[ch]) * inv_std[ch] as f64) as Float;
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let moments = batch_stats.then(|| {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            BatchMoments {
                mean: mean.iter().map(|&m| m as Float).collect(),
                var: var.iter().map(|&v| (v * unbias) as Float).collect(),
            }
        });
        let value = Tensor::new(si, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
        );
        Ok((v, moments))
    }

    /// Records a value computed elsewhere together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Hash of every piecewise branch taken in the forward pass: ReLU signs,
    /// max-pool winners and cross-entropy floor clamps. Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Act(_, Activation::Relu) => {
                    i.hash(&mut h);
                    for &v in node.value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::CrossEntropy { probs, labels } => {
                    i.hash(&mut h);
                    let p = self.value(*probs).data();
                    let classes = p.len() / labels.len();
                    for (r, &l) in labels.iter().enumerate() {
                        (p[r * classes + l] > PROB_FLOOR).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<Float>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if let Some(g) = grads[i].take() {
                self.propagate(i, &g, &mut grads);
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every bound parameter's gradient to
    /// its accumulator in `store`. Returns the loss value.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Float> {
        let grads = self.backward(loss)?;
        for (name, v) in self.params() {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(self.value(loss).item())
    }

    fn propagate(&self, i: usize, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                gemm(m, n, k, g, false, vb, true, accumulate(grads, *a, m * k), true);
                gemm(k, m, n, va, true, g, false, accumulate(grads, *b, k * n), true);
            }
            Op::Add(a, b) => {
                add_into(accumulate(grads, *a, g.len()), g, 1.0);
                add_into(accumulate(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(accumulate(grads, *a, g.len()), g, 1.0);
                add_into(accumulate(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = accumulate(grads, *a, g.len());
                for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                    *d += gv * bv;
                }
                let gb = accumulate(grads, *b, g.len());
                for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                    *d += gv * av;
                }
            }
            Op::AddBias(x, bias) => {
                add_into(accumulate(grads, *x, g.len()), g, 1.0);
                let n = self.value(*bias).len();
                let gb = accumulate(grads, *bias, n);
                for row in g.chunks(n) {
                    add_into(gb, row, 1.0);
                }
            }
            Op::Scale(x, f) => add_into(accumulate(grads, *x, g.len()), g, *f),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Act(x, kind) => {
                let gx = accumulate(grads, *x, g.len());
                for ((d, &gv), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += gv * kind.derivative_from_output(y);
                }
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().expect("softmax output has a class axis");
                let gx = accumulate(grads, *x, g.len());
                for ((dx, gy), y) in gx.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                    let dot: f64 = gy.iter().zip(y).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &gv), &yv) in dx.iter_mut().zip(gy).zip(y) {
                        *d += yv * (gv - dot as Float);
                    }
                }
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs).data();
                let classes = p.len() / labels.len();
                let scale = g[0] / labels.len() as Float;
                let gp = accumulate(grads, *probs, p.len());
                for (r, &l) in labels.iter().enumerate() {
                    let pv = p[r * classes + l];
                    if pv > PROB_FLOOR {
                        gp[r * classes + l] -= scale / pv;
                    }
                }
            }
            Op::Reshape(x) => add_into(accumulate(grads, *x, g.len()), g, 1.0),
            Op::Concat { parts, axis } => {
                let first = self.shape(parts[0]);
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let chunk = self.shape(p)[*axis] * inner;
                        let n = self.value(p).len();
                        let gp = accumulate(grads, p, n);
                        add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[offset..offset + chunk], 1.0);
                        offset += chunk;
                    }
                }
            }
            Op::SelectStep { seq, step } => {
                let s = self.shape(*seq);
                let (b, n, f) = (s[0], s[1], s[2]);
                let gs = accumulate(grads, *seq, b * n * f);
                for bi in 0..b {
                    let off = (bi * n + step) * f;
                    add_into(&mut gs[off..off + f], &g[bi * f..(bi + 1) * f], 1.0);
                }
            }
            Op::StackSteps(steps) => {
                let s = out.shape();
                let (b, n, f) = (s[0], s[1], s[2]);
                for (t, &v) in steps.iter().enumerate() {
                    let gv = accumulate(grads, v, b * f);
                    for bi in 0..b {
                        let off = (bi * n + t) * f;
                        add_into(&mut gv[bi * f..(bi + 1) * f], &g[off..off + f], 1.0);
                    }
                }
            }
            Op::WeightedSum { weights, seq } => {
                let s = self.shape(*seq);
                let (b, n, f) = (s[0], s[1], s[2]);
                let (w, sv) = (self.value(*weights).data(), self.value(*seq).data());
                let gw = accumulate(grads, *weights, b * n);
                for bi in 0..b {
                    let go = &g[bi * f..(bi + 1) * f];
                    for t in 0..n {
                        let row = &sv[(bi * n + t) * f..(bi * n + t + 1) * f];
                        gw[bi * n + t] += go.iter().zip(row).map(|(&a, &r)| a * r).sum::<Float>();
                    }
                }
                let gs = accumulate(grads, *seq, b * n * f);
                for bi in 0..b {
                    let go = &g[bi * f..(bi + 1) * f];
                    for t in 0..n {
                        let wt = w[bi * n + t];
                        add_into(&mut gs[(bi * n + t) * f..(bi * n + t + 1) * f], go, wt);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let (p, bp) = (geom.positions(), geom.batch * geom.positions());
                let kl = geom.patch_len();
                let mut dmat = vec![0.0; geom.c_out * bp];
                let gb = accumulate(grads, *bias, geom.c_out);
                for b in 0..geom.batch {
                    for co in 0..geom.c_out {
                        let src = &g[(b * geom.c_out + co) * p..(b * geom.c_out + co + 1) * p];
                        dmat[co * bp + b * p..co * bp + (b + 1) * p].copy_from_slice(src);
                        gb[co] += src.iter().sum::<Float>();
                    }
                }
                gemm(
                    geom.c_out,
                    bp,
                    kl,
                    &dmat,
                    false,
                    cols,
                    true,
                    accumulate(grads, *kernels, geom.c_out * kl),
                    true,
                );
                let mut dcols = vec![0.0; kl * bp];
                gemm(
                    kl,
                    geom.c_out,
                    bp,
                    self.value(*kernels).data(),
                    true,
                    &dmat,
                    false,
                    &mut dcols,
                    false,
                );
                let n = self.value(*input).len();
                geom.col2im(&dcols, accumulate(grads, *input, n));
            }
            Op::MaxPool { input, argmax } => {
                let n = self.value(*input).len();
                let gx = accumulate(grads, *input, n);
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
            Op::GlobalAvgPool(x) => {
                let n = self.value(*x).len();
                let area = n / g.len();
                let gx = accumulate(grads, *x, n);
                for (chunk, &gv) in gx.chunks_mut(area).zip(g) {
                    let share = gv / area as Float;
                    chunk.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let s = self.shape(*input);
                let (batch, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let count = (batch * spatial) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for i in off..off + spatial {
                            sum_g[ch] += g[i] as f64;
                            sum_gx[ch] += g[i] as f64 * x_hat[i] as f64;
                        }
                    }
                }
                let gamma_v = self.value(*gamma).data();
                let gg = accumulate(grads, *gamma, c);
                for ch in 0..c {
                    gg[ch] += sum_gx[ch] as Float;
                }
                let gbeta = accumulate(grads, *beta, c);
                for ch in 0..c {
                    gbeta[ch] += sum_g[ch] as Float;
                }
                let gx = accumulate(grads, *input, g.len());
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        let k = gamma_v[ch] as f64 * inv_std[ch] as f64;
                        for i in off..off + spatial {
                            let d = if *batch_stats {
                                k * (g[i] as f64 - sum_g[ch] / count - x_hat[i] as f64 * sum_gx[ch] / count)
                            } else {
                                k * g[i] as f64
                            };
                            gx[i] += d as Float;
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let input_grads = op.backward(&values, out, g);
                for (&v, ig) in inputs.iter().zip(input_grads) {
                    let n = self.value(v).len();
                    add_into(accumulate(grads, v, n), &ig, 1.0);
                }
            }
        }
    }
}

fn add_into(dst: &mut [Float], src: &[Float], factor: Float) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Numerically stable softmax of one slice, computed by max subtraction.
pub fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut total = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / total) as Float;
    }
}
