//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a tape. Node
//! indices are therefore already a topological order, and [`Graph::backward`]
//! visits each node once by walking the tape in reverse. Leaves created with
//! [`Graph::param`] accumulate gradients across `backward` calls until
//! [`Graph::zero_grad`]; leaves created with [`Graph::constant`] (and
//! anything computed only from constants) never receive gradient.

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Floor on the masked-pool denominator.
pub const EPS_POOL: f64 = 1e-8;
const EPS_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Gelu,
    Sigmoid,
    Relu,
    Square,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => gelu_grad(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `e^x` by range reduction to `|r| ≤ ln2/2` and a degree-13 Taylor
/// polynomial. Branch-free so loops over it vectorize.
#[inline(always)]
pub fn exp_fast(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 709.0);
    let shifted = x * std::f64::consts::LOG2_E + SHIFTER;
    let k = shifted - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `shifted` hold k in two's complement.
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    p * scale
}

/// `tanh` through [`exp_fast`]; absolute error below `1e-15`.
#[inline(always)]
pub fn tanh_fast(u: f64) -> f64 {
    let e = exp_fast(-2.0 * u.abs());
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + tanh_fast(u))
}

/// GELU derivative given `t = tanh(u(x))`.
#[inline]
fn gelu_grad_t(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline(always)]
fn gelu_forward_body(x: &[f64], out: &mut [f64], t: &mut [f64]) {
    for ((o, th), &v) in out.iter_mut().zip(t.iter_mut()).zip(x) {
        let tt = tanh_fast(SQRT_2_OVER_PI * (v + GELU_C * v * v * v));
        *th = tt;
        *o = 0.5 * v * (1.0 + tt);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gelu_forward_avx2(x: &[f64], out: &mut [f64], t: &mut [f64]) {
    gelu_forward_body(x, out, t)
}

/// Writes GELU values and the inner `tanh` for every element.
fn gelu_forward(x: &[f64], out: &mut [f64], t: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gelu_forward_avx2(x, out, t) };
    }
    gelu_forward_body(x, out, t)
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    gelu_grad_t(x, tanh_fast(u))
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Linear(Var, Var, Var),
    Unary(Var, Unary),
    /// GELU with the inner `tanh` kept for the backward pass.
    Gelu(Var, Vec<f64>),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedMeanPool {
        x: Var,
        weights: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Differentiable computation record.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
}

impl Graph {
    pub fn new(train: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
        }
    }

    pub fn training() -> Self {
        Self::new(true)
    }

    pub fn evaluation() -> Self {
        Self::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x [m,n] + bias [n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().unwrap_or(&0);
        ensure!(
            self.value(bias).numel() == n,
            Dimension,
            "bias of {} entries cannot broadcast over rows of width {n}",
            self.value(bias).numel()
        );
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    /// Affine map `x w + b` with `w [in,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        ensure!(
            xv.ndim() == 2 && wv.ndim() == 2 && xv.shape()[1] == wv.shape()[0],
            Dimension,
            "linear needs x [m,k] and w [k,n], got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        );
        let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        ensure!(
            bv.numel() == n,
            Dimension,
            "bias of {} entries for {n} outputs",
            bv.numel()
        );
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, k, n, xv.data(), false, wv.data(), false, &mut out, true);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Linear(x, w, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            return va.zip_map(vb, f);
        }
        if vb.numel() == 1 {
            let s = vb.item();
            return Ok(va.map(|x| f(x, s)));
        }
        if va.numel() == 1 {
            let s = va.item();
            return Ok(vb.map(|y| f(s, y)));
        }
        Err(Error::Dimension(format!(
            "cannot broadcast {:?} with {:?}",
            va.shape(),
            vb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let v = self.value(x).mul(c)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MulConst(x, c.clone()), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let v = self.value(x).map(|t| kind.apply(t));
        let ng = self.ng(x);
        self.push(v, Op::Unary(x, kind), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.numel();
        let mut out = vec![0.0; n];
        let mut t = vec![0.0; n];
        gelu_forward(xv.data(), &mut out, &mut t);
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.ng(x);
        if !self.train || !ng {
            t = Vec::new();
        }
        self.push(value, Op::Gelu(x, t), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose2()?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Transpose(x), ng))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            ensure!(
                v.shape()[1..] == tail[..],
                Dimension,
                "concat shapes {:?} and {:?} differ past the leading axis",
                self.shape(parts[0]),
                v.shape()
            );
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        ensure!(
            lv.ndim() == 2,
            Dimension,
            "logits must be [B,K], got {:?}",
            lv.shape()
        );
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        ensure!(
            labels.len() == b,
            Dimension,
            "{} labels for a batch of {b}",
            labels.len()
        );
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Domain(format!("label {bad} outside [0,{k})")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, row) in lv.rows().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Per-sample mean of `x [B,T,H]` over timesteps with `obs [B,T] == 1`.
    pub fn masked_mean_pool(&mut self, x: Var, obs: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        ensure!(
            xv.ndim() == 3,
            Dimension,
            "pool input must be [B,T,H], got {:?}",
            xv.shape()
        );
        let (b, t, h) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        ensure!(
            obs.shape() == [b, t],
            Dimension,
            "observation indicator {:?} does not match [{b},{t}]",
            obs.shape()
        );
        let mut weights = vec![0.0; b * t];
        let mut out = vec![0.0; b * h];
        for i in 0..b {
            let o = &obs.data()[i * t..(i + 1) * t];
            let denom = o.iter().sum::<f64>().max(EPS_POOL);
            for s in 0..t {
                let w = o[s] / denom;
                weights[i * t + s] = w;
                if w != 0.0 {
                    let src = &xv.data()[(i * t + s) * h..(i * t + s + 1) * h];
                    for (acc, &v) in out[i * h..(i + 1) * h].iter_mut().zip(src) {
                        *acc += w * v;
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_parts(vec![b, h], out),
            Op::MaskedMeanPool { x, weights },
            ng,
        ))
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.ndim() == 2, Dimension, "normalize_rows needs a matrix");
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(xv.shape()[1]) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(EPS_NORM);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::NormalizeRows { x, norms }, ng))
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0,1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.bernoulli(rate) { 0.0 } else { keep });
        self.mul_const(x, &mask)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into parameter leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("loss")?;
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(a, b)| *a += b),
                        None => {
                            node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.ng(*a) {
                        let ga = slot(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, false, vb.data(), true, ga, true);
                    }
                    if self.ng(*b) {
                        let gb = slot(&mut grads, *b, k * n);
                        gemm(k, m, n, va.data(), true, &g, false, gb, true);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.ng(*x) {
                        add_into(slot(&mut grads, *x, g.len()), &g, 1.0);
                    }
                    if self.ng(*bias) {
                        let n = self.nodes[bias.0].value.numel();
                        let gb = slot(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            add_into(gb, row, 1.0);
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (v, s) in [(*a, 1.0), (*b, sign)] {
                        if self.ng(v) {
                            let n = self.nodes[v.0].value.numel();
                            reduce_into(slot(&mut grads, v, n), &g, s);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.ng(v) {
                            let n = self.nodes[v.0].value.numel();
                            let ov = self.nodes[other.0].value.data();
                            let prod: Vec<f64> = if ov.len() == 1 {
                                g.iter().map(|x| x * ov[0]).collect()
                            } else {
                                g.iter().zip(ov).map(|(x, y)| x * y).collect()
                            };
                            reduce_into(slot(&mut grads, v, n), &prod, 1.0);
                        }
                    }
                }
                Op::MulConst(x, c) => {
                    let gx = slot(&mut grads, *x, g.len());
                    for ((acc, gv), cv) in gx.iter_mut().zip(&g).zip(c.data()) {
                        *acc += gv * cv;
                    }
                }
                Op::Scale(x, s) => add_into(slot(&mut grads, *x, g.len()), &g, *s),
                Op::Linear(x, w, b) => {
                    let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
                    if self.ng(*x) {
                        let gx = slot(&mut grads, *x, m * k);
                        gemm(m, n, k, &g, false, vw.data(), true, gx, true);
                    }
                    if self.ng(*w) {
                        let gw = slot(&mut grads, *w, k * n);
                        gemm(k, m, n, vx.data(), true, &g, false, gw, true);
                    }
                    if self.ng(*b) {
                        let gb = slot(&mut grads, *b, n);
                        for row in g.chunks(n) {
                            add_into(gb, row, 1.0);
                        }
                    }
                }
                Op::Gelu(x, t) => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    if t.is_empty() {
                        for ((acc, gv), &xi) in gx.iter_mut().zip(&g).zip(xv) {
                            *acc += gv * gelu_grad(xi);
                        }
                    } else {
                        for (((acc, gv), &xi), &ti) in gx.iter_mut().zip(&g).zip(xv).zip(t) {
                            *acc += gv * gelu_grad_t(xi, ti);
                        }
                    }
                }
                Op::Unary(x, kind) => {
                    let xv = self.nodes[x.0].value.data();
                    let yv = node.value.data();
                    let gx = slot(&mut grads, *x, g.len());
                    for (((acc, gv), &xi), &yi) in gx.iter_mut().zip(&g).zip(xv).zip(yv) {
                        *acc += gv * kind.derivative(xi, yi);
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    slot(&mut grads, *x, n).iter_mut().for_each(|a| *a += g[0]);
                }
                Op::Reshape(x) => add_into(slot(&mut grads, *x, g.len()), &g, 1.0),
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    let (r, c) = (s[0], s[1]);
                    let gx = slot(&mut grads, *x, g.len());
                    // node value is [r,c]; x is [c,r]
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.numel();
                        if self.ng(*p) {
                            add_into(slot(&mut grads, *p, n), &g[offset..offset + n], 1.0);
                        }
                        offset += n;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let gl = slot(&mut grads, *logits, probs.len());
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
                Op::MaskedMeanPool { x, weights } => {
                    let xs = self.nodes[x.0].value.shape();
                    let (b, t, h) = (xs[0], xs[1], xs[2]);
                    let gx = slot(&mut grads, *x, b * t * h);
                    for i in 0..b {
                        let gi = &g[i * h..(i + 1) * h];
                        for s in 0..t {
                            let w = weights[i * t + s];
                            if w != 0.0 {
                                let dst = &mut gx[(i * t + s) * h..(i * t + s + 1) * h];
                                add_into(dst, gi, w);
                            }
                        }
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.data();
                    let d = node.value.shape()[1];
                    let gx = slot(&mut grads, *x, y.len());
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Adds `s * src` into `dst`, summing when `dst` is a broadcast scalar.
fn reduce_into(dst: &mut [f64], src: &[f64], s: f64) {
    if dst.len() == 1 && src.len() != 1 {
        dst[0] += s * src.iter().sum::<f64>();
    } else {
        add_into(dst, src, s);
    }
}
