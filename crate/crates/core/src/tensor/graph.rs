use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvDims, ConvGeometry};
use super::{Tensor, NEG_INF};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Scalar `exp`/`ln` used by the graph's activation primitives.
///
/// The default is the exact libm pair; inference can swap in a lookup table.
pub trait Activations: Send + Sync {
    fn exp(&self, x: f64) -> f64;
    fn ln(&self, x: f64) -> f64;
}

/// Layout of a max-plus correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxPlusGeometry {
    /// `x: batch × n`, `v: m × n`.
    Dense,
    /// `x: batch × c × h × w`, `v: o × c × kh × kw`.
    Conv(ConvGeometry),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Sum(Var),
    Reshape(Var),
    MaxAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    MatMul(Var, Var),
    Linear(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        dims: ConvDims,
    },
    AddBias {
        x: Var,
        b: Var,
        inner: usize,
    },
    MaxPool {
        x: Var,
        plane_in: usize,
        plane_out: usize,
        argmax: Vec<u32>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Softmax(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MaxPlusDense {
        x: Var,
        v: Var,
        batch: usize,
        n: usize,
        m: usize,
        argmax: Vec<u32>,
    },
    MaxPlusConv {
        x: Var,
        v: Var,
        dims: ConvDims,
        argmax: Vec<u32>,
    },
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// also a topological order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    activations: Option<Arc<dyn Activations>>,
    saturated: usize,
    maxplus_outputs: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose `exp`/`ln` primitives use `acts` instead of the exact functions.
    pub fn with_activations(acts: Arc<dyn Activations>) -> Self {
        Self {
            activations: Some(acts),
            ..Self::default()
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(clamped, total)` max-plus outputs produced so far.
    pub fn saturation(&self) -> (usize, usize) {
        (self.saturated, self.maxplus_outputs)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.values[x.0].map(f);
        let rg = self.requires_grad[x.0];
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise difference. `NEG_INF - NEG_INF` is undefined and panics.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                assert!(
                    !(x == NEG_INF && y == NEG_INF),
                    "NEG_INF - NEG_INF is undefined"
                );
                x - y
            })
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Natural log with `ln(0) = NEG_INF`; negative inputs are a domain error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self.values[x.0]
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v < 0.0)
        {
            return Err(Error::LogDomain { index, value });
        }
        let acts = self.activations.clone();
        let f = move |v: f64| {
            if v == 0.0 {
                NEG_INF
            } else if let Some(a) = &acts {
                a.ln(v)
            } else {
                v.ln()
            }
        };
        Ok(self.unary(x, f, Op::Ln(x)))
    }

    /// Natural exp with `exp(NEG_INF) = 0`.
    pub fn exp(&mut self, x: Var) -> Var {
        let acts = self.activations.clone();
        let f = move |v: f64| {
            if v == NEG_INF {
                0.0
            } else if let Some(a) = &acts {
                a.exp(v)
            } else {
                v.exp()
            }
        };
        self.unary(x, f, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        let rg = self.requires_grad[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.values[x.0].reshape(shape)?;
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.values[x.0].shape();
        let b = shape.first().copied().unwrap_or(1);
        let rest: usize = shape.iter().skip(1).product();
        self.reshape(x, &[b, rest])
    }

    /// Max reduction along `axis`; the lowest index wins ties and receives
    /// the whole subgradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.values[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "max_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.values[x.0].data();
        let mut out = vec![NEG_INF; outer * inner];
        let mut argmax = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let slot = o * inner + i;
                for j in 0..len {
                    let v = src[(o * len + j) * inner + i];
                    if j == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = j as u32;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires_grad[x.0];
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MaxAxis {
                x,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    /// `a: m × k` times `b: k × n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            (k, 1),
            self.values[b.0].data(),
            (n, 1),
            0.0,
            &mut out,
            (n, 1),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Fully-connected product `x · wᵀ` for `x: batch × n`, `w: m × n`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.values[x.0].shape(), self.values[w.0].shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let (b, n, m) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; b * m];
        kernels::gemm(
            b,
            n,
            m,
            self.values[x.0].data(),
            (n, 1),
            self.values[w.0].data(),
            (1, n),
            0.0,
            &mut out,
            (m, 1),
        );
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::from_parts(vec![b, m], out), Op::Linear(x, w), rg))
    }

    /// 2-D correlation of `x: batch × c × h × w` with `w: o × c × kh × kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::new(
            self.values[x.0].shape(),
            self.values[w.0].shape(),
            geom,
            "conv2d",
        )?;
        let out = kernels::conv2d_forward(self.values[x.0].data(), self.values[w.0].data(), &dims);
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(
            Tensor::from_parts(dims.out_shape(), out),
            Op::Conv2d { x, w, dims },
            rg,
        ))
    }

    /// Adds `b[c]` to every element of channel/unit `c` (dimension 1).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.values[x.0].shape(), self.values[b.0].shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::shape("add_bias", format!("input {sx:?}, bias {sb:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let channels = sx[1];
        let bias = self.values[b.0].data();
        let mut data = self.values[x.0].data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::from_parts(sx.to_vec(), data);
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b, inner }, rg))
    }

    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let shape = self.values[x.0].shape().to_vec();
        if shape.len() != 4 || kh == 0 || kw == 0 || shape[2] < kh || shape[3] < kw {
            return Err(Error::shape(
                "max_pool",
                format!("window {kh}x{kw} on input {shape:?}"),
            ));
        }
        let (out_shape, out, argmax) = kernels::maxpool_forward(self.values[x.0].data(), &shape, kh, kw);
        let plane_in = shape[2] * shape[3];
        let plane_out = out_shape[2] * out_shape[3];
        let rg = self.requires_grad[x.0];
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MaxPool {
                x,
                plane_in,
                plane_out,
                argmax,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Only meant for training passes.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let n = self.values[x.0].numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = if p == 0.0 {
            vec![1.0; n]
        } else {
            // Keep when a uniform 32-bit draw falls below keep · 2³².
            let threshold = (keep * 4_294_967_296.0) as u64;
            (0..n)
                .map(|_| if (rng.next_u32() as u64) < threshold { 1.0 / keep } else { 0.0 })
                .collect()
        };
        let src = &self.values[x.0];
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.requires_grad[x.0];
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise softmax of a `batch × classes` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.values[x.0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("softmax", format!("expected 2-D, got {shape:?}")));
        }
        let probs = softmax_rows(self.values[x.0].data(), shape[1]);
        let rg = self.requires_grad[x.0];
        Ok(self.push(Tensor::from_parts(shape, probs), Op::Softmax(x), rg))
    }

    /// Mean softmax cross-entropy of `logits: batch × classes` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.values[logits.0].shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.values[logits.0].data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -(probs[b * k + l].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.requires_grad[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Max-plus correlation `out_k = max_l (x_l + v_kl)`, differentiable by
    /// routing each output's gradient to its (lowest-index) argmax.
    ///
    /// Outputs above `ln(f64::MAX) - 1` are clamped and counted in
    /// [`Graph::saturation`].
    pub fn maxplus(&mut self, x: Var, v: Var, geometry: MaxPlusGeometry) -> Result<Var> {
        let (sx, sv) = (self.values[x.0].shape(), self.values[v.0].shape());
        let rg = self.any_grad(&[x, v]);
        match geometry {
            MaxPlusGeometry::Dense => {
                if sx.len() != 2 || sv.len() != 2 || sx[1] != sv[1] {
                    return Err(Error::shape(
                        "maxplus",
                        format!("input {sx:?}, weights {sv:?}"),
                    ));
                }
                let (batch, n, m) = (sx[0], sx[1], sv[0]);
                let out = kernels::maxplus_dense_forward(
                    self.values[x.0].data(),
                    self.values[v.0].data(),
                    batch,
                    n,
                    m,
                );
                self.saturated += out.saturated;
                self.maxplus_outputs += out.values.len();
                Ok(self.push(
                    Tensor::from_parts(vec![batch, m], out.values),
                    Op::MaxPlusDense {
                        x,
                        v,
                        batch,
                        n,
                        m,
                        argmax: out.argmax,
                    },
                    rg,
                ))
            }
            MaxPlusGeometry::Conv(geom) => {
                let dims = ConvDims::new(sx, sv, geom, "maxplus")?;
                let out = kernels::maxplus_conv_forward(
                    self.values[x.0].data(),
                    self.values[v.0].data(),
                    &dims,
                );
                self.saturated += out.saturated;
                self.maxplus_outputs += out.values.len();
                Ok(self.push(
                    Tensor::from_parts(dims.out_shape(), out.values),
                    Op::MaxPlusConv {
                        x,
                        v,
                        dims,
                        argmax: out.argmax,
                    },
                    rg,
                ))
            }
        }
    }

    /// Populates `∂loss/∂v` for every gradient-tracking node reachable from
    /// `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.values[loss.0].shape();
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, node: usize, g: &[f64]) {
        let values = &self.values;
        let req = &self.requires_grad;
        let grads = &mut self.grads;
        macro_rules! buf {
            ($v:expr) => {
                grad_buf(&mut *grads, req, values, $v)
            };
        }
        let out = values[node].data();
        match &self.ops[node] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = buf!(v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = buf!(*a) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if let Some(d) = buf!(*a) {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                }
                if let Some(d) = buf!(*b) {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                }
            }
            Op::Neg(x) => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Relu(x) => {
                let vx = values[x.0].data();
                if let Some(d) = buf!(*x) {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Ln(x) => {
                let vx = values[x.0].data();
                if let Some(d) = buf!(*x) {
                    // ln(0) = NEG_INF carries no gradient.
                    for i in 0..d.len() {
                        if vx[i] > 0.0 && g[i] != 0.0 {
                            d[i] += g[i] / vx[i];
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(d) = buf!(*x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * out[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = buf!(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = buf!(*x) {
                    add_into(d, g);
                }
            }
            Op::MaxAxis {
                x,
                outer,
                len,
                inner,
                argmax,
            } => {
                if let Some(d) = buf!(*x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let slot = o * inner + i;
                            d[(o * len + argmax[slot] as usize) * inner + i] += g[slot];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if let Some(d) = buf!(*a) {
                    // da[m×k] += g[m×n] · bᵀ[n×k]
                    kernels::gemm(m, n, k, g, (n, 1), vb, (1, n), 1.0, d, (k, 1));
                }
                if let Some(d) = buf!(*b) {
                    // db[k×n] += aᵀ[k×m] · g[m×n]
                    kernels::gemm(k, m, n, va, (1, k), g, (n, 1), 1.0, d, (n, 1));
                }
            }
            Op::Linear(x, w) => {
                let (sx, sw) = (values[x.0].shape(), values[w.0].shape());
                let (b, n, m) = (sx[0], sx[1], sw[0]);
                let (vx, vw) = (values[x.0].data(), values[w.0].data());
                if let Some(d) = buf!(*x) {
                    // dx[b×n] += g[b×m] · w[m×n]
                    kernels::gemm(b, m, n, g, (m, 1), vw, (n, 1), 1.0, d, (n, 1));
                }
                if let Some(d) = buf!(*w) {
                    // dw[m×n] += gᵀ[m×b] · x[b×n]
                    kernels::gemm(m, b, n, g, (1, m), vx, (n, 1), 1.0, d, (n, 1));
                }
            }
            Op::Conv2d { x, w, dims } => {
                let (need_dx, need_dw) = (req[x.0], req[w.0]);
                let (dx, dw) = kernels::conv2d_backward(
                    values[x.0].data(),
                    values[w.0].data(),
                    g,
                    dims,
                    need_dx,
                    need_dw,
                );
                if let (Some(src), Some(d)) = (dx, buf!(*x)) {
                    add_into(d, &src);
                }
                if let (Some(src), Some(d)) = (dw, buf!(*w)) {
                    add_into(d, &src);
                }
            }
            Op::AddBias { x, b, inner } => {
                if let Some(d) = buf!(*x) {
                    add_into(d, g);
                }
                if let Some(d) = buf!(*b) {
                    let channels = d.len();
                    for (i, chunk) in g.chunks(*inner).enumerate() {
                        d[i % channels] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MaxPool {
                x,
                plane_in,
                plane_out,
                argmax,
            } => {
                if let Some(d) = buf!(*x) {
                    for (i, (&a, gv)) in argmax.iter().zip(g).enumerate() {
                        let plane = i / plane_out;
                        d[plane * plane_in + a as usize] += gv;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = buf!(*x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Softmax(x) => {
                let k = values[x.0].shape()[1];
                if let Some(d) = buf!(*x) {
                    for (row, (yr, gr)) in out.chunks(k).zip(g.chunks(k)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..k {
                            d[row * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let k = values[logits.0].shape()[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = buf!(*logits) {
                    for (b, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            d[b * k + j] += scale * (probs[b * k + j] - target);
                        }
                    }
                }
            }
            Op::MaxPlusDense {
                x,
                v,
                batch,
                n,
                m,
                argmax,
            } => {
                let (x, v) = (*x, *v);
                // Two separate buffers; x and v are distinct nodes.
                let mut dx = buf!(x).map(std::mem::take);
                let mut dv = buf!(v).map(std::mem::take);
                kernels::maxplus_dense_backward(
                    argmax,
                    g,
                    *batch,
                    *n,
                    *m,
                    dx.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dv {
                    grads[v.0] = Some(d);
                }
            }
            Op::MaxPlusConv { x, v, dims, argmax } => {
                let (x, v) = (*x, *v);
                let mut dx = buf!(x).map(std::mem::take);
                let mut dv = buf!(v).map(std::mem::take);
                kernels::maxplus_conv_backward(
                    argmax,
                    g,
                    dims,
                    dx.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dv {
                    grads[v.0] = Some(d);
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` if untracked.
fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    req: &[bool],
    values: &[Tensor],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    if !req[v.0] {
        return None;
    }
    let n = values[v.0].numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().copied().fold(NEG_INF, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}
