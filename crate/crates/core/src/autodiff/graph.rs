//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! creation order, so the node list is already a topological order and
//! [`Graph::backward`] simply walks it in reverse.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Softplus(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    MeanPerSample(Var),
    Reshape(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    FrobeniusNorm(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        out_ch: usize,
    },
    ConvT2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        in_ch: usize,
    },
    ConcatChannels(Var, Var),
    Upsample(Var, usize),
    GaussianSample {
        mu: Var,
        logvar: Var,
        eps: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Slope of `leaky_relu` on the negative side.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf bound to a parameter; repeated calls with the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(value, Op::Offset(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Leaky ReLU; the derivative at exactly 0 takes the positive-side slope.
    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x >= 0.0 { x } else { LEAKY_SLOPE * x },
            Op::LeakyRelu(a, LEAKY_SLOPE),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let ng = self.needs(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    fn per_sample(&mut self, a: Var, mean: bool) -> Var {
        let t = self.value(a);
        let b = t.batch();
        let per = t.numel() / b;
        let data = t
            .data()
            .chunks(per)
            .map(|c| {
                let s: f64 = c.iter().sum();
                if mean {
                    s / per as f64
                } else {
                    s
                }
            })
            .collect();
        let value = Tensor::new(vec![b], data).expect("batch shape");
        let ng = self.needs(a);
        let op = if mean {
            Op::MeanPerSample(a)
        } else {
            Op::SumPerSample(a)
        };
        self.push(value, op, ng)
    }

    /// Sum over every axis but the leading one; result has shape `(batch,)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        self.per_sample(a, false)
    }

    /// Mean over every axis but the leading one; result has shape `(batch,)`.
    pub fn mean_per_sample(&mut self, a: Var) -> Var {
        self.per_sample(a, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (rows, inner, out) = kernels::dense_dims(x, w, b)?;
        let data = kernels::dense_forward(x.data(), w.data(), b.data(), rows, inner, out);
        let value = Tensor::new(vec![rows, out], data)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Dense { input, weight, bias }, ng))
    }

    /// Product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("operands must be 2-D, got {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        };
        let (m, k, k2, n) = (*m, *k, *k2, *n);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = *t.shape() else {
            return Err(Error::shape("transpose", format!("expected 2-D, got {:?}", t.shape())));
        };
        let value = Tensor::new(vec![c, r], transpose(t.data(), r, c))?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    /// Unsquared Frobenius norm; its gradient at the origin is taken as zero.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = self.needs(a);
        self.push(Tensor::scalar(n), Op::FrobeniusNorm(a), ng)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (geom, out_ch) = kernels::conv2d_geom(x, w, b, stride, padding)?;
        let data = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom, out_ch);
        let value = Tensor::new(vec![geom.batch, out_ch, geom.out_h, geom.out_w], data)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch,
            },
            ng,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (geom, out_ch) = kernels::conv_t_geom(x, w, b, stride, padding)?;
        let in_ch = x.shape()[1];
        let data = kernels::conv_t_forward(x.data(), w.data(), b.data(), &geom, in_ch);
        let value = Tensor::new(vec![geom.batch, out_ch, geom.in_h, geom.in_w], data)?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::ConvT2d {
                input,
                weight,
                bias,
                geom,
                in_ch,
            },
            ng,
        ))
    }

    /// Channelwise concatenation of two `(B, C, H, W)` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("cannot concatenate {sa:?} with {sb:?}"),
            ));
        }
        let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
        let plane = sa[2] * sa[3];
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..batch {
            data.extend_from_slice(&ta.data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![batch, ca + cb, sa[2], sa[3]], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatChannels(a, b), ng))
    }

    /// Nearest-neighbour upsampling of a `(B, C, H, W)` map by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let t = self.value(a);
        let [b, c, h, w] = *t.shape() else {
            return Err(Error::shape(
                "upsample_nearest",
                format!("expected 4-D, got {:?}", t.shape()),
            ));
        };
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            let src = &t.data()[p * h * w..][..h * w];
            let dst = &mut data[p * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = src[(y / factor) * w + x / factor];
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], data)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Upsample(a, factor), ng))
    }

    /// Reparameterized draw `mu + exp(logvar / 2) * eps` with `eps` from `rng`.
    ///
    /// Gradients reach `mu` and `logvar`; `eps` is a constant of the node.
    pub fn gaussian_sample(&mut self, mu: Var, logvar: Var, rng: &mut SeedStream) -> Result<Var> {
        self.same_shape("gaussian_sample", mu, logvar)?;
        let eps = rng.normals(self.value(mu).numel());
        let (m, lv) = (self.value(mu), self.value(logvar));
        let data = m
            .data()
            .iter()
            .zip(lv.data())
            .zip(&eps)
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let value = Tensor::new(m.shape().to_vec(), data)?;
        let ng = self.needs(mu) || self.needs(logvar);
        Ok(self.push(value, Op::GaussianSample { mu, logvar, eps }, ng))
    }

    /// Accumulates `d root / d param` into the gradients of `params`.
    ///
    /// Gradients are added to whatever the store already holds; call
    /// [`ParamStore::zero_grads`] first for a fresh gradient.
    pub fn backward(&self, root: Var, params: &mut ParamStore) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, params);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut ParamStore) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();

        match &node.op {
            Op::Constant => {}
            Op::Param(name) => params.accumulate(name, g),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
            Op::Offset(a) | Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                    .collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Softplus(a) => send(*a, g.iter().zip(val(*a)).map(|(g, &x)| g * sigmoid(x)).collect()),
            Op::Silu(a) => send(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect(),
            ),
            Op::Square(a) => send(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumPerSample(a) | Op::MeanPerSample(a) => {
                let n = val(*a).len();
                let per = n / g.len();
                let scale = if matches!(node.op, Op::MeanPerSample(_)) {
                    1.0 / per as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; n];
                for (chunk, &gi) in d.chunks_mut(per).zip(g) {
                    chunk.fill(gi * scale);
                }
                send(*a, d);
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                let rows = x.shape()[0];
                let inner = x.numel() / rows;
                let outd = w.shape()[0];
                if self.needs(*input) {
                    let mut dx = vec![0.0; rows * inner];
                    kernels::gemm(rows, outd, inner, g, false, w.data(), false, 0.0, &mut dx);
                    send(*input, dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; outd * inner];
                    kernels::gemm(outd, rows, inner, g, true, x.data(), false, 0.0, &mut dw);
                    send(*weight, dw);
                }
                let mut db = vec![0.0; outd];
                for r in g.chunks(outd) {
                    db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                send(*bias, db);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, tb.data(), true, 0.0, &mut da);
                    send(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, ta.data(), true, g, false, 0.0, &mut db);
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                send(*a, transpose(g, s[0], s[1]));
            }
            Op::FrobeniusNorm(a) => {
                let norm = out[0];
                let d = if norm > 0.0 {
                    val(*a).iter().map(|x| g[0] * x / norm).collect()
                } else {
                    vec![0.0; val(*a).len()]
                };
                send(*a, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch,
            } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*input), val(*weight), g, geom, *out_ch, self.needs(*input));
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                send(*weight, dw);
                send(*bias, db);
            }
            Op::ConvT2d {
                input,
                weight,
                bias,
                geom,
                in_ch,
            } => {
                let (dx, dw, db) =
                    kernels::conv_t_backward(val(*input), val(*weight), g, geom, *in_ch, self.needs(*input));
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                send(*weight, dw);
                send(*bias, db);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (batch, ca, cb) = (sa[0], sa[1], sb[1]);
                let plane = sa[2] * sa[3];
                let mut da = Vec::with_capacity(batch * ca * plane);
                let mut dbv = Vec::with_capacity(batch * cb * plane);
                for chunk in g.chunks((ca + cb) * plane) {
                    da.extend_from_slice(&chunk[..ca * plane]);
                    dbv.extend_from_slice(&chunk[ca * plane..]);
                }
                send(*a, da);
                send(*b, dbv);
            }
            Op::Upsample(a, f) => {
                let s = self.nodes[a.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * f, w * f);
                let mut d = vec![0.0; val(*a).len()];
                for (p, dst) in d.chunks_mut(h * w).enumerate() {
                    let src = &g[p * oh * ow..][..oh * ow];
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[(y / f) * w + x / f] += src[y * ow + x];
                        }
                    }
                }
                send(*a, d);
            }
            Op::GaussianSample { mu, logvar, eps } => {
                send(*mu, g.to_vec());
                let lv = val(*logvar);
                send(
                    *logvar,
                    g.iter()
                        .zip(lv)
                        .zip(eps)
                        .map(|((g, &lv), e)| g * e * 0.5 * (0.5 * lv).exp())
                        .collect(),
                );
            }
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
