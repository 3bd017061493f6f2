//! Reverse-mode gradient tape.
//!
//! Every op appends one node holding its forward value and enough saved state
//! to form the vector-Jacobian product. `backward` consumes the tape and walks
//! the nodes once, newest first.

use super::kernels::{self, ConvGeometry};
use super::ops::{conv_geometry, dense_dims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<f64>,
        geometry: ConvGeometry,
    },
    Relu(Var),
    Dense {
        x: Var,
        weights: Var,
        bias: Var,
    },
    Reshape(Var),
    Columns {
        x: Var,
        start: usize,
        len: usize,
    },
    Softplus(Var),
    AddScalar(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    GaussianNll {
        mu: Var,
        sigma2: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    loss: f64,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf that requires grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Node indices whose VJP was evaluated, in visiting order.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor; its `requires_grad` flag decides whether a
    /// gradient is produced for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geometry = conv_geometry(x, k, b)?;
        let cols = kernels::im2col(x.data(), &geometry);
        let out = kernels::conv_forward(&cols, k.data(), b.data(), &geometry);
        let shape = vec![
            geometry.batch,
            geometry.out_channels,
            geometry.height,
            geometry.width,
        ];
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            cols,
            geometry,
        };
        self.push_checked("conv2d", Tensor::from_parts(shape, out), op, &[input, kernel, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = super::ops::relu(self.value(x));
        self.push_checked("relu", value, Op::Relu(x), &[x])
    }

    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weights), self.value(bias));
        let (n, f, o) = dense_dims(xv, wv, bv)?;
        let out = kernels::dense_forward(xv.data(), wv.data(), bv.data(), n, f, o);
        let op = Op::Dense { x, weights, bias };
        self.push_checked("dense", Tensor::from_parts(vec![n, o], out), op, &[x, weights, bias])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let value = super::ops::flatten(self.value(x))?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Columns `start..start+len` of a `[N, F]` matrix.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let &[n, f] = xv.shape() else {
            return Err(Error::shape("columns", format!("expected [N, F], got {:?}", xv.shape())));
        };
        if len == 0 || start + len > f {
            return Err(Error::shape(
                "columns",
                format!("range {start}..{} outside {f} columns", start + len),
            ));
        }
        let mut out = Vec::with_capacity(n * len);
        for row in xv.data().chunks_exact(f) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor::from_parts(vec![n, len], out), Op::Columns { x, start, len }, rg))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = super::ops::softplus(self.value(x));
        self.push_checked("softplus", value, Op::Softplus(x), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v + c).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * v).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked("square", value, Op::Square(x), &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_checked(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push_checked("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean over all elements of `½ln(2πσ²) + (y−μ)²/(2σ²)`.
    pub fn gaussian_nll(&mut self, mu: Var, sigma2: Var, target: &[f64]) -> Result<Var> {
        self.same_shape("gaussian_nll", mu, sigma2)?;
        let (m, s) = (self.value(mu), self.value(sigma2));
        if target.len() != m.numel() {
            return Err(Error::shape(
                "gaussian_nll",
                format!("target has {} values, predictions {}", target.len(), m.numel()),
            ));
        }
        if let Some(bad) = s.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::OutOfRange(format!("variance must be positive, got {bad}")));
        }
        let value = nll_mean(m.data(), s.data(), target);
        let op = Op::GaussianNll {
            mu,
            sigma2,
            target: target.to_vec(),
        };
        self.push_checked("gaussian_nll", Tensor::scalar(value), op, &[mu, sigma2])
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let loss_value = loss_node.value.data()[0];

        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();

        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            visited.push(idx);
            let needs = |v: Var, nodes: &[Node]| nodes[v.0].requires_grad;
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cols,
                    geometry: geom,
                } => {
                    let dmat = kernels::conv_grad_matrix(&g, &geom);
                    let ncols = geom.columns();
                    if needs(kernel, &nodes) {
                        let mut dk = vec![0.0; geom.out_channels * geom.patch_len()];
                        kernels::gemm(
                            geom.out_channels,
                            ncols,
                            geom.patch_len(),
                            &dmat,
                            false,
                            &cols,
                            true,
                            0.0,
                            &mut dk,
                        );
                        accumulate(&mut grads, kernel, dk);
                    }
                    if needs(bias, &nodes) {
                        let db = dmat.chunks_exact(ncols).map(|r| r.iter().sum()).collect();
                        accumulate(&mut grads, bias, db);
                    }
                    if needs(input, &nodes) {
                        let mut dcols = vec![0.0; geom.patch_len() * ncols];
                        kernels::gemm(
                            geom.patch_len(),
                            geom.out_channels,
                            ncols,
                            nodes[kernel.0].value.data(),
                            true,
                            &dmat,
                            false,
                            0.0,
                            &mut dcols,
                        );
                        accumulate(&mut grads, input, kernels::col2im(dcols, &geom));
                    }
                }
                Op::Relu(x) => {
                    let xv = nodes[x.0].value.data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::Dense { x, weights, bias } => {
                    let (n, f) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let o = nodes[bias.0].value.numel();
                    if needs(weights, &nodes) {
                        let mut dw = vec![0.0; f * o];
                        kernels::gemm(f, n, o, nodes[x.0].value.data(), true, &g, false, 0.0, &mut dw);
                        accumulate(&mut grads, weights, dw);
                    }
                    if needs(bias, &nodes) {
                        let mut db = vec![0.0; o];
                        for row in g.chunks_exact(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, bias, db);
                    }
                    if needs(x, &nodes) {
                        let mut dx = vec![0.0; n * f];
                        kernels::gemm(n, o, f, &g, false, nodes[weights.0].value.data(), true, 0.0, &mut dx);
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Reshape(x) => accumulate(&mut grads, x, g),
                Op::Columns { x, start, len } => {
                    let f = nodes[x.0].value.shape()[1];
                    let mut dx = vec![0.0; nodes[x.0].value.numel()];
                    for (drow, grow) in dx.chunks_exact_mut(f).zip(g.chunks_exact(len)) {
                        drow[start..start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Softplus(x) => {
                    let xv = nodes[x.0].value.data();
                    let dx = g.iter().zip(xv).map(|(g, &v)| g * kernels::sigmoid(v)).collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::AddScalar(x) => accumulate(&mut grads, x, g),
                Op::Square(x) => {
                    let xv = nodes[x.0].value.data();
                    let dx = g.iter().zip(xv).map(|(g, v)| 2.0 * v * g).collect();
                    accumulate(&mut grads, x, dx);
                }
                Op::Add(a, b) => {
                    if needs(a, &nodes) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b, &nodes) {
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a, &nodes) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if needs(b, &nodes) {
                        accumulate(&mut grads, b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a, &nodes) {
                        let bv = nodes[b.0].value.data();
                        accumulate(&mut grads, a, g.iter().zip(bv).map(|(g, v)| g * v).collect());
                    }
                    if needs(b, &nodes) {
                        let av = nodes[a.0].value.data();
                        accumulate(&mut grads, b, g.iter().zip(av).map(|(g, v)| g * v).collect());
                    }
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.numel();
                    accumulate(&mut grads, x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel();
                    accumulate(&mut grads, x, vec![g[0] / n as f64; n]);
                }
                Op::GaussianNll { mu, sigma2, target } => {
                    let (m, s) = (nodes[mu.0].value.data(), nodes[sigma2.0].value.data());
                    let scale = g[0] / m.len() as f64;
                    if needs(mu, &nodes) {
                        let dm = m
                            .iter()
                            .zip(s)
                            .zip(&target)
                            .map(|((m, s), y)| scale * (m - y) / s)
                            .collect();
                        accumulate(&mut grads, mu, dm);
                    }
                    if needs(sigma2, &nodes) {
                        let ds = m
                            .iter()
                            .zip(s)
                            .zip(&target)
                            .map(|((m, s), y)| {
                                let r = y - m;
                                scale * (0.5 / s - 0.5 * r * r / (s * s))
                            })
                            .collect();
                        accumulate(&mut grads, sigma2, ds);
                    }
                }
            }
        }

        Ok(Gradients {
            grads: leaf_grads,
            loss: loss_value,
            visited,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn nll_mean(mu: &[f64], sigma2: &[f64], y: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let total: f64 = mu
        .iter()
        .zip(sigma2)
        .zip(y)
        .map(|((m, s), y)| {
            let r = y - m;
            half_ln_2pi + 0.5 * s.ln() + r * r / (2.0 * s)
        })
        .sum();
    total / mu.len() as f64
}
