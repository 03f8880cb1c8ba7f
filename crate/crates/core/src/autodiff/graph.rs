//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward pass. Nodes only reference earlier nodes, so a single
//! reverse sweep over the tape visits each node after all of its consumers.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::attention::{self, AttnSegment};
use crate::autodiff::real::{gemm, MatMut, MatRef};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a loss op reduces its per-element terms.
#[derive(Clone, Debug)]
pub enum Reduction<F> {
    /// Mean over every element.
    Mean,
    /// `sum_r w_r * sum_c term(r, c)` with one weight per row.
    RowWeighted(Vec<F>),
}

#[derive(Debug)]
enum Op<F> {
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
    Scale(Var, F),
    Sum(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: Arc<[AttnSegment]>,
        probs: Vec<F>,
    },
    SqErr {
        pred: Var,
        target: Var,
        reduction: Reduction<F>,
    },
    Bce {
        p: Var,
        y: Var,
        eps: F,
        reduction: Reduction<F>,
    },
    BceLogits {
        z: Var,
        y: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    /// Persistent accumulator; only leaves that require grad carry one.
    grad: Option<Tensor<F>>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

// tanh approximation
fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x);
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(name));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_arc(&mut self, value: Arc<Tensor<F>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; shares storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.leaf_arc(value, true)
    }

    pub fn input(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf_arc(Arc::new(value), false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<F>>) -> Var {
        self.leaf_arc(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    /// Drop every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            F::zero(),
            MatMut::row_major(&mut out, m, n),
        );
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (fan_in, fan_out) = self.matrix(w, "linear")?;
        let cols = *xs.last().unwrap_or(&1);
        if cols != fan_in {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs,
                rhs: vec![fan_in, fan_out],
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::Dimension {
                    op: "linear",
                    lhs: vec![fan_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![F::zero(); rows * fan_out];
        gemm(
            MatRef::row_major(self.value(x).data(), rows, fan_in),
            MatRef::row_major(self.value(w).data(), fan_in, fan_out),
            F::zero(),
            MatMut::row_major(&mut out, rows, fan_out),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                add_into(row, bias);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("linear input has an axis") = fan_out;
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg, "linear")
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg, "softmax")
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        for p in gamma.iter().chain(beta.iter()) {
            if self.shape(*p) != [cols] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: v.shape().to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let rows = v.rows();
        let n = F::of(cols as f64);
        let eps = F::of(eps);
        let mut out = vec![F::zero(); v.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = gamma.map(|g| self.value(g).data());
        let b = beta.map(|b| self.value(b).data());
        for (src, dst) in v.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mean = src.iter().copied().sum::<F>() / n;
            let var = src.iter().map(|&s| (s - mean) * (s - mean)).sum::<F>() / n;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
                let mut y = (s - mean) * rstd;
                if let Some(g) = g {
                    y = y * g[j];
                }
                if let Some(b) = b {
                    y += b[j];
                }
                *d = y;
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        let rg = self.rg(&parents);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
            "layer_norm",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| gelu_parts(x).0).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| sigmoid(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
    /// Returns `x` unchanged when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let v = self.value(x);
        let mask: Vec<F> = (0..v.len())
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg, "dropout")
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q: [Rq, d]`, `k, v: [Rk, d]`. Each segment maps a block of query rows
    /// to a block of key rows; with `causal` set, query row `i` of a segment
    /// sees key rows `0..=q_offset + i` of that segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: Arc<[AttnSegment]>,
    ) -> Result<Var> {
        let (rq, d) = self.matrix(q, "attention")?;
        let (rk, dk) = self.matrix(k, "attention")?;
        same_shape("attention", self.shape(k), self.shape(v))?;
        if d != dk || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: vec![rq, d],
                rhs: vec![rk, dk, heads],
            });
        }
        attention::validate(&segments, rq, rk, causal)?;
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            rq,
            d,
            heads,
            causal,
            &segments,
        );
        let rg = self.rg(&[q, k, v]);
        self.push(
            Tensor::new([rq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments,
                probs,
            },
            rg,
            "attention",
        )
    }

    fn reduction_weights(&self, reduction: &Reduction<F>, shape: &[usize], op: &'static str) -> Result<()> {
        if let Reduction::RowWeighted(w) = reduction {
            let rows = if shape.is_empty() {
                1
            } else {
                shape[..shape.len() - 1].iter().product()
            };
            if w.len() != rows {
                return Err(Error::Dimension {
                    op,
                    lhs: shape.to_vec(),
                    rhs: vec![w.len()],
                });
            }
        }
        Ok(())
    }

    fn reduce(&self, terms: impl Iterator<Item = F>, reduction: &Reduction<F>, n: usize, cols: usize) -> F {
        match reduction {
            Reduction::Mean => terms.sum::<F>() / F::of(n as f64),
            Reduction::RowWeighted(w) => {
                let terms: Vec<F> = terms.collect();
                terms
                    .chunks(cols.max(1))
                    .zip(w)
                    .map(|(row, &wr)| wr * row.iter().copied().sum::<F>())
                    .sum()
            }
        }
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.sq_err(pred, target, Reduction::Mean)
    }

    /// Squared error with the given reduction.
    pub fn sq_err(&mut self, pred: Var, target: Var, reduction: Reduction<F>) -> Result<Var> {
        same_shape("mse", self.shape(pred), self.shape(target))?;
        self.reduction_weights(&reduction, self.shape(pred), "mse")?;
        let p = self.value(pred);
        let t = self.value(target);
        let terms = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b));
        let loss = self.reduce(terms, &reduction, p.len(), p.cols());
        let rg = self.rg(&[pred, target]);
        self.push(
            Tensor::scalar(loss),
            Op::SqErr {
                pred,
                target,
                reduction,
            },
            rg,
            "mse",
        )
    }

    /// Binary cross-entropy on probabilities, clamped to `[eps, 1 - eps]`
    /// before taking logs.
    pub fn bce(&mut self, p: Var, y: Var, eps: f64, reduction: Reduction<F>) -> Result<Var> {
        same_shape("bce", self.shape(p), self.shape(y))?;
        self.reduction_weights(&reduction, self.shape(p), "bce")?;
        let eps = F::of(eps);
        let pv = self.value(p);
        let yv = self.value(y);
        let terms = pv.data().iter().zip(yv.data()).map(|(&pi, &yi)| {
            let pc = pi.max(eps).min(F::one() - eps);
            -(yi * pc.ln() + (F::one() - yi) * (F::one() - pc).ln())
        });
        let loss = self.reduce(terms, &reduction, pv.len(), pv.cols());
        let rg = self.rg(&[p, y]);
        self.push(
            Tensor::scalar(loss),
            Op::Bce { p, y, eps, reduction },
            rg,
            "bce",
        )
    }

    /// Mean binary cross-entropy on logits, evaluated stably.
    pub fn bce_with_logits(&mut self, z: Var, y: Var) -> Result<Var> {
        same_shape("bce_with_logits", self.shape(z), self.shape(y))?;
        let zv = self.value(z);
        let yv = self.value(y);
        let n = F::of(zv.len() as f64);
        let loss = zv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(&zi, &yi)| zi.max(F::zero()) - zi * yi + (F::one() + (-zi.abs()).exp()).ln())
            .sum::<F>()
            / n;
        let rg = self.rg(&[z, y]);
        self.push(Tensor::scalar(loss), Op::BceLogits { z, y }, rg, "bce_with_logits")
    }

    /// Accumulate `d loss / d leaf` into every reachable leaf that requires
    /// grad. Repeated calls add to the existing accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc.data_mut(), &g),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if !g.is_finite() {
                    return Err(Error::non_finite("backward"));
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<F>| match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(
                        MatRef::row_major(g, m, n),
                        MatRef::row_major(self.value(*b).data(), k, n).t(),
                        F::zero(),
                        MatMut::row_major(&mut da, m, k),
                    );
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm(
                        MatRef::row_major(self.value(*a).data(), m, k).t(),
                        MatRef::row_major(g, m, n),
                        F::zero(),
                        MatMut::row_major(&mut db, k, n),
                    );
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let rows = xv.rows();
                let (fan_in, fan_out) = (self.shape(*w)[0], self.shape(*w)[1]);
                if needs(*x) {
                    let mut dx = vec![F::zero(); rows * fan_in];
                    gemm(
                        MatRef::row_major(g, rows, fan_out),
                        MatRef::row_major(self.value(*w).data(), fan_in, fan_out).t(),
                        F::zero(),
                        MatMut::row_major(&mut dx, rows, fan_in),
                    );
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![F::zero(); fan_in * fan_out];
                    gemm(
                        MatRef::row_major(xv.data(), rows, fan_in).t(),
                        MatRef::row_major(g, rows, fan_out),
                        F::zero(),
                        MatMut::row_major(&mut dw, fan_in, fan_out),
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![F::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            add_into(&mut db, row);
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    acc(*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    acc(*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(*a, g.iter().map(|&x| x * *c).collect());
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(*a, vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let cols = out.cols();
                    let mut da = vec![F::zero(); out.len()];
                    for ((y, gy), d) in out.data().chunks(cols).zip(g.chunks(cols)).zip(da.chunks_mut(cols)) {
                        let dot: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for ((di, &yi), &gi) in d.iter_mut().zip(y).zip(gy) {
                            *di = yi * (gi - dot);
                        }
                    }
                    acc(*a, da);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let n = F::of(cols as f64);
                let gam = gamma.map(|p| self.value(p).data());
                let mut dx = needs(*x).then(|| vec![F::zero(); xv.len()]);
                let mut dg = gamma.filter(|p| needs(*p)).map(|_| vec![F::zero(); cols]);
                let mut db = beta.filter(|p| needs(*p)).map(|_| vec![F::zero(); cols]);
                let mut xhat = vec![F::zero(); cols];
                let mut dxhat = vec![F::zero(); cols];
                for (r, (src, gy)) in xv.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    for j in 0..cols {
                        xhat[j] = (src[j] - mean[r]) * rstd[r];
                        dxhat[j] = match gam {
                            Some(gm) => gy[j] * gm[j],
                            None => gy[j],
                        };
                    }
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..cols {
                            dg[j] += gy[j] * xhat[j];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        add_into(db, gy);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<F>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / n;
                        let d = &mut dx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            d[j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let (Some(p), Some(d)) = (gamma, dg) {
                    acc(*p, d);
                }
                if let (Some(p), Some(d)) = (beta, db) {
                    acc(*p, d);
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let av = self.value(*a).data();
                    acc(*a, g.iter().zip(av).map(|(&gi, &x)| gi * gelu_parts(x).1).collect());
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    acc(
                        *a,
                        g.iter()
                            .zip(out.data())
                            .map(|(&gi, &s)| gi * s * (F::one() - s))
                            .collect(),
                    );
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        acc(p, dp);
                    }
                    offset += c;
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    acc(*x, g.iter().zip(mask).map(|(&gi, &m)| gi * m).collect());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                segments,
                probs,
            } => {
                let (rq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let rk = self.shape(*k)[0];
                let grads_qkv = attention::backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    g,
                    probs,
                    rq,
                    rk,
                    d,
                    *heads,
                    *causal,
                    segments,
                    [needs(*q), needs(*k), needs(*v)],
                );
                for (var, grad) in [*q, *k, *v].into_iter().zip(grads_qkv) {
                    if let Some(grad) = grad {
                        acc(var, grad);
                    }
                }
            }
            Op::SqErr {
                pred,
                target,
                reduction,
            } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let cols = p.cols().max(1);
                let two = F::of(2.0);
                let n = F::of(p.len() as f64);
                let dp: Vec<F> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .enumerate()
                    .map(|(idx, (&a, &b))| {
                        let w = match reduction {
                            Reduction::Mean => F::one() / n,
                            Reduction::RowWeighted(w) => w[idx / cols],
                        };
                        g[0] * w * two * (a - b)
                    })
                    .collect();
                if needs(*target) {
                    acc(*target, dp.iter().map(|&x| -x).collect());
                }
                if needs(*pred) {
                    acc(*pred, dp);
                }
            }
            Op::Bce { p, y, eps, reduction } => {
                let pv = self.value(*p);
                let yv = self.value(*y);
                let cols = pv.cols().max(1);
                let n = F::of(pv.len() as f64);
                let weight = |idx: usize| match reduction {
                    Reduction::Mean => F::one() / n,
                    Reduction::RowWeighted(w) => w[idx / cols],
                };
                if needs(*p) {
                    let dp = pv
                        .data()
                        .iter()
                        .zip(yv.data())
                        .enumerate()
                        .map(|(idx, (&pi, &yi))| {
                            if pi < *eps || pi > F::one() - *eps {
                                F::zero()
                            } else {
                                g[0] * weight(idx) * (-(yi / pi) + (F::one() - yi) / (F::one() - pi))
                            }
                        })
                        .collect();
                    acc(*p, dp);
                }
                if needs(*y) {
                    let dy = pv
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(idx, &pi)| {
                            let pc = pi.max(*eps).min(F::one() - *eps);
                            g[0] * weight(idx) * ((F::one() - pc).ln() - pc.ln())
                        })
                        .collect();
                    acc(*y, dy);
                }
            }
            Op::BceLogits { z, y } => {
                let zv = self.value(*z);
                let yv = self.value(*y);
                let n = F::of(zv.len() as f64);
                if needs(*z) {
                    acc(
                        *z,
                        zv.data()
                            .iter()
                            .zip(yv.data())
                            .map(|(&zi, &yi)| g[0] * (sigmoid(zi) - yi) / n)
                            .collect(),
                    );
                }
                if needs(*y) {
                    acc(*y, zv.data().iter().map(|&zi| -g[0] * zi / n).collect());
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
