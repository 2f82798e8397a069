//! Reverse-mode differentiation over a closed op set.
//!
//! A [`Tape`] records every op applied during one forward episode. Node ids
//! only ever point backwards, so the tape is acyclic by construction and a
//! single reverse sweep visits each node once.

use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::silu_grad;
use crate::tensor::{Broadcast, PoolMode, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ElementwiseGrad = Box<dyn Fn(f64) -> f64 + Send + Sync>;

enum Op {
    Leaf { trainable: bool },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Softmax(Var),
    Hadamard { a: Var, b: Var, mode: Broadcast },
    Add { a: Var, b: Var, mode: Broadcast },
    Sub { a: Var, b: Var, mode: Broadcast },
    Scale { a: Var, factor: f64 },
    Silu(Var),
    Map { a: Var, grad: ElementwiseGrad },
    PoolMean(Var),
    PoolMax { a: Var, argmax: Vec<usize> },
    Upsample(Var),
    Reshape(Var),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Not meant to be shared between threads while
/// recording; build one tape per episode.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to every trainable leaf that the loss
/// depends on.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss did not
    /// reach it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let needs_grad = match op {
            Op::Leaf { trainable } => trainable,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf { trainable: true }, &[], "param")
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf { trainable: false }, &[], "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Forward uses correctly rounded inner sums; the adjoint is the ordinary
    /// matmul adjoint.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_exact(self.value(b))?;
        self.push(v, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Forward per [`Tensor::matmul_segmented`]; the adjoint is the ordinary
    /// matmul adjoint.
    pub fn matmul_segmented(&mut self, a: Var, b: Var, segments: &[Range<usize>]) -> Result<Var> {
        let v = self.value(a).matmul_segmented(self.value(b), segments)?;
        self.push(v, Op::MatMul { a, b }, &[a, b], "matmul_segmented")
    }

    pub fn softmax_rows_segmented(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let v = self.value(a).softmax_rows_segmented(segments)?;
        self.push(v, Op::Softmax(a), &[a], "softmax_rows_segmented")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(v, Op::Transpose(a), &[a], "transpose")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        self.push(v, Op::Softmax(a), &[a], "softmax_rows")
    }

    /// Elementwise product. `b` may be a `1 x n` row or `m x 1` column
    /// broadcast against an `m x n` `a`.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = Broadcast::resolve("hadamard", self.value(a), self.value(b))?;
        let v = self.value(a).hadamard(self.value(b))?;
        self.push(v, Op::Hadamard { a, b, mode }, &[a, b], "hadamard")
    }

    /// Elementwise sum with the same broadcast rule as [`Tape::hadamard`].
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = Broadcast::resolve("add", self.value(a), self.value(b))?;
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add { a, b, mode }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let mode = Broadcast::resolve("sub", self.value(a), self.value(b))?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub { a, b, mode }, &[a, b], "sub")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale { a, factor }, &[a], "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).silu();
        self.push(v, Op::Silu(a), &[a], "silu")
    }

    /// Elementwise function with a caller-supplied derivative.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push(
            v,
            Op::Map {
                a,
                grad: Box::new(df),
            },
            &[a],
            "map",
        )
    }

    pub fn pool_down(&mut self, a: Var, mode: PoolMode) -> Result<Var> {
        let x = self.value(a);
        let v = x.pool_down(mode)?;
        let op = match mode {
            PoolMode::Mean => Op::PoolMean(a),
            PoolMode::Max => Op::PoolMax {
                a,
                argmax: max_pool_argmax(x)?,
            },
        };
        self.push(v, op, &[a], "pool_down")
    }

    pub fn upsample_nearest(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).upsample_nearest()?;
        self.push(v, Op::Upsample(a), &[a], "upsample_nearest")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        self.push(v, Op::SliceCols { a, start }, &[a], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&vals)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a], "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(v, Op::Mean(a), &[a], "mean")
    }

    /// `x W + b` with `b` a `1 x n` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Mean squared difference between two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// Sweeps the tape in reverse and returns gradients for every trainable
    /// leaf reached from `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        let loss_node = &nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.needs_grad {
            return Err(Error::DetachedGraph);
        }

        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(loss_node.value.shape()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut acc = |v: Var, d: Tensor| {
                if !nodes[v.0].needs_grad {
                    return Ok::<(), Error>(());
                }
                match &mut adj[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
                Ok(())
            };

            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        out.grads.insert(Var(idx), g);
                    }
                }
                Op::MatMul { a, b } => {
                    if nodes[a.0].needs_grad {
                        acc(*a, g.matmul(&val(*b).transpose()?)?)?;
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, val(*a).transpose()?.matmul(&g)?)?;
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()?)?,
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (m, n) = y.dims2("softmax_rows")?;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y.data()[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::Hadamard { a, b, mode } => {
                    if nodes[a.0].needs_grad {
                        acc(*a, g.hadamard(val(*b))?)?;
                    }
                    if nodes[b.0].needs_grad {
                        let full = g.zip_map(val(*a), |g, a| g * a)?;
                        acc(*b, reduce_broadcast(&full, val(*b), *mode))?;
                    }
                }
                Op::Add { a, b, mode } => {
                    acc(*b, reduce_broadcast(&g, val(*b), *mode))?;
                    acc(*a, g)?;
                }
                Op::Sub { a, b, mode } => {
                    acc(*b, reduce_broadcast(&g, val(*b), *mode).scale(-1.0))?;
                    acc(*a, g)?;
                }
                Op::Scale { a, factor } => acc(*a, g.scale(*factor))?,
                Op::Silu(a) => acc(*a, g.zip_map(val(*a), |g, x| g * silu_grad(x))?)?,
                Op::Map { a, grad } => acc(*a, g.zip_map(val(*a), |g, x| g * grad(x))?)?,
                Op::PoolMean(a) => {
                    let up = g.upsample_nearest()?.scale(0.25);
                    acc(*a, up)?;
                }
                Op::PoolMax { a, argmax } => {
                    let mut dx = Tensor::zeros(val(*a).shape());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src] += g.data()[o];
                    }
                    acc(*a, dx)?;
                }
                Op::Upsample(a) => {
                    let (h, w, c) = val(*a).dims3("upsample_nearest")?;
                    let wo = 2 * w;
                    let mut dx = vec![0.0; h * w * c];
                    for i in 0..2 * h {
                        for j in 0..wo {
                            for ch in 0..c {
                                dx[((i / 2) * w + j / 2) * c + ch] += g.data()[(i * wo + j) * c + ch];
                            }
                        }
                    }
                    acc(*a, Tensor::new(vec![h, w, c], dx)?)?;
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?)?,
                Op::SliceCols { a, start } => {
                    let (m, n) = val(*a).dims2("slice_cols")?;
                    let (_, len) = g.dims2("slice_cols")?;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        dx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    acc(*a, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::ConcatRows(parts) => {
                    let (_, n) = g.dims2("concat_rows")?;
                    let mut offset = 0;
                    for &p in parts {
                        let (m, _) = val(p).dims2("concat_rows")?;
                        let piece = g.data()[offset * n..(offset + m) * n].to_vec();
                        acc(p, Tensor::new(vec![m, n], piece)?)?;
                        offset += m;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (_, pn) = val(p).dims2("concat_cols")?;
                        acc(p, g.slice_cols(offset, pn)?)?;
                        offset += pn;
                    }
                }
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |g, x| 2.0 * g * x)?)?,
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()))?,
                Op::Mean(a) => {
                    let x = val(*a);
                    acc(*a, Tensor::full(x.shape(), g.item() / x.numel() as f64))?;
                }
            }
        }
        Ok(out)
    }
}

/// Sums a full-shape adjoint back onto the broadcast operand's shape.
fn reduce_broadcast(full: &Tensor, target: &Tensor, mode: Broadcast) -> Tensor {
    if mode == Broadcast::Same {
        return full.clone();
    }
    let cols = *full.shape().last().unwrap();
    let mut out = Tensor::zeros(target.shape());
    for (i, &v) in full.data().iter().enumerate() {
        out.data_mut()[mode.index(i, cols)] += v;
    }
    out
}

fn max_pool_argmax(x: &Tensor) -> Result<Vec<usize>> {
    let (h, w, c) = x.dims3("pool_down")?;
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(ho * wo * c);
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let cands = [
                    ((2 * i) * w + 2 * j) * c + ch,
                    ((2 * i) * w + 2 * j + 1) * c + ch,
                    ((2 * i + 1) * w + 2 * j) * c + ch,
                    ((2 * i + 1) * w + 2 * j + 1) * c + ch,
                ];
                let best = cands
                    .into_iter()
                    .reduce(|best, k| if x.data()[k] > x.data()[best] { k } else { best })
                    .unwrap();
                idx.push(best);
            }
        }
    }
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0)).unwrap();
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::from_rows(&[[0.3, -1.2, 2.0], [5.0, 5.0, -4.0]]).unwrap())
            .unwrap();
        let s = tape.softmax_rows(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let a_val = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b_val = Tensor::from_rows(&[[-1.0, 0.5], [7.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(a_val.clone()).unwrap();
        let b = tape.param(b_val.clone()).unwrap();
        let p = tape.hadamard(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &b_val);
        assert_eq!(g.get(b).unwrap(), &a_val);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let l = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::DetachedGraph)));
    }

    #[test]
    fn constants_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 3], 2.0)).unwrap();
        let m = tape.constant(Tensor::full(&[1, 3], 5.0)).unwrap();
        let p = tape.hadamard(x, m).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(m).is_none());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(800.0)).unwrap();
        assert!(matches!(
            tape.map(x, f64::exp, f64::exp),
            Err(Error::NonFinite("map"))
        ));
    }
}
