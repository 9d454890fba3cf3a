//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends one node holding its value.
//! [`Tape::gradient`] replays the nodes in reverse index order, so gradient
//! accumulation order is fixed by recording order.
//!
//! The set of differentiable operations is closed: the methods on [`Tape`] are
//! the only way to add nodes, and each one validates shapes before recording.

use super::linalg::Lu;
use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// right operand is a `[C]` vector over the trailing axis
    Channel,
    /// right operand holds a single element
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Matmul { x: Var, w: Var },
    Add { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { x: Var, c: T },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Slice { x: Var, start: usize, len: usize },
    Concat { a: Var, b: Var },
    LogAbsDet(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVariable(v.0))
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(value, op, needs_grad))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.check(a)?.value.shape(), self.check(b)?.value.shape());
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Ok(Broadcast::Channel)
        } else if sb.iter().product::<usize>() == 1 {
            Ok(Broadcast::Scalar)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b))?;
        self.record("conv2d", y, Op::Conv2d { x, w, b }, &[x, w, b])
    }

    /// Channel mixing `y[.., i] = Σ_j w[i, j] x[.., j]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let y = ops::channel_matmul(self.value(x), self.value(w))?;
        self.record("matmul", y, Op::Matmul { x, w }, &[x, w])
    }

    /// Elementwise sum; `b` may also be a channel vector or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("add", a, b)?;
        let y = match bc {
            Broadcast::Same => self.value(a).zip_map(self.value(b), |p, q| p + q)?,
            Broadcast::Channel => ops::add_channel(self.value(a), self.value(b))?,
            Broadcast::Scalar => {
                let s = self.value(b).data()[0];
                self.value(a).map(|p| p + s)
            }
        };
        self.record("add", y, Op::Add { a, b, bc }, &[a, b])
    }

    /// Elementwise product; `b` may also be a channel vector or a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("mul", a, b)?;
        let y = match bc {
            Broadcast::Same => self.value(a).zip_map(self.value(b), |p, q| p * q)?,
            Broadcast::Channel => ops::mul_channel(self.value(a), self.value(b))?,
            Broadcast::Scalar => {
                let s = self.value(b).data()[0];
                self.value(a).map(|p| p * s)
            }
        };
        self.record("mul", y, Op::Mul { a, b, bc }, &[a, b])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v * c);
        self.record("scale", y, Op::Scale { x, c }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.exp());
        self.record("exp", y, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.ln());
        self.record("log", y, Op::Log(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(|v| v.tanh());
        self.record("tanh", y, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let y = self.value(x).map(ops::sigmoid);
        self.record("sigmoid", y, Op::Sigmoid(x), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.record("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let n = T::from_usize(t.numel().max(1)).unwrap();
        let s = t.data().iter().fold(T::zero(), |a, &b| a + b) / n;
        self.record("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let y = ops::slice_channels(self.value(x), start, len)?;
        self.record("slice", y, Op::Slice { x, start, len }, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        self.record("concat", y, Op::Concat { a, b }, &[a, b])
    }

    /// `log |det w|` of a square matrix.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        self.check(w)?;
        let lu = Lu::new(self.value(w))?;
        let det = lu.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SingularMatrix { det });
        }
        let y = Tensor::scalar(T::from_f64(lu.log_abs_det()).unwrap());
        self.record("log_abs_det", y, Op::LogAbsDet(w), &[w])
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to `params`.
    ///
    /// Parameters the loss does not depend on receive zero gradients.
    pub fn gradient(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let node = self.check(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        for p in params {
            self.check(*p)?;
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(node.value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads)?;
        }

        Ok(params
            .iter()
            .map(|p| {
                grads[..]
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(*p).shape()))
            })
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| -> Result<()> {
            if !self.wants(v) {
                return Ok(());
            }
            let slot = &mut grads[v.0];
            *slot = Some(match slot.take() {
                Some(prev) => prev.zip_map(&t, |a, b| a + b)?,
                None => t,
            });
            Ok(())
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) =
                    ops::conv2d_backward(self.value(x), self.value(w), g, self.wants(x))?;
                if let Some(gx) = gx {
                    acc(grads, x, gx)?;
                }
                acc(grads, w, gw)?;
                acc(grads, b, gb)?;
            }
            Op::Matmul { x, w } => {
                let (gx, gw) = ops::channel_matmul_backward(self.value(x), self.value(w), g)?;
                acc(grads, x, gx)?;
                acc(grads, w, gw)?;
            }
            Op::Add { a, b, bc } => {
                acc(grads, a, g.clone())?;
                if self.wants(b) {
                    acc(grads, b, reduce_broadcast(g, bc, self.value(b).shape()))?;
                }
            }
            Op::Mul { a, b, bc } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let ga = match bc {
                        Broadcast::Same => g.zip_map(vb, |p, q| p * q)?,
                        Broadcast::Channel => ops::mul_channel(g, vb)?,
                        Broadcast::Scalar => {
                            let s = vb.data()[0];
                            g.map(|p| p * s)
                        }
                    };
                    acc(grads, a, ga)?;
                }
                if self.wants(b) {
                    let prod = g.zip_map(va, |p, q| p * q)?;
                    acc(grads, b, reduce_broadcast(&prod, bc, vb.shape()))?;
                }
            }
            Op::Scale { x, c } => acc(grads, x, g.map(|v| v * c))?,
            Op::Exp(x) => acc(grads, x, g.zip_map(&node.value, |p, y| p * y)?)?,
            Op::Log(x) => acc(grads, x, g.zip_map(self.value(x), |p, v| p / v)?)?,
            Op::Tanh(x) => acc(
                grads,
                x,
                g.zip_map(&node.value, |p, y| p * (T::one() - y * y))?,
            )?,
            Op::Sigmoid(x) => acc(
                grads,
                x,
                g.zip_map(&node.value, |p, y| p * y * (T::one() - y))?,
            )?,
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(grads, x, Tensor::full(self.value(x).shape(), s))?;
            }
            Op::Mean(x) => {
                let t = self.value(x);
                let s = g.data()[0] / T::from_usize(t.numel().max(1)).unwrap();
                acc(grads, x, Tensor::full(t.shape(), s))?;
            }
            Op::Slice { x, start, len } => {
                let src = self.value(x);
                let c = src.channels();
                let mut out = vec![T::zero(); src.numel()];
                for (dst, gs) in out.chunks_mut(c).zip(g.data().chunks(len)) {
                    dst[start..start + len].copy_from_slice(gs);
                }
                acc(grads, x, Tensor::from_parts(src.shape().to_vec(), out)?)?;
            }
            Op::Concat { a, b } => {
                let ca = self.value(a).channels();
                let cb = self.value(b).channels();
                acc(grads, a, ops::slice_channels(g, 0, ca)?)?;
                acc(grads, b, ops::slice_channels(g, ca, cb)?)?;
            }
            Op::LogAbsDet(w) => {
                // d log|det W| / dW = W^{-T}
                let inv: Tensor<T> = Lu::new(self.value(w))?.inverse()?;
                let s = g.data()[0];
                let inv_t = ops::transpose(&inv)?;
                acc(grads, w, inv_t.map(|v| v * s))?;
            }
        }
        Ok(())
    }
}

fn reduce_broadcast<T: Real>(g: &Tensor<T>, bc: Broadcast, shape: &[usize]) -> Tensor<T> {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Channel => ops::reduce_to_channels(g),
        Broadcast::Scalar => {
            let s = g.data().iter().fold(T::zero(), |a, &b| a + b);
            Tensor::full(shape, s)
        }
    }
}
