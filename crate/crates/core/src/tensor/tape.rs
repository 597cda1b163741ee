//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes. Each
//! node stores the values its gradient rule needs, so [`Tape::backward`] is a
//! single reverse sweep that never re-runs forward code. Ops applied to
//! inputs the tape is not tracking skip recording entirely and just return
//! constants, so evaluation-only code pays no tape overhead.
//!
//! Tensors carry the id of the tape that produced them. A tensor recorded on
//! some other tape is treated as an exogenous constant, which is what makes
//! truncated-backpropagation windows work: state handed across a window
//! boundary stops gradients without further ceremony.
//!
//! Replaying a tape is deterministic: the node list is append-only and the
//! reverse sweep visits it in a fixed order, so two `backward` calls over the
//! same tape produce bit-identical gradients.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::kernels as k;
use super::{ShapeError, Tensor};
use crate::scalar::Scalar;

static TAPE_SERIAL: AtomicU64 = AtomicU64::new(1);

/// Identifies a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Saved input: where it came from (if tracked on this tape) plus its values.
#[derive(Debug)]
struct In<S: Scalar> {
    node: Option<usize>,
    data: Arc<[S]>,
    shape: Vec<usize>,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: In<S>, b: In<S> },
    Conv1d { x: In<S>, w: In<S>, b: In<S> },
    Add { a: In<S>, b: In<S> },
    Sub { a: In<S>, b: In<S> },
    Mul { a: In<S>, b: In<S> },
    Concat { parts: Vec<In<S>>, axis: usize },
    Transpose { x: In<S>, perm: Vec<usize> },
    Reshape { x: In<S> },
    Sigmoid { x: In<S>, y: Arc<[S]> },
    Tanh { x: In<S>, y: Arc<[S]> },
    LeakyRelu { x: In<S>, slope: S },
    Abs { x: In<S> },
    Softmax { x: In<S>, axis: usize, y: Arc<[S]> },
    LayerNorm { x: In<S>, axis: usize, y: Arc<[S]>, inv_std: Arc<[S]> },
    Mse { a: In<S>, b: In<S> },
    Mean { x: In<S> },
    Sum { x: In<S> },
    MeanAxis { x: In<S>, axis: usize },
    SumAxis { x: In<S>, axis: usize },
    Scale { x: In<S>, c: S },
    AddScalar { x: In<S> },
    Powf { x: In<S>, p: S },
    ClampMin { x: In<S>, c: S },
    Dropout { x: In<S>, mask: Arc<[S]> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    op: Op<S>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// The node list lives behind a [`RefCell`] so recording works through a
/// shared reference; forward code can nest op calls freely. A tape is
/// single-threaded — hand each worker its own.
#[derive(Debug)]
pub struct Tape<S: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: TAPE_SERIAL.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op<S>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op });
        index
    }

    /// Registers `t` as a tracked leaf; gradients accumulate against the
    /// returned handle.
    pub fn watch(&self, t: &Tensor<S>) -> Tensor<S> {
        let index = self.push(Op::Leaf);
        Tensor::with_node(
            t.shape().to_vec(),
            t.data_arc(),
            Some(NodeId {
                tape: self.id,
                index,
            }),
        )
    }

    fn local(&self, t: &Tensor<S>) -> Option<usize> {
        t.node().and_then(|n| (n.tape == self.id).then_some(n.index))
    }

    fn capture(&self, t: &Tensor<S>) -> In<S> {
        In {
            node: self.local(t),
            data: t.data_arc(),
            shape: t.shape().to_vec(),
        }
    }

    fn emit(&self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, tracked: bool) -> Tensor<S> {
        let arc: Arc<[S]> = data.into();
        if !tracked {
            return Tensor::with_node(shape, arc, None);
        }
        let index = self.push(op);
        Tensor::with_node(
            shape,
            arc,
            Some(NodeId {
                tape: self.id,
                index,
            }),
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product; leading axes broadcast.
    pub fn matmul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        let geom = k::matmul_geom(a.shape(), b.shape())?;
        let data = k::matmul_forward(a.data(), b.data(), &geom);
        let mut shape = geom.lead.clone();
        shape.push(geom.p);
        shape.push(geom.r);
        let tracked = self.local(a).is_some() || self.local(b).is_some();
        Ok(self.emit(
            shape,
            data,
            Op::Matmul {
                a: self.capture(a),
                b: self.capture(b),
            },
            tracked,
        ))
    }

    /// Same-padding 1-D cross-correlation over `[batch, channels, len]`.
    pub fn conv1d(
        &self,
        x: &Tensor<S>,
        w: &Tensor<S>,
        b: &Tensor<S>,
    ) -> Result<Tensor<S>, ShapeError> {
        if x.rank() != 3 || w.rank() != 3 {
            return Err(ShapeError::RankTooLow {
                rank: x.rank().min(w.rank()),
                min: 3,
            });
        }
        let (n, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc_in, width) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if width % 2 == 0 {
            return Err(ShapeError::EvenKernel { width });
        }
        if wc_in != c_in {
            return Err(ShapeError::Mismatch {
                expected: vec![c_out, c_in, width],
                actual: w.shape().to_vec(),
            });
        }
        if b.shape() != [c_out] {
            return Err(ShapeError::Mismatch {
                expected: vec![c_out],
                actual: b.shape().to_vec(),
            });
        }
        let data = k::conv1d_forward(x.data(), w.data(), b.data(), n, c_in, len, c_out, width);
        let tracked =
            self.local(x).is_some() || self.local(w).is_some() || self.local(b).is_some();
        Ok(self.emit(
            vec![n, c_out, len],
            data,
            Op::Conv1d {
                x: self.capture(x),
                w: self.capture(w),
                b: self.capture(b),
            },
            tracked,
        ))
    }

    // ── Elementwise with broadcasting ───────────────────────────────────

    fn zip<F: Fn(S, S) -> S>(
        &self,
        a: &Tensor<S>,
        b: &Tensor<S>,
        f: F,
        make: impl FnOnce(In<S>, In<S>) -> Op<S>,
    ) -> Result<Tensor<S>, ShapeError> {
        let shape = k::broadcast_shape(a.shape(), b.shape())?;
        let astr = k::broadcast_strides(a.shape(), &shape);
        let bstr = k::broadcast_strides(b.shape(), &shape);
        let n = k::numel(&shape);
        let mut data = Vec::with_capacity(n);
        for flat in 0..n {
            let av = a.data()[k::broadcast_offset(flat, &shape, &astr)];
            let bv = b.data()[k::broadcast_offset(flat, &shape, &bstr)];
            data.push(f(av, bv));
        }
        let tracked = self.local(a).is_some() || self.local(b).is_some();
        Ok(self.emit(shape, data, make(self.capture(a), self.capture(b)), tracked))
    }

    pub fn add(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        self.zip(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        self.zip(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        self.zip(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>, ShapeError> {
        let first = parts.first().ok_or(ShapeError::EmptyConcat)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(ShapeError::AxisOutOfRange { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(ShapeError::Mismatch {
                    expected: first.shape().to_vec(),
                    actual: p.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(ShapeError::Mismatch {
                        expected: first.shape().to_vec(),
                        actual: p.shape().to_vec(),
                    });
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); k::numel(&shape)];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + len * inner].copy_from_slice(&p.data()[src..src + len * inner]);
            }
            offset += len;
        }
        let tracked = parts.iter().any(|p| self.local(p).is_some());
        let captured = parts.iter().map(|p| self.capture(p)).collect();
        Ok(self.emit(
            shape,
            data,
            Op::Concat {
                parts: captured,
                axis,
            },
            tracked,
        ))
    }

    pub fn transpose(&self, x: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>, ShapeError> {
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(ShapeError::AxisOutOfRange {
                axis: perm.iter().copied().max().unwrap_or(0),
                rank,
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let xstr = k::strides(x.shape());
        let n = x.numel();
        let mut data = vec![S::zero(); n];
        for (flat, slot) in data.iter_mut().enumerate() {
            let mut rem = flat;
            let mut xoff = 0;
            for i in (0..rank).rev() {
                let c = rem % shape[i];
                rem /= shape[i];
                xoff += c * xstr[perm[i]];
            }
            *slot = x.data()[xoff];
        }
        let tracked = self.local(x).is_some();
        Ok(self.emit(
            shape,
            data,
            Op::Transpose {
                x: self.capture(x),
                perm: perm.to_vec(),
            },
            tracked,
        ))
    }

    pub fn reshape(&self, x: &Tensor<S>, shape: &[usize]) -> Result<Tensor<S>, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != x.numel() {
            return Err(ShapeError::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: x.numel(),
            });
        }
        let tracked = self.local(x).is_some();
        Ok(self.emit(
            shape.to_vec(),
            x.to_vec(),
            Op::Reshape {
                x: self.capture(x),
            },
            tracked,
        ))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    fn map_saving<F: Fn(S) -> S>(
        &self,
        x: &Tensor<S>,
        f: F,
        make: impl FnOnce(In<S>, Arc<[S]>) -> Op<S>,
    ) -> Tensor<S> {
        let data: Vec<S> = x.data().iter().map(|&v| f(v)).collect();
        let arc: Arc<[S]> = data.into();
        let tracked = self.local(x).is_some();
        let op = make(self.capture(x), Arc::clone(&arc));
        if !tracked {
            return Tensor::with_node(x.shape().to_vec(), arc, None);
        }
        let index = self.push(op);
        Tensor::with_node(
            x.shape().to_vec(),
            arc,
            Some(NodeId {
                tape: self.id,
                index,
            }),
        )
    }

    pub fn sigmoid(&self, x: &Tensor<S>) -> Tensor<S> {
        let one = S::one();
        self.map_saving(
            x,
            |v| one / (one + (-v).exp()),
            |x, y| Op::Sigmoid { x, y },
        )
    }

    pub fn tanh(&self, x: &Tensor<S>) -> Tensor<S> {
        self.map_saving(x, |v| v.tanh(), |x, y| Op::Tanh { x, y })
    }

    pub fn leaky_relu(&self, x: &Tensor<S>, slope: f64) -> Tensor<S> {
        let s = S::lit(slope);
        let data: Vec<S> = x
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { s * v })
            .collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::LeakyRelu {
                x: self.capture(x),
                slope: s,
            },
            tracked,
        )
    }

    pub fn relu(&self, x: &Tensor<S>) -> Tensor<S> {
        self.leaky_relu(x, 0.0)
    }

    pub fn abs(&self, x: &Tensor<S>) -> Tensor<S> {
        let data: Vec<S> = x.data().iter().map(|&v| v.abs()).collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::Abs {
                x: self.capture(x),
            },
            tracked,
        )
    }

    fn fiber_geom(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), ShapeError> {
        if axis >= shape.len() {
            return Err(ShapeError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, ShapeError> {
        let (outer, len, inner) = Self::fiber_geom(x.shape(), axis)?;
        let mut data = x.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = S::neg_infinity();
                for j in 0..len {
                    max = max.max(data[at(j)]);
                }
                let mut total = S::zero();
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        let arc: Arc<[S]> = data.into();
        let tracked = self.local(x).is_some();
        let op = Op::Softmax {
            x: self.capture(x),
            axis,
            y: Arc::clone(&arc),
        };
        if !tracked {
            return Ok(Tensor::with_node(x.shape().to_vec(), arc, None));
        }
        let index = self.push(op);
        Ok(Tensor::with_node(
            x.shape().to_vec(),
            arc,
            Some(NodeId {
                tape: self.id,
                index,
            }),
        ))
    }

    /// Zero-mean unit-variance normalization along `axis` with epsilon 1e-5
    /// inside the square root. No affine part; scale and shift are separate
    /// parameters where a layer wants them.
    pub fn layer_norm(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, ShapeError> {
        let (outer, len, inner) = Self::fiber_geom(x.shape(), axis)?;
        let eps = S::lit(1e-5);
        let count = S::lit(len as f64);
        let mut data = x.to_vec();
        let mut inv_std = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mean = S::zero();
                for j in 0..len {
                    mean += data[at(j)];
                }
                mean = mean / count;
                let mut var = S::zero();
                for j in 0..len {
                    let d = data[at(j)] - mean;
                    var += d * d;
                }
                var = var / count;
                let inv = (var + eps).sqrt().recip();
                inv_std[o * inner + i] = inv;
                for j in 0..len {
                    data[at(j)] = (data[at(j)] - mean) * inv;
                }
            }
        }
        let arc: Arc<[S]> = data.into();
        let tracked = self.local(x).is_some();
        let op = Op::LayerNorm {
            x: self.capture(x),
            axis,
            y: Arc::clone(&arc),
            inv_std: inv_std.into(),
        };
        if !tracked {
            return Ok(Tensor::with_node(x.shape().to_vec(), arc, None));
        }
        let index = self.push(op);
        Ok(Tensor::with_node(
            x.shape().to_vec(),
            arc,
            Some(NodeId {
                tape: self.id,
                index,
            }),
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Mean squared error between same-shape tensors; scalar output.
    pub fn mse(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        if a.shape() != b.shape() {
            return Err(ShapeError::Mismatch {
                expected: a.shape().to_vec(),
                actual: b.shape().to_vec(),
            });
        }
        let count = S::lit(a.numel() as f64);
        let mut acc = S::zero();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let d = x - y;
            acc += d * d;
        }
        let tracked = self.local(a).is_some() || self.local(b).is_some();
        Ok(self.emit(
            vec![],
            vec![acc / count],
            Op::Mse {
                a: self.capture(a),
                b: self.capture(b),
            },
            tracked,
        ))
    }

    pub fn mean(&self, x: &Tensor<S>) -> Tensor<S> {
        let count = S::lit(x.numel() as f64);
        let total: S = x.data().iter().copied().sum();
        let tracked = self.local(x).is_some();
        self.emit(
            vec![],
            vec![total / count],
            Op::Mean {
                x: self.capture(x),
            },
            tracked,
        )
    }

    pub fn sum(&self, x: &Tensor<S>) -> Tensor<S> {
        let total: S = x.data().iter().copied().sum();
        let tracked = self.local(x).is_some();
        self.emit(
            vec![],
            vec![total],
            Op::Sum {
                x: self.capture(x),
            },
            tracked,
        )
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_axis(&self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>, ShapeError> {
        let (outer, len, inner) = Self::fiber_geom(x.shape(), axis)?;
        let count = S::lit(len as f64);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v = *v / count;
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let tracked = self.local(x).is_some();
        Ok(self.emit(
            shape,
            data,
            Op::MeanAxis {
                x: self.capture(x),
                axis,
            },
            tracked,
        ))
    }

    /// Sum along `axis`; with `keepdim` the axis stays with size one.
    pub fn sum_axis(
        &self,
        x: &Tensor<S>,
        axis: usize,
        keepdim: bool,
    ) -> Result<Tensor<S>, ShapeError> {
        let (outer, len, inner) = Self::fiber_geom(x.shape(), axis)?;
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x.data()[(o * len + j) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let tracked = self.local(x).is_some();
        Ok(self.emit(
            shape,
            data,
            Op::SumAxis {
                x: self.capture(x),
                axis,
            },
            tracked,
        ))
    }

    // ── Scalar-argument ops ─────────────────────────────────────────────

    pub fn scale(&self, x: &Tensor<S>, c: f64) -> Tensor<S> {
        let c = S::lit(c);
        let data: Vec<S> = x.data().iter().map(|&v| v * c).collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::Scale {
                x: self.capture(x),
                c,
            },
            tracked,
        )
    }

    pub fn add_scalar(&self, x: &Tensor<S>, c: f64) -> Tensor<S> {
        let c = S::lit(c);
        let data: Vec<S> = x.data().iter().map(|&v| v + c).collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::AddScalar {
                x: self.capture(x),
            },
            tracked,
        )
    }

    pub fn powf(&self, x: &Tensor<S>, p: f64) -> Tensor<S> {
        let p = S::lit(p);
        let data: Vec<S> = x.data().iter().map(|&v| v.powf(p)).collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::Powf {
                x: self.capture(x),
                p,
            },
            tracked,
        )
    }

    pub fn clamp_min(&self, x: &Tensor<S>, c: f64) -> Tensor<S> {
        let c = S::lit(c);
        let data: Vec<S> = x.data().iter().map(|&v| v.max(c)).collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::ClampMin {
                x: self.capture(x),
                c,
            },
            tracked,
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// rescales survivors by `1 / (1 - p)`. Callers skip this op entirely in
    /// evaluation mode.
    pub fn dropout<R: Rng>(&self, x: &Tensor<S>, p: f64, rng: &mut R) -> Tensor<S> {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if p == 0.0 {
            return x.clone();
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data: Vec<S> = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let tracked = self.local(x).is_some();
        self.emit(
            x.shape().to_vec(),
            data,
            Op::Dropout {
                x: self.capture(x),
                mask: mask.into(),
            },
            tracked,
        )
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    /// The loss must be a tracked scalar. Each call starts from scratch, so
    /// repeated calls on one tape are independent and bit-identical.
    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>, ShapeError> {
        let root = match loss.node() {
            Some(n) if n.tape == self.id => n.index,
            _ => return Err(ShapeError::UntrackedLoss),
        };
        if loss.numel() != 1 {
            return Err(ShapeError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![S::one()]);
        for index in (0..=root).rev() {
            let Some(grad) = grads[index].take() else {
                continue;
            };
            Self::propagate(&nodes[index].op, &grad, &mut grads);
            grads[index] = Some(grad);
        }
        Ok(Gradients {
            tape: self.id,
            by_node: grads,
        })
    }

    fn propagate(op: &Op<S>, grad: &[S], grads: &mut [Option<Vec<S>>]) {
        fn slot<'a, S: Scalar>(
            grads: &'a mut [Option<Vec<S>>],
            input: &In<S>,
        ) -> Option<&'a mut Vec<S>> {
            let node = input.node?;
            Some(grads[node].get_or_insert_with(|| vec![S::zero(); input.data.len()]))
        }

        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let geom = k::matmul_geom(&a.shape, &b.shape).expect("shape checked at record");
                // Split borrows: take each gradient buffer in turn.
                if a.node.is_some() {
                    let da = slot(grads, a).unwrap();
                    k::matmul_backward(grad, &a.data, &b.data, &geom, Some(da), None);
                }
                if b.node.is_some() {
                    let db = slot(grads, b).unwrap();
                    k::matmul_backward(grad, &a.data, &b.data, &geom, None, Some(db));
                }
            }
            Op::Conv1d { x, w, b } => {
                let (n, c_in, len) = (x.shape[0], x.shape[1], x.shape[2]);
                let (c_out, width) = (w.shape[0], w.shape[2]);
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    k::conv1d_backward(
                        grad, &x.data, &w.data, n, c_in, len, c_out, width,
                        Some(dx), None, None,
                    );
                }
                if w.node.is_some() {
                    let dw = slot(grads, w).unwrap();
                    k::conv1d_backward(
                        grad, &x.data, &w.data, n, c_in, len, c_out, width,
                        None, Some(dw), None,
                    );
                }
                if b.node.is_some() {
                    let db = slot(grads, b).unwrap();
                    k::conv1d_backward(
                        grad, &x.data, &w.data, n, c_in, len, c_out, width,
                        None, None, Some(db),
                    );
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate_b = matches!(op, Op::Sub { .. });
                let out_shape = k::broadcast_shape(&a.shape, &b.shape).unwrap();
                if a.node.is_some() {
                    let astr = k::broadcast_strides(&a.shape, &out_shape);
                    let da = slot(grads, a).unwrap();
                    for (flat, &g) in grad.iter().enumerate() {
                        da[k::broadcast_offset(flat, &out_shape, &astr)] += g;
                    }
                }
                if b.node.is_some() {
                    let bstr = k::broadcast_strides(&b.shape, &out_shape);
                    let db = slot(grads, b).unwrap();
                    for (flat, &g) in grad.iter().enumerate() {
                        let off = k::broadcast_offset(flat, &out_shape, &bstr);
                        if negate_b {
                            db[off] -= g;
                        } else {
                            db[off] += g;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let out_shape = k::broadcast_shape(&a.shape, &b.shape).unwrap();
                let astr = k::broadcast_strides(&a.shape, &out_shape);
                let bstr = k::broadcast_strides(&b.shape, &out_shape);
                if a.node.is_some() {
                    let da = slot(grads, a).unwrap();
                    for (flat, &g) in grad.iter().enumerate() {
                        da[k::broadcast_offset(flat, &out_shape, &astr)] +=
                            g * b.data[k::broadcast_offset(flat, &out_shape, &bstr)];
                    }
                }
                if b.node.is_some() {
                    let db = slot(grads, b).unwrap();
                    for (flat, &g) in grad.iter().enumerate() {
                        db[k::broadcast_offset(flat, &out_shape, &bstr)] +=
                            g * a.data[k::broadcast_offset(flat, &out_shape, &astr)];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let mut total = 0;
                for p in parts {
                    total += p.shape[axis];
                }
                let outer: usize = parts[0].shape[..axis].iter().product();
                let inner: usize = parts[0].shape[axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let len = p.shape[axis];
                    if p.node.is_some() {
                        let dp = slot(grads, p).unwrap();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                dp[dst + j] += grad[src + j];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose { x, perm } => {
                if x.node.is_some() {
                    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
                    let xstr = k::strides(&x.shape);
                    let dx = slot(grads, x).unwrap();
                    for (flat, &g) in grad.iter().enumerate() {
                        let mut rem = flat;
                        let mut xoff = 0;
                        for i in (0..out_shape.len()).rev() {
                            let c = rem % out_shape[i];
                            rem /= out_shape[i];
                            xoff += c * xstr[perm[i]];
                        }
                        dx[xoff] += g;
                    }
                }
            }
            Op::Reshape { x } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(grad) {
                        *d += g;
                    }
                }
            }
            Op::Sigmoid { x, y } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * y[i] * (S::one() - y[i]);
                    }
                }
            }
            Op::Tanh { x, y } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * (S::one() - y[i] * y[i]);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if x.node.is_some() {
                    let slope = *slope;
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        let factor = if x.data[i] > S::zero() { S::one() } else { slope };
                        dx[i] += grad[i] * factor;
                    }
                }
            }
            Op::Abs { x } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        if x.data[i] > S::zero() {
                            dx[i] += grad[i];
                        } else if x.data[i] < S::zero() {
                            dx[i] -= grad[i];
                        }
                    }
                }
            }
            Op::Softmax { x, axis, y } => {
                if x.node.is_some() {
                    let (outer, len, inner) = Self::fiber_geom(&x.shape, *axis).unwrap();
                    let dx = slot(grads, x).unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = S::zero();
                            for j in 0..len {
                                dot += grad[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] += y[at(j)] * (grad[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                axis,
                y,
                inv_std,
            } => {
                if x.node.is_some() {
                    let (outer, len, inner) = Self::fiber_geom(&x.shape, *axis).unwrap();
                    let count = S::lit(len as f64);
                    let dx = slot(grads, x).unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut g_mean = S::zero();
                            let mut gy_mean = S::zero();
                            for j in 0..len {
                                g_mean += grad[at(j)];
                                gy_mean += grad[at(j)] * y[at(j)];
                            }
                            g_mean = g_mean / count;
                            gy_mean = gy_mean / count;
                            let inv = inv_std[o * inner + i];
                            for j in 0..len {
                                dx[at(j)] += inv * (grad[at(j)] - g_mean - y[at(j)] * gy_mean);
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let g0 = grad[0];
                let scale = S::lit(2.0 / a.data.len() as f64);
                if a.node.is_some() {
                    let da = slot(grads, a).unwrap();
                    for i in 0..a.data.len() {
                        da[i] += g0 * scale * (a.data[i] - b.data[i]);
                    }
                }
                if b.node.is_some() {
                    let db = slot(grads, b).unwrap();
                    for i in 0..a.data.len() {
                        db[i] -= g0 * scale * (a.data[i] - b.data[i]);
                    }
                }
            }
            Op::Mean { x } => {
                if x.node.is_some() {
                    let g0 = grad[0] / S::lit(x.data.len() as f64);
                    let dx = slot(grads, x).unwrap();
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::Sum { x } => {
                if x.node.is_some() {
                    let g0 = grad[0];
                    let dx = slot(grads, x).unwrap();
                    for d in dx.iter_mut() {
                        *d += g0;
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                if x.node.is_some() {
                    let (outer, len, inner) = Self::fiber_geom(&x.shape, *axis).unwrap();
                    let count = S::lit(len as f64);
                    let dx = slot(grads, x).unwrap();
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] += grad[o * inner + i] / count;
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if x.node.is_some() {
                    let (outer, len, inner) = Self::fiber_geom(&x.shape, *axis).unwrap();
                    let dx = slot(grads, x).unwrap();
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] += grad[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if x.node.is_some() {
                    let c = *c;
                    let dx = slot(grads, x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(grad) {
                        *d += g * c;
                    }
                }
            }
            Op::AddScalar { x } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for (d, &g) in dx.iter_mut().zip(grad) {
                        *d += g;
                    }
                }
            }
            Op::Powf { x, p } => {
                if x.node.is_some() {
                    let p = *p;
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * p * x.data[i].powf(p - S::one());
                    }
                }
            }
            Op::ClampMin { x, c } => {
                if x.node.is_some() {
                    let c = *c;
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        if x.data[i] > c {
                            dx[i] += grad[i];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if x.node.is_some() {
                    let dx = slot(grads, x).unwrap();
                    for i in 0..grad.len() {
                        dx[i] += grad[i] * mask[i];
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep: per-node gradient buffers.
pub struct Gradients<S: Scalar> {
    tape: u64,
    by_node: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a tensor recorded on the originating tape, if any flowed.
    pub fn grad(&self, t: &Tensor<S>) -> Option<&[S]> {
        let node = t.node().filter(|n| n.tape == self.tape)?;
        self.by_node.get(node.index)?.as_deref()
    }

    /// Gradient for `t` with `t`'s shape, or zeros when the loss never
    /// reached it. Watched parameters that a configuration leaves unused
    /// land here.
    pub fn grad_or_zeros(&self, t: &Tensor<S>) -> Tensor<S> {
        let data = self
            .grad(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![S::zero(); t.numel()]);
        Tensor::from_vec(t.shape().to_vec(), data).expect("gradient matches tensor shape")
    }
}
