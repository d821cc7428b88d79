//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in forward order; [`Tensor`] values are
//! lightweight handles into it. Calling [`Tensor::backward`] on a scalar
//! walks the record once in reverse and deposits gradients on every
//! `requires_grad` leaf. Everything is `f64` and shapes are explicit
//! (rows, cols) pairs — there is no broadcasting; use [`Tensor::expand_rows`]
//! and friends when a shape change is intended.
//!
//! Parameters live outside any tape in a [`ParamStore`] of named matrices,
//! which is plain data and can be shared across threads; each training step
//! leases them onto a fresh tape, runs backward, and applies [`adam_step`].
//! A tape and its tensors stay on one thread.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: bad shape {shape:?}: {detail}")]
    BadShape {
        op: &'static str,
        shape: (usize, usize),
        detail: String,
    },
    #[error("data length {got} does not match shape for {expected} elements")]
    DataLength { expected: usize, got: usize },
    #[error("operands belong to different tapes")]
    CrossTape,
    #[error("backward requires a scalar, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("tape already consumed by backward; rebuild the forward pass")]
    TapeConsumed,
    #[error("{op}: index {index} out of bounds for {bound}")]
    BadIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("dropout rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("cross_entropy: every target position is ignored")]
    NoActiveTargets,
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One recorded operation. Auxiliary data needed by the backward rule is
/// stored inline at forward time.
#[derive(Debug)]
enum OpKind {
    Leaf,
    Matmul,
    /// `a · bᵀ`
    MatmulNT,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ConcatCols,
    ConcatRows,
    SliceCols {
        from: usize,
    },
    SliceRows {
        from: usize,
    },
    Reshape,
    ExpandRows,
    SumCols,
    /// Multiply every row of the first parent by the matching scalar row of
    /// the second (an `(m, 1)` column).
    MulColVec,
    Sum,
    EmbeddingLookup {
        ids: Vec<usize>,
    },
    Softmax,
    LogSoftmax,
    Tanh,
    Sigmoid,
    Relu,
    LayerNorm {
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        mask: Vec<f64>,
    },
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f64>,
        active: Vec<bool>,
        n_active: usize,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    parents: Vec<usize>,
    op: OpKind,
    requires_grad: bool,
    /// True when this node lies on a path from a `requires_grad` leaf.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Recording context for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

/// Handle to one value on a tape.
#[derive(Clone, Debug)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(
        &self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        parents: Vec<usize>,
        op: OpKind,
        requires_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.inner.nodes.borrow_mut();
        let needs_grad =
            requires_grad || parents.iter().any(|&p| nodes[p].needs_grad);
        let id = nodes.len();
        nodes.push(Node {
            rows,
            cols,
            value,
            parents,
            op,
            requires_grad,
            needs_grad,
            grad: None,
        });
        Tensor {
            tape: self.clone(),
            id,
            rows,
            cols,
        }
    }

    /// A differentiable input. Gradients accumulate here during backward.
    pub fn leaf(
        &self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor, TensorError> {
        self.input(data, rows, cols, true)
    }

    /// A non-differentiable input (data, masks, positional tables).
    pub fn constant(
        &self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
    ) -> Result<Tensor, TensorError> {
        self.input(data, rows, cols, false)
    }

    fn input(
        &self,
        data: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<Tensor, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(self.push(rows, cols, data, Vec::new(), OpKind::Leaf, requires_grad))
    }

    pub fn scalar(&self, v: f64) -> Result<Tensor, TensorError> {
        self.constant(vec![v], 1, 1)
    }

    /// Stack tensors left-to-right: `(m, a) ++ (m, b) -> (m, a + b)`.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        self.concat(parts, true)
    }

    /// Stack tensors top-to-bottom: `(a, n) ++ (b, n) -> (a + b, n)`.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        self.concat(parts, false)
    }

    fn concat(&self, parts: &[&Tensor], by_cols: bool) -> Result<Tensor, TensorError> {
        let op = if by_cols { "concat_cols" } else { "concat_rows" };
        let first = parts.first().ok_or_else(|| TensorError::BadShape {
            op: "concat",
            shape: (0, 0),
            detail: "no operands".into(),
        })?;
        for p in parts {
            if !Rc::ptr_eq(&p.tape.inner, &self.inner) {
                return Err(TensorError::CrossTape);
            }
            let matches = if by_cols {
                p.rows == first.rows
            } else {
                p.cols == first.cols
            };
            if !matches {
                return Err(TensorError::ShapeMismatch {
                    op,
                    left: (first.rows, first.cols),
                    right: (p.rows, p.cols),
                });
            }
        }
        let (rows, cols) = if by_cols {
            (first.rows, parts.iter().map(|p| p.cols).sum())
        } else {
            (parts.iter().map(|p| p.rows).sum(), first.cols)
        };
        let mut value = vec![0.0; rows * cols];
        if by_cols {
            let mut col0 = 0;
            for p in parts {
                let pv = p.values();
                for r in 0..rows {
                    value[r * cols + col0..r * cols + col0 + p.cols]
                        .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
                }
                col0 += p.cols;
            }
        } else {
            let mut row0 = 0;
            for p in parts {
                let pv = p.values();
                value[row0 * cols..(row0 + p.rows) * cols].copy_from_slice(&pv);
                row0 += p.rows;
            }
        }
        let parents = parts.iter().map(|p| p.id).collect();
        let kind = if by_cols {
            OpKind::ConcatCols
        } else {
            OpKind::ConcatRows
        };
        Ok(self.push(rows, cols, value, parents, kind, false))
    }
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the forward value.
    pub fn values(&self) -> Vec<f64> {
        self.tape.inner.nodes.borrow()[self.id].value.clone()
    }

    /// The single element of a `(1, 1)` tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if (self.rows, self.cols) != (1, 1) {
            return Err(TensorError::NotScalar {
                shape: (self.rows, self.cols),
            });
        }
        Ok(self.tape.inner.nodes.borrow()[self.id].value[0])
    }

    /// Gradient deposited by the last backward pass, if any. A
    /// `requires_grad` leaf that backward never reached reads as all zeros.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Tensor) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::CrossTape)
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if (self.rows, self.cols) == (other.rows, other.cols) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            })
        }
    }

    fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.nodes.borrow()[self.id].value)
    }

    fn binary_elementwise(
        &self,
        other: &Tensor,
        op: &'static str,
        kind: OpKind,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        self.same_tape(other)?;
        self.same_shape(other, op)?;
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id, other.id],
            kind,
            false,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "add", OpKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "sub", OpKind::Sub, |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.binary_elementwise(other, "mul", OpKind::Mul, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| v.iter().map(|&x| x * c).collect());
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id],
            OpKind::Scale(c),
            false,
        ))
    }

    /// `(m, k) · (k, n) -> (m, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_tape(other)?;
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            matmul_ikj(&nodes[self.id].value, &nodes[other.id].value, m, k, n)
        };
        Ok(self
            .tape
            .push(m, n, value, vec![self.id, other.id], OpKind::Matmul, false))
    }

    /// `(m, k) · (n, k)ᵀ -> (m, n)`; both operands row-major, no transposed
    /// copy is materialized.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_tape(other)?;
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: (self.rows, self.cols),
                right: (other.rows, other.cols),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[j * k + p];
                    }
                    out[i * n + j] = acc;
                }
            }
            out
        };
        Ok(self.tape.push(
            m,
            n,
            value,
            vec![self.id, other.id],
            OpKind::MatmulNT,
            false,
        ))
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor, TensorError> {
        if from >= to || to > self.cols {
            return Err(TensorError::BadIndex {
                op: "slice_cols",
                index: to,
                bound: self.cols,
            });
        }
        let w = to - from;
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(self.rows * w);
            for r in 0..self.rows {
                out.extend_from_slice(&v[r * self.cols + from..r * self.cols + to]);
            }
            out
        });
        Ok(self.tape.push(
            self.rows,
            w,
            value,
            vec![self.id],
            OpKind::SliceCols { from },
            false,
        ))
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor, TensorError> {
        if from >= to || to > self.rows {
            return Err(TensorError::BadIndex {
                op: "slice_rows",
                index: to,
                bound: self.rows,
            });
        }
        let value =
            self.with_value(|v| v[from * self.cols..to * self.cols].to_vec());
        Ok(self.tape.push(
            to - from,
            self.cols,
            value,
            vec![self.id],
            OpKind::SliceRows { from },
            false,
        ))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor, TensorError> {
        if rows * cols != self.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape: (rows, cols),
                detail: format!("element count {} != {}", rows * cols, self.len()),
            });
        }
        let value = self.values();
        Ok(self
            .tape
            .push(rows, cols, value, vec![self.id], OpKind::Reshape, false))
    }

    /// Repeat a `(1, n)` row `times` times into `(times, n)`.
    pub fn expand_rows(&self, times: usize) -> Result<Tensor, TensorError> {
        if self.rows != 1 {
            return Err(TensorError::BadShape {
                op: "expand_rows",
                shape: (self.rows, self.cols),
                detail: "expected a single row".into(),
            });
        }
        if times == 0 {
            return Err(TensorError::BadIndex {
                op: "expand_rows",
                index: 0,
                bound: 1,
            });
        }
        let value = self.with_value(|v| v.repeat(times));
        Ok(self.tape.push(
            times,
            self.cols,
            value,
            vec![self.id],
            OpKind::ExpandRows,
            false,
        ))
    }

    /// Row sums: `(m, n) -> (m, 1)`.
    pub fn sum_cols(&self) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| {
            (0..self.rows)
                .map(|r| v[r * self.cols..(r + 1) * self.cols].iter().sum())
                .collect()
        });
        Ok(self.tape.push(
            self.rows,
            1,
            value,
            vec![self.id],
            OpKind::SumCols,
            false,
        ))
    }

    /// Scale row `i` of `self` by element `i` of the `(m, 1)` column `v`.
    pub fn mul_colvec(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        self.same_tape(v)?;
        if v.cols != 1 || v.rows != self.rows {
            return Err(TensorError::ShapeMismatch {
                op: "mul_colvec",
                left: (self.rows, self.cols),
                right: (v.rows, v.cols),
            });
        }
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            let a = &nodes[self.id].value;
            let col = &nodes[v.id].value;
            let mut out = vec![0.0; self.rows * self.cols];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[r * self.cols + c] = a[r * self.cols + c] * col[r];
                }
            }
            out
        };
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id, v.id],
            OpKind::MulColVec,
            false,
        ))
    }

    /// Sum of all elements, as a `(1, 1)` tensor.
    pub fn sum(&self) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| vec![v.iter().sum()]);
        Ok(self
            .tape
            .push(1, 1, value, vec![self.id], OpKind::Sum, false))
    }

    /// Gather rows of an embedding table: `self` is `(vocab, dim)`, output is
    /// `(ids.len(), dim)`.
    pub fn embedding_lookup(&self, ids: &[usize]) -> Result<Tensor, TensorError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.rows) {
            return Err(TensorError::BadIndex {
                op: "embedding_lookup",
                index: bad,
                bound: self.rows,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::BadShape {
                op: "embedding_lookup",
                shape: (0, self.cols),
                detail: "no ids".into(),
            });
        }
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(ids.len() * self.cols);
            for &i in ids {
                out.extend_from_slice(&v[i * self.cols..(i + 1) * self.cols]);
            }
            out
        });
        Ok(self.tape.push(
            ids.len(),
            self.cols,
            value,
            vec![self.id],
            OpKind::EmbeddingLookup { ids: ids.to_vec() },
            false,
        ))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax(&self) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for r in 0..self.rows {
                let row = &v[r * self.cols..(r + 1) * self.cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - max).exp();
                    out[r * self.cols + j] = e;
                    z += e;
                }
                for j in 0..self.cols {
                    out[r * self.cols + j] /= z;
                }
            }
            out
        });
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id],
            OpKind::Softmax,
            false,
        ))
    }

    /// Row-wise log-softmax (numerically stable log-sum-exp).
    pub fn log_softmax(&self) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| {
            let mut out = vec![0.0; v.len()];
            for r in 0..self.rows {
                let row = &v[r * self.cols..(r + 1) * self.cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
                for j in 0..self.cols {
                    out[r * self.cols + j] = row[j] - lse;
                }
            }
            out
        });
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id],
            OpKind::LogSoftmax,
            false,
        ))
    }

    fn unary(
        &self,
        kind: OpKind,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let value = self.with_value(|v| v.iter().map(|&x| f(x)).collect());
        Ok(self
            .tape
            .push(self.rows, self.cols, value, vec![self.id], kind, false))
    }

    pub fn tanh(&self) -> Result<Tensor, TensorError> {
        self.unary(OpKind::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor, TensorError> {
        self.unary(OpKind::Sigmoid, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn relu(&self) -> Result<Tensor, TensorError> {
        self.unary(OpKind::Relu, |x| x.max(0.0))
    }

    /// Row-wise layer normalization with learnable `(1, n)` gain and bias.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, TensorError> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        for (t, name) in [(gamma, "layer_norm gain"), (beta, "layer_norm bias")] {
            if t.rows != 1 || t.cols != self.cols {
                return Err(TensorError::ShapeMismatch {
                    op: if name.ends_with("gain") {
                        "layer_norm(gamma)"
                    } else {
                        "layer_norm(beta)"
                    },
                    left: (self.rows, self.cols),
                    right: (t.rows, t.cols),
                });
            }
        }
        const EPS: f64 = 1e-5;
        let n = self.cols as f64;
        let mut mean = vec![0.0; self.rows];
        let mut rstd = vec![0.0; self.rows];
        let value = {
            let nodes = self.tape.inner.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gamma.id].value;
            let b = &nodes[beta.id].value;
            let mut out = vec![0.0; x.len()];
            for r in 0..self.rows {
                let row = &x[r * self.cols..(r + 1) * self.cols];
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let rs = 1.0 / (var + EPS).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                for j in 0..self.cols {
                    out[r * self.cols + j] = (row[j] - mu) * rs * g[j] + b[j];
                }
            }
            out
        };
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id, gamma.id, beta.id],
            OpKind::LayerNorm { mean, rstd },
            false,
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` so
    /// inference needs no rescaling. Rate 0 is the identity; the mask is a
    /// deterministic function of `seed`.
    pub fn dropout(&self, rate: f64, seed: u64) -> Result<Tensor, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::BadRate(rate));
        }
        let mask: Vec<f64> = if rate == 0.0 {
            vec![1.0; self.len()]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = 1.0 - rate;
            (0..self.len())
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let value = self.with_value(|v| {
            v.iter().zip(&mask).map(|(&x, &m)| x * m).collect()
        });
        Ok(self.tape.push(
            self.rows,
            self.cols,
            value,
            vec![self.id],
            OpKind::Dropout { mask },
            false,
        ))
    }

    /// Mean token-level cross entropy from logits. Row `r` of `self` scores
    /// the class set for target `targets[r]`; rows whose target equals
    /// `ignore_id` contribute nothing to the loss and receive exactly zero
    /// gradient.
    pub fn cross_entropy(
        &self,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Tensor, TensorError> {
        if targets.len() != self.rows {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                shape: (self.rows, self.cols),
                detail: format!("{} targets for {} rows", targets.len(), self.rows),
            });
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != ignore_id && t >= self.cols)
        {
            return Err(TensorError::BadIndex {
                op: "cross_entropy",
                index: bad,
                bound: self.cols,
            });
        }
        let active: Vec<bool> = targets.iter().map(|&t| t != ignore_id).collect();
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(TensorError::NoActiveTargets);
        }
        let mut probs = vec![0.0; self.len()];
        let loss = self.with_value(|v| {
            let mut total = 0.0;
            for r in 0..self.rows {
                if !active[r] {
                    continue;
                }
                let row = &v[r * self.cols..(r + 1) * self.cols];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - max).exp();
                    probs[r * self.cols + j] = e;
                    z += e;
                }
                for j in 0..self.cols {
                    probs[r * self.cols + j] /= z;
                }
                total -= probs[r * self.cols + targets[r]].ln();
            }
            total / n_active as f64
        });
        Ok(self.tape.push(
            1,
            1,
            vec![loss],
            vec![self.id],
            OpKind::CrossEntropy {
                targets: targets.to_vec(),
                probs,
                active,
                n_active,
            },
            false,
        ))
    }

    /// Reverse sweep from this scalar. Gradients land on every
    /// `requires_grad` leaf (zeros where the loss does not depend on it).
    /// The tape is consumed: a second backward without a fresh forward pass
    /// is an error.
    pub fn backward(&self) -> Result<(), TensorError> {
        if (self.rows, self.cols) != (1, 1) {
            return Err(TensorError::NotScalar {
                shape: (self.rows, self.cols),
            });
        }
        if self.inner_consumed() {
            return Err(TensorError::TapeConsumed);
        }
        self.tape.inner.consumed.set(true);

        let mut nodes = self.tape.inner.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[self.id] = Some(vec![1.0]);

        for id in (0..=self.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[id].needs_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            if nodes[id].requires_grad {
                nodes[id].grad = Some(g);
            }
        }
        // Leaves the loss never reached still report a gradient: zero.
        for node in nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn inner_consumed(&self) -> bool {
        self.tape.inner.consumed.get()
    }
}

/// Cache-friendly row-major matmul (i-k-j loop order).
fn matmul_ikj(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, add: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    add(buf);
}

/// Apply the local gradient rule of node `id`, accumulating into its parents.
fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let parents = &node.parents;
    let parent_needs = |i: usize| nodes[parents[i]].needs_grad;
    match &node.op {
        OpKind::Leaf => {}
        OpKind::Matmul => {
            let (a, b) = (&nodes[parents[0]], &nodes[parents[1]]);
            let (m, k, n) = (a.rows, a.cols, b.cols);
            if parent_needs(0) {
                // dA = g · Bᵀ
                accumulate(&mut grads[parents[0]], m * k, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * b.value[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
            }
            if parent_needs(1) {
                // dB = Aᵀ · g
                accumulate(&mut grads[parents[1]], k * n, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = a.value[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
        }
        OpKind::MatmulNT => {
            let (a, b) = (&nodes[parents[0]], &nodes[parents[1]]);
            let (m, k, n) = (a.rows, a.cols, b.rows);
            if parent_needs(0) {
                // dA = g · B
                accumulate(&mut grads[parents[0]], m * k, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * b.value[j * k + p];
                            }
                        }
                    }
                });
            }
            if parent_needs(1) {
                // dB = gᵀ · A
                accumulate(&mut grads[parents[1]], n * k, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * a.value[i * k + p];
                            }
                        }
                    }
                });
            }
        }
        OpKind::Add => {
            for side in 0..2 {
                if parent_needs(side) {
                    accumulate(&mut grads[parents[side]], g.len(), |d| {
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
        }
        OpKind::Sub => {
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], g.len(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            if parent_needs(1) {
                accumulate(&mut grads[parents[1]], g.len(), |d| {
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
        }
        OpKind::Mul => {
            let (a, b) = (&nodes[parents[0]], &nodes[parents[1]]);
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * b.value[i];
                    }
                });
            }
            if parent_needs(1) {
                accumulate(&mut grads[parents[1]], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * a.value[i];
                    }
                });
            }
        }
        OpKind::Scale(c) => {
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], g.len(), |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * c;
                    }
                });
            }
        }
        OpKind::ConcatCols => {
            let cols = node.cols;
            let mut col0 = 0;
            for (pi, &p) in parents.iter().enumerate() {
                let pc = nodes[p].cols;
                if parent_needs(pi) {
                    accumulate(&mut grads[p], nodes[p].value.len(), |d| {
                        for r in 0..node.rows {
                            for c in 0..pc {
                                d[r * pc + c] += g[r * cols + col0 + c];
                            }
                        }
                    });
                }
                col0 += pc;
            }
        }
        OpKind::ConcatRows => {
            let cols = node.cols;
            let mut row0 = 0;
            for (pi, &p) in parents.iter().enumerate() {
                let pr = nodes[p].rows;
                if parent_needs(pi) {
                    accumulate(&mut grads[p], nodes[p].value.len(), |d| {
                        d.iter_mut()
                            .zip(&g[row0 * cols..(row0 + pr) * cols])
                            .for_each(|(dv, &gv)| *dv += gv);
                    });
                }
                row0 += pr;
            }
        }
        OpKind::SliceCols { from } => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                let (pc, w) = (parent.cols, node.cols);
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    for r in 0..node.rows {
                        for c in 0..w {
                            d[r * pc + from + c] += g[r * w + c];
                        }
                    }
                });
            }
        }
        OpKind::SliceRows { from } => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                let cols = parent.cols;
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    d[from * cols..from * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(dv, &gv)| *dv += gv);
                });
            }
        }
        OpKind::Reshape => {
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], g.len(), |d| {
                    d.iter_mut().zip(g).for_each(|(dv, &gv)| *dv += gv);
                });
            }
        }
        OpKind::ExpandRows => {
            if parent_needs(0) {
                let cols = node.cols;
                accumulate(&mut grads[parents[0]], cols, |d| {
                    for r in 0..node.rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                });
            }
        }
        OpKind::SumCols => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                let cols = parent.cols;
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    for r in 0..parent.rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[r];
                        }
                    }
                });
            }
        }
        OpKind::MulColVec => {
            let (a, v) = (&nodes[parents[0]], &nodes[parents[1]]);
            let cols = a.cols;
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], a.value.len(), |d| {
                    for r in 0..a.rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[r * cols + c] * v.value[r];
                        }
                    }
                });
            }
            if parent_needs(1) {
                accumulate(&mut grads[parents[1]], v.value.len(), |d| {
                    for r in 0..a.rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g[r * cols + c] * a.value[r * cols + c];
                        }
                        d[r] += acc;
                    }
                });
            }
        }
        OpKind::Sum => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                });
            }
        }
        OpKind::EmbeddingLookup { ids } => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                let dim = parent.cols;
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..dim {
                            d[i * dim + c] += g[r * dim + c];
                        }
                    }
                });
            }
        }
        OpKind::Softmax => {
            if parent_needs(0) {
                let y = &node.value;
                let cols = node.cols;
                accumulate(&mut grads[parents[0]], y.len(), |d| {
                    for r in 0..node.rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
        }
        OpKind::LogSoftmax => {
            if parent_needs(0) {
                let y = &node.value;
                let cols = node.cols;
                accumulate(&mut grads[parents[0]], y.len(), |d| {
                    for r in 0..node.rows {
                        let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let p = y[r * cols + c].exp();
                            d[r * cols + c] += g[r * cols + c] - p * gsum;
                        }
                    }
                });
            }
        }
        OpKind::Tanh => {
            if parent_needs(0) {
                let y = &node.value;
                accumulate(&mut grads[parents[0]], y.len(), |d| {
                    for i in 0..y.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
        }
        OpKind::Sigmoid => {
            if parent_needs(0) {
                let y = &node.value;
                accumulate(&mut grads[parents[0]], y.len(), |d| {
                    for i in 0..y.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
        }
        OpKind::Relu => {
            if parent_needs(0) {
                let y = &node.value;
                accumulate(&mut grads[parents[0]], y.len(), |d| {
                    for i in 0..y.len() {
                        if y[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
        }
        OpKind::LayerNorm { mean, rstd } => {
            let x = &nodes[parents[0]];
            let gamma = &nodes[parents[1]];
            let cols = node.cols;
            let n = cols as f64;
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], x.value.len(), |d| {
                    for r in 0..node.rows {
                        let xr = &x.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let xhat = (xr[c] - mean[r]) * rstd[r];
                            let dxhat = gr[c] * gamma.value[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for c in 0..cols {
                            let xhat = (xr[c] - mean[r]) * rstd[r];
                            let dxhat = gr[c] * gamma.value[c];
                            d[r * cols + c] += rstd[r]
                                * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                });
            }
            if parent_needs(1) {
                accumulate(&mut grads[parents[1]], cols, |d| {
                    for r in 0..node.rows {
                        for c in 0..cols {
                            let xhat = (x.value[r * cols + c] - mean[r]) * rstd[r];
                            d[c] += g[r * cols + c] * xhat;
                        }
                    }
                });
            }
            if parent_needs(2) {
                accumulate(&mut grads[parents[2]], cols, |d| {
                    for r in 0..node.rows {
                        for c in 0..cols {
                            d[c] += g[r * cols + c];
                        }
                    }
                });
            }
        }
        OpKind::Dropout { mask } => {
            if parent_needs(0) {
                accumulate(&mut grads[parents[0]], mask.len(), |d| {
                    for i in 0..mask.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
        }
        OpKind::CrossEntropy {
            targets,
            probs,
            active,
            n_active,
        } => {
            if parent_needs(0) {
                let parent = &nodes[parents[0]];
                let cols = parent.cols;
                let scale = g[0] / *n_active as f64;
                accumulate(&mut grads[parents[0]], parent.value.len(), |d| {
                    for r in 0..parent.rows {
                        if !active[r] {
                            continue; // masked rows: exactly zero gradient
                        }
                        for c in 0..cols {
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            d[r * cols + c] += scale * (probs[r * cols + c] - indicator);
                        }
                    }
                });
            }
        }
    }
}

/// Named parameter matrices, independent of any tape. Plain data: safe to
/// share read-only across threads while per-thread tapes lease from it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_owned()));
        }
        if data.len() != rows * cols {
            return Err(TensorError::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        self.index.insert(name.to_owned(), self.names.len());
        self.names.push(name.to_owned());
        self.shapes.push((rows, cols));
        self.values.push(data);
        Ok(())
    }

    pub fn add_init(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        mut init: impl FnMut() -> f64,
    ) -> Result<(), TensorError> {
        let data = (0..rows * cols).map(|_| init()).collect();
        self.add(name, rows, cols, data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).map(|&i| self.shapes[i])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.values[i].as_slice())
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))?;
        let expected = self.shapes[i].0 * self.shapes[i].1;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        self.values[i] = data;
        Ok(())
    }

    /// Names in registration order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn tensor_count(&self) -> usize {
        self.names.len()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Copy a parameter onto `tape` as a differentiable leaf.
    pub fn lease(&self, tape: &Tape, name: &str) -> Result<Tensor, TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_owned()))?;
        let (rows, cols) = self.shapes[i];
        tape.leaf(self.values[i].clone(), rows, cols)
    }
}

/// First and second moment buffers for [`adam_step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.values.iter().map(|v| vec![0.0; v.len()]).collect(),
            v: store.values.iter().map(|v| vec![0.0; v.len()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected adaptive-moment update with the usual defaults
/// (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`). Parameters without an
/// entry in `grads` see a zero gradient this step.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    adam_step_with(store, grads, state, lr, 0.9, 0.999, 1e-8)
}

pub fn adam_step_with(
    store: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TensorError> {
    for (name, g) in grads {
        let i = *store
            .index
            .get(name.as_str())
            .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        if g.len() != store.values[i].len() {
            return Err(TensorError::DataLength {
                expected: store.values[i].len(),
                got: g.len(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    const ZERO: &[f64] = &[];
    for i in 0..store.values.len() {
        let g = grads
            .get(&store.names[i])
            .map(|g| g.as_slice())
            .unwrap_or(ZERO);
        let params = &mut store.values[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..params.len() {
            let gj = g.get(j).copied().unwrap_or(0.0);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            params[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut HashMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
