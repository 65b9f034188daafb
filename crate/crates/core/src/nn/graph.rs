//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar node with respect to every node that requires one. Constant leaves
//! and frozen parameters never receive gradients, so no work is spent on them.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::tensor::{gemm_acc, Scalar, Tensor};

use super::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Valid-length bookkeeping for a padded, time-major sequence batch.
///
/// Row `t * batch + b` is valid iff `t < lens[b]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub steps: usize,
    pub batch: usize,
    pub lens: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lens: Vec<usize>) -> Self {
        let steps = lens.iter().copied().max().unwrap_or(0);
        Self {
            steps,
            batch: lens.len(),
            lens,
        }
    }

    /// Layout after keeping only even time indices: lengths become `ceil(len / 2)`.
    pub fn subsampled(&self) -> Self {
        Self::new(self.lens.iter().map(|&l| l.div_ceil(2)).collect())
    }

    #[inline]
    pub fn row_valid(&self, row: usize) -> bool {
        let t = row / self.batch;
        let b = row % self.batch;
        t < self.lens[b]
    }

    pub fn rows(&self) -> usize {
        self.steps * self.batch
    }

    pub fn valid_count(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Column vector (rows × 1) with 1 on valid rows and 0 on padding.
    pub fn row_mask<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(self.rows(), 1, |r, _| {
            if self.row_valid(r) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Batch × steps mask with 1 on valid positions.
    pub fn bt_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.batch * self.steps];
        for (b, &len) in self.lens.iter().enumerate() {
            for t in 0..len {
                mask[b * self.steps + t] = true;
            }
        }
        mask
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    MulConst(Var, Rc<Tensor<T>>),
    Blend(Var, Var, Rc<Tensor<T>>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Tile(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    MaskedSoftmax(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Tensor<T>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<T>,
        weights: Vec<T>,
    },
    WeightedSum {
        weights: Var,
        states: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        layout: Rc<SeqLayout>,
        width: usize,
        cols: Tensor<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Rc<SeqLayout>,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
        /// Activated gates `[i f g o]` followed by `tanh(c)`.
        cache: Tensor<T>,
    },
    LstmSeq {
        xproj: Var,
        recur: Var,
        layout: Rc<SeqLayout>,
        reverse: bool,
        acts: Tensor<T>,
        cells: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf that receives a gradient (used by gradient checks).
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Frozen parameters become constants on this tape.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let n = self.nodes.borrow();
            n[a.0].value.matmul(&n[b.0].value)
        };
        self.push(value, Op::MatMul(a, b), self.ng(&[a, b]))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let n = self.nodes.borrow();
        let (x, y) = (&n[a.0].value, &n[b.0].value);
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), self.ng(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), self.ng(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), self.ng(&[a, b]))
    }

    /// Adds a 1×C row vector to every row of an N×C matrix.
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        let value = {
            let n = self.nodes.borrow();
            let (xv, rv) = (&n[x.0].value, &n[row.0].value);
            assert_eq!(rv.rows(), 1, "add_row expects a 1xC row");
            assert_eq!(xv.cols(), rv.cols(), "add_row width mismatch");
            let mut out = xv.clone();
            let cols = xv.cols();
            for chunk in out.data_mut().chunks_mut(cols) {
                for (o, &r) in chunk.iter_mut().zip(rv.data()) {
                    *o += r;
                }
            }
            out
        };
        self.push(value, Op::AddRow(x, row), self.ng(&[x, row]))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|p| p * c);
        self.push(v, Op::Scale(x, c), self.ng(&[x]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.tanh());
        self.push(v, Op::Tanh(x), self.ng(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), self.ng(&[x]))
    }

    pub fn relu(&self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.max(T::zero()));
        self.push(v, Op::Relu(x), self.ng(&[x]))
    }

    pub fn abs(&self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.abs());
        self.push(v, Op::Abs(x), self.ng(&[x]))
    }

    /// Elementwise product with a constant tensor (dropout masks, padding masks).
    pub fn mul_const(&self, x: Var, m: Rc<Tensor<T>>) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let xv = &n[x.0].value;
            assert_eq!(xv.shape(), m.shape(), "mul_const shape mismatch");
            let data = xv
                .data()
                .iter()
                .zip(m.data())
                .map(|(&p, &q)| p * q)
                .collect();
            Tensor::from_vec(xv.rows(), xv.cols(), data)
        };
        self.push(v, Op::MulConst(x, m), self.ng(&[x]))
    }

    /// `m ⊙ a + (1 − m) ⊙ b` for a constant mixing tensor `m`.
    pub fn blend(&self, a: Var, b: Var, m: Rc<Tensor<T>>) -> Var {
        let v = {
            let n = self.nodes.borrow();
            let (av, bv) = (&n[a.0].value, &n[b.0].value);
            assert_eq!(av.shape(), bv.shape(), "blend shape mismatch");
            assert_eq!(av.shape(), m.shape(), "blend mask shape mismatch");
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .zip(m.data())
                .map(|((&p, &q), &w)| {
                    if w == T::one() {
                        p
                    } else if w == T::zero() {
                        q
                    } else {
                        w * p + (T::one() - w) * q
                    }
                })
                .collect();
            Tensor::from_vec(av.rows(), av.cols(), data)
        };
        self.push(v, Op::Blend(a, b, m), self.ng(&[a, b]))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let value = {
            let n = self.nodes.borrow();
            let rows = n[parts[0].0].value.rows();
            let total: usize = parts.iter().map(|p| n[p.0].value.cols()).sum();
            let mut out = Tensor::zeros(rows, total);
            let mut off = 0;
            for p in parts {
                let pv = &n[p.0].value;
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                }
                off += pv.cols();
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.to_vec()), self.ng(parts))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let value = {
            let n = self.nodes.borrow();
            let xv = &n[x.0].value;
            assert!(start + len <= xv.cols(), "slice_cols out of range");
            Tensor::from_fn(xv.rows(), len, |r, c| xv.get(r, start + c))
        };
        self.push(value, Op::SliceCols(x, start), self.ng(&[x]))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let value = {
            let n = self.nodes.borrow();
            let cols = n[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let pv = &n[p.0].value;
                assert_eq!(pv.cols(), cols, "concat_rows column mismatch");
                data.extend_from_slice(pv.data());
                rows += pv.rows();
            }
            Tensor::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.to_vec()), self.ng(parts))
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).rows_slice(start, len);
        self.push(value, Op::SliceRows(x, start), self.ng(&[x]))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&self, x: Var, times: usize) -> Var {
        let value = {
            let xv = self.value(x);
            let mut data = Vec::with_capacity(xv.len() * times);
            for _ in 0..times {
                data.extend_from_slice(xv.data());
            }
            Tensor::from_vec(xv.rows() * times, xv.cols(), data)
        };
        self.push(value, Op::Tile(x, times), self.ng(&[x]))
    }

    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshaped(rows, cols);
        self.push(value, Op::Reshape(x), self.ng(&[x]))
    }

    pub fn transpose(&self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), self.ng(&[x]))
    }

    /// Row lookup (embedding).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let value = {
            let tv = self.value(table);
            let mut data = Vec::with_capacity(ids.len() * tv.cols());
            for &id in ids {
                assert!(id < tv.rows(), "gather id {id} out of range {}", tv.rows());
                data.extend_from_slice(tv.row(id));
            }
            Tensor::from_vec(ids.len(), tv.cols(), data)
        };
        self.push(value, Op::Gather(table, ids.to_vec()), self.ng(&[table]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), self.ng(&[x]))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as `x`).
    /// Masked positions get exactly zero. Panics if a row is fully masked.
    pub fn masked_softmax(&self, x: Var, mask: &[bool]) -> Var {
        let value = {
            let xv = self.value(x);
            assert_eq!(mask.len(), xv.len(), "softmax mask size mismatch");
            let cols = xv.cols();
            let mut out = Tensor::zeros(xv.rows(), cols);
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let m = &mask[r * cols..(r + 1) * cols];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(T::neg_infinity(), T::max);
                assert!(max > T::neg_infinity(), "softmax row {r} fully masked");
                // Exponentials and their total in f64 keep single-precision
                // rows normalized to within rounding of the final values.
                let exps: Vec<f64> = (0..cols)
                    .map(|c| if m[c] { (row[c].as_f64() - max.as_f64()).exp() } else { 0.0 })
                    .collect();
                let total: f64 = exps.iter().sum();
                for (o, e) in out.row_mut(r).iter_mut().zip(&exps) {
                    *o = T::from_f64(e / total);
                }
            }
            out
        };
        self.push(value, Op::MaskedSoftmax(x), self.ng(&[x]))
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])` as a 1×1 node.
    pub fn softmax_xent(&self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let (probs, loss) = {
            let lv = self.value(logits);
            assert_eq!(targets.len(), lv.rows(), "one target per logit row");
            assert_eq!(weights.len(), lv.rows(), "one weight per logit row");
            let probs = softmax_rows(&lv);
            let mut loss = T::zero();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w != T::zero() {
                    loss += w * -log_softmax_at(lv.row(r), t);
                }
            }
            (probs, loss)
        };
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            self.ng(&[logits]),
        )
    }

    /// Weighted binary cross entropy on logits (N×1) against labels in [0, 1].
    pub fn bce_logits(&self, logits: Var, labels: &[T], weights: &[T]) -> Var {
        let loss = {
            let lv = self.value(logits);
            assert_eq!(lv.cols(), 1, "bce_logits expects a column");
            assert_eq!(labels.len(), lv.rows());
            assert_eq!(weights.len(), lv.rows());
            let mut loss = T::zero();
            for ((&z, &y), &w) in lv.data().iter().zip(labels).zip(weights) {
                if w != T::zero() {
                    // softplus(z) − y z, stable for large |z|
                    let sp = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
                    loss += w * (sp - y * z);
                }
            }
            loss
        };
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            self.ng(&[logits]),
        )
    }

    /// Attention read-out: `out[b] = Σ_t weights[b, t] · states[t·B + b]`.
    pub fn weighted_sum(&self, weights: Var, states: Var) -> Var {
        let value = {
            let n = self.nodes.borrow();
            let (a, h) = (&n[weights.0].value, &n[states.0].value);
            let (batch, steps) = a.shape();
            assert_eq!(h.rows(), steps * batch, "weighted_sum layout mismatch");
            let mut out = Tensor::zeros(batch, h.cols());
            for b in 0..batch {
                let o = out.row_mut(b);
                for t in 0..steps {
                    let w = a.get(b, t);
                    if w == T::zero() {
                        continue;
                    }
                    for (x, &y) in o.iter_mut().zip(h.row(t * batch + b)) {
                        *x += w * y;
                    }
                }
            }
            out
        };
        self.push(
            value,
            Op::WeightedSum { weights, states },
            self.ng(&[weights, states]),
        )
    }

    /// Same-length 1-D convolution over time on a time-major batch.
    ///
    /// `x` is (T·B)×Cin, `w` is (width·Cin)×Cout with row `k·Cin + c`. Positions
    /// outside `[0, len_b)` read as zero and padded output rows are zero.
    pub fn conv1d(&self, x: Var, w: Var, layout: Rc<SeqLayout>, width: usize) -> Var {
        assert!(width % 2 == 1, "conv width must be odd");
        let (value, cols) = {
            let n = self.nodes.borrow();
            let (xv, wv) = (&n[x.0].value, &n[w.0].value);
            let cin = xv.cols();
            assert_eq!(xv.rows(), layout.rows(), "conv1d layout mismatch");
            assert_eq!(wv.rows(), width * cin, "conv1d weight shape mismatch");
            let cols = im2col(xv, &layout, width);
            let mut out = Tensor::zeros(xv.rows(), wv.cols());
            gemm_acc(&cols, false, wv, false, &mut out, T::zero());
            (out, cols)
        };
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                layout,
                width,
                cols,
            },
            self.ng(&[x, w]),
        )
    }

    /// Per-channel batch normalization over the valid rows of a sequence batch.
    ///
    /// With `running = None` batch statistics are used and returned so the
    /// caller can update running averages. Padded output rows are zero.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        layout: Rc<SeqLayout>,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let (value, xhat, inv_std, mean, var) = {
            let n = self.nodes.borrow();
            let (xv, gv, bv) = (&n[x.0].value, &n[gamma.0].value, &n[beta.0].value);
            let c = xv.cols();
            assert_eq!(xv.rows(), layout.rows(), "batch_norm layout mismatch");
            assert_eq!(gv.shape(), (1, c));
            assert_eq!(bv.shape(), (1, c));
            let (mean, var) = match running {
                Some((m, v)) => (m.to_vec(), v.to_vec()),
                None => {
                    let count = T::from_f64(layout.valid_count().max(1) as f64);
                    let mut mean = vec![T::zero(); c];
                    for r in (0..xv.rows()).filter(|&r| layout.row_valid(r)) {
                        for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m = *m / count);
                    let mut var = vec![T::zero(); c];
                    for r in (0..xv.rows()).filter(|&r| layout.row_valid(r)) {
                        for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|s| *s = *s / count);
                    (mean, var)
                }
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = Tensor::zeros(xv.rows(), c);
            let mut out = Tensor::zeros(xv.rows(), c);
            for r in (0..xv.rows()).filter(|&r| layout.row_valid(r)) {
                for j in 0..c {
                    let h = (xv.get(r, j) - mean[j]) * inv_std[j];
                    xhat.set(r, j, h);
                    out.set(r, j, gv.data()[j] * h + bv.data()[j]);
                }
            }
            (out, xhat, inv_std, mean, var)
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            self.ng(&[x, gamma, beta]),
        );
        (v, mean, var)
    }

    /// One LSTM step from pre-activation gates (B×4H, order i f g o) and the
    /// previous cell (B×H). Returns B×2H laid out as `[h | c]`.
    pub fn lstm_cell(&self, gates: Var, c_prev: Var) -> Var {
        let (value, cache) = {
            let n = self.nodes.borrow();
            let (gv, cv) = (&n[gates.0].value, &n[c_prev.0].value);
            let h = cv.cols();
            assert_eq!(gv.cols(), 4 * h, "lstm gates must be 4H wide");
            assert_eq!(gv.rows(), cv.rows());
            let mut out = Tensor::zeros(gv.rows(), 2 * h);
            let mut cache = Tensor::zeros(gv.rows(), 5 * h);
            for r in 0..gv.rows() {
                let g = gv.row(r);
                let cp = cv.row(r);
                let (o_row, k_row) = (out.row_mut(r), cache.row_mut(r));
                lstm_unit(g, cp, h, o_row, k_row);
            }
            (out, cache)
        };
        self.push(
            value,
            Op::LstmCell {
                gates,
                c_prev,
                cache,
            },
            self.ng(&[gates, c_prev]),
        )
    }

    /// Runs a whole unidirectional LSTM over a padded time-major batch.
    ///
    /// `xproj` holds the input projections plus bias ((T·B)×4H) and `recur` the
    /// recurrent weights (H×4H). Each utterance starts from a zero state at its
    /// first valid step in the direction of travel; padded output rows are zero.
    pub fn lstm_sequence(
        &self,
        xproj: Var,
        recur: Var,
        layout: Rc<SeqLayout>,
        reverse: bool,
    ) -> Var {
        let (value, acts, cells) = {
            let n = self.nodes.borrow();
            let (xv, uv) = (&n[xproj.0].value, &n[recur.0].value);
            let h = uv.rows();
            let batch = layout.batch;
            assert_eq!(uv.cols(), 4 * h, "recurrent weights must be H x 4H");
            assert_eq!(xv.shape(), (layout.rows(), 4 * h), "lstm input projection shape");
            let mut out = Tensor::zeros(layout.rows(), h);
            let mut acts = Tensor::zeros(layout.rows(), 5 * h);
            let mut cells = Tensor::zeros(layout.rows(), h);
            let mut h_state = Tensor::zeros(batch, h);
            let mut c_state = Tensor::zeros(batch, h);
            let mut gates = Tensor::zeros(batch, 4 * h);
            let mut unit_out = vec![T::zero(); 2 * h];
            for step in 0..layout.steps {
                let t = if reverse { layout.steps - 1 - step } else { step };
                let block = xv.rows_slice(t * batch, batch);
                gates.data_mut().copy_from_slice(block.data());
                gemm_acc(&h_state, false, uv, false, &mut gates, T::one());
                for b in 0..batch {
                    if t >= layout.lens[b] {
                        continue;
                    }
                    let row = t * batch + b;
                    lstm_unit(
                        gates.row(b),
                        c_state.row(b),
                        h,
                        &mut unit_out,
                        acts.row_mut(row),
                    );
                    h_state.row_mut(b).copy_from_slice(&unit_out[..h]);
                    c_state.row_mut(b).copy_from_slice(&unit_out[h..]);
                    out.row_mut(row).copy_from_slice(&unit_out[..h]);
                    cells.row_mut(row).copy_from_slice(&unit_out[h..]);
                }
            }
            (out, acts, cells)
        };
        self.push(
            value,
            Op::LstmSeq {
                xproj,
                recur,
                layout,
                reverse,
                acts,
                cells,
            },
            self.ng(&[xproj, recur]),
        )
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            backprop_node(&nodes, node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    /// Reverse pass that also adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Grads<T> {
        let grads = self.backward(loss);
        let nodes = self.nodes.borrow();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    store.get_mut(id).grad.add_assign(g);
                }
            }
        }
        grads
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub(crate) fn log_softmax_at<T: Scalar>(row: &[T], idx: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[idx] - lse
}

/// Log-softmax of every row.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
        let lse = row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
        row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() - lse));
    }
    out
}

/// Forward math of one LSTM unit row. Writes `[h | c]` into `out` (2H) and the
/// activated gates plus `tanh(c)` into `cache` (5H).
#[inline]
fn lstm_unit<T: Scalar>(gates: &[T], c_prev: &[T], h: usize, out: &mut [T], cache: &mut [T]) {
    for j in 0..h {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h + j]);
        let g = gates[2 * h + j].tanh();
        let o = sigmoid(gates[3 * h + j]);
        let c = f * c_prev[j] + i * g;
        let tc = c.tanh();
        out[j] = o * tc;
        out[h + j] = c;
        cache[j] = i;
        cache[h + j] = f;
        cache[2 * h + j] = g;
        cache[3 * h + j] = o;
        cache[4 * h + j] = tc;
    }
}

/// Backward math of one LSTM unit row. `dh`, `dc` are gradients on the
/// unit's outputs; writes pre-activation gate gradients and returns through
/// `dc_prev`.
#[inline]
fn lstm_unit_backward<T: Scalar>(
    cache: &[T],
    c_prev: &[T],
    dh: &[T],
    dc: &[T],
    h: usize,
    dgates: &mut [T],
    dc_prev: &mut [T],
) {
    let one = T::one();
    for j in 0..h {
        let (i, f, g, o, tc) = (
            cache[j],
            cache[h + j],
            cache[2 * h + j],
            cache[3 * h + j],
            cache[4 * h + j],
        );
        let dct = dc[j] + dh[j] * o * (one - tc * tc);
        dgates[j] = dct * g * i * (one - i);
        dgates[h + j] = dct * c_prev[j] * f * (one - f);
        dgates[2 * h + j] = dct * i * (one - g * g);
        dgates[3 * h + j] = dh[j] * tc * o * (one - o);
        dc_prev[j] = dct * f;
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, layout: &SeqLayout, width: usize) -> Tensor<T> {
    let cin = x.cols();
    let pad = width / 2;
    let batch = layout.batch;
    let mut cols = Tensor::zeros(x.rows(), width * cin);
    for t in 0..layout.steps {
        for b in 0..batch {
            let len = layout.lens[b];
            if t >= len {
                continue;
            }
            let dst = cols.row_mut(t * batch + b);
            for k in 0..width {
                let s = t as isize + k as isize - pad as isize;
                if s < 0 || s as usize >= len {
                    continue;
                }
                let src = x.row(s as usize * batch + b);
                dst[k * cin..(k + 1) * cin].copy_from_slice(src);
            }
        }
    }
    cols
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Adds `f(i)` into every element of the gradient slot for `v`.
fn accumulate_with<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    shape: (usize, usize),
    f: impl Fn(usize) -> T,
) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    for (i, x) in slot.data_mut().iter_mut().enumerate() {
        *x += f(i);
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    dy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let ng = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            if ng(*a) {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                gemm_acc(dy, false, bv, true, &mut da, T::zero());
                accumulate(grads, *a, da);
            }
            if ng(*b) {
                let (av, bv) = (val(*a), val(*b));
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                gemm_acc(av, true, dy, false, &mut db, T::zero());
                accumulate(grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if ng(*a) {
                accumulate(grads, *a, dy.clone());
            }
            if ng(*b) {
                accumulate(grads, *b, dy.clone());
            }
        }
        Op::Sub(a, b) => {
            if ng(*a) {
                accumulate(grads, *a, dy.clone());
            }
            if ng(*b) {
                accumulate(grads, *b, dy.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if ng(*a) {
                accumulate_with(grads, *a, av.shape(), |i| dy.data()[i] * bv.data()[i]);
            }
            if ng(*b) {
                accumulate_with(grads, *b, bv.shape(), |i| dy.data()[i] * av.data()[i]);
            }
        }
        Op::AddRow(x, row) => {
            if ng(*x) {
                accumulate(grads, *x, dy.clone());
            }
            if ng(*row) {
                let cols = dy.cols();
                let mut g = Tensor::zeros(1, cols);
                for r in 0..dy.rows() {
                    for (a, &b) in g.data_mut().iter_mut().zip(dy.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, *row, g);
            }
        }
        Op::Scale(x, c) => accumulate(grads, *x, dy.map(|v| v * *c)),
        Op::Tanh(x) => {
            let y = &node.value;
            accumulate_with(grads, *x, y.shape(), |i| {
                let t = y.data()[i];
                dy.data()[i] * (T::one() - t * t)
            });
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate_with(grads, *x, y.shape(), |i| {
                let s = y.data()[i];
                dy.data()[i] * s * (T::one() - s)
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            accumulate_with(grads, *x, xv.shape(), |i| {
                if xv.data()[i] > T::zero() {
                    dy.data()[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::Abs(x) => {
            let xv = val(*x);
            accumulate_with(grads, *x, xv.shape(), |i| {
                let v = xv.data()[i];
                if v > T::zero() {
                    dy.data()[i]
                } else if v < T::zero() {
                    -dy.data()[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::MulConst(x, m) => {
            accumulate_with(grads, *x, m.shape(), |i| dy.data()[i] * m.data()[i]);
        }
        Op::Blend(a, b, m) => {
            if ng(*a) {
                accumulate_with(grads, *a, m.shape(), |i| dy.data()[i] * m.data()[i]);
            }
            if ng(*b) {
                accumulate_with(grads, *b, m.shape(), |i| {
                    dy.data()[i] * (T::one() - m.data()[i])
                });
            }
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for p in parts {
                let w = val(*p).cols();
                if ng(*p) {
                    let g = Tensor::from_fn(dy.rows(), w, |r, c| dy.get(r, off + c));
                    accumulate(grads, *p, g);
                }
                off += w;
            }
        }
        Op::SliceCols(x, start) => {
            let xv = val(*x);
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.rows(), xv.cols()));
            for r in 0..dy.rows() {
                let dst = &mut slot.row_mut(r)[*start..*start + dy.cols()];
                for (a, &b) in dst.iter_mut().zip(dy.row(r)) {
                    *a += b;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let rows = val(*p).rows();
                if ng(*p) {
                    accumulate(grads, *p, dy.rows_slice(off, rows));
                }
                off += rows;
            }
        }
        Op::SliceRows(x, start) => {
            let xv = val(*x);
            let cols = xv.cols();
            let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.rows(), cols));
            let dst = &mut slot.data_mut()[start * cols..start * cols + dy.len()];
            for (a, &b) in dst.iter_mut().zip(dy.data()) {
                *a += b;
            }
        }
        Op::Tile(x, times) => {
            let xv = val(*x);
            let n = xv.len();
            let mut g = Tensor::zeros(xv.rows(), xv.cols());
            for k in 0..*times {
                for (a, &b) in g.data_mut().iter_mut().zip(&dy.data()[k * n..(k + 1) * n]) {
                    *a += b;
                }
            }
            accumulate(grads, *x, g);
        }
        Op::Reshape(x) => {
            let (r, c) = val(*x).shape();
            accumulate(grads, *x, dy.clone().reshaped(r, c));
        }
        Op::Transpose(x) => accumulate(grads, *x, dy.transpose()),
        Op::Gather(table, ids) => {
            let tv = val(*table);
            let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(tv.rows(), tv.cols()));
            for (r, &id) in ids.iter().enumerate() {
                for (a, &b) in slot.row_mut(id).iter_mut().zip(dy.row(r)) {
                    *a += b;
                }
            }
        }
        Op::Sum(x) => {
            let g = dy.item();
            let (r, c) = val(*x).shape();
            accumulate(grads, *x, Tensor::full(r, c, g));
        }
        Op::MaskedSoftmax(x) => {
            let y = &node.value;
            let cols = y.cols();
            let mut g = Tensor::zeros(y.rows(), cols);
            for r in 0..y.rows() {
                let (yr, dr) = (y.row(r), dy.row(r));
                let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                    *o = yr[c] * (dr[c] - dot);
                }
            }
            accumulate(grads, *x, g);
        }
        Op::SoftmaxXent {
            logits,
            targets,
            weights,
            probs,
        } => {
            let scale = dy.item();
            let mut g = probs.clone();
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                let row = g.row_mut(r);
                row[t] -= T::one();
                let k = w * scale;
                row.iter_mut().for_each(|v| *v *= k);
            }
            accumulate(grads, *logits, g);
        }
        Op::BceLogits {
            logits,
            labels,
            weights,
        } => {
            let scale = dy.item();
            let lv = val(*logits);
            let g = Tensor::from_fn(lv.rows(), 1, |r, _| {
                weights[r] * scale * (sigmoid(lv.get(r, 0)) - labels[r])
            });
            accumulate(grads, *logits, g);
        }
        Op::WeightedSum { weights, states } => {
            let (a, h) = (val(*weights), val(*states));
            let (batch, steps) = a.shape();
            if ng(*weights) {
                let g = Tensor::from_fn(batch, steps, |b, t| {
                    h.row(t * batch + b)
                        .iter()
                        .zip(dy.row(b))
                        .map(|(&x, &y)| x * y)
                        .sum()
                });
                accumulate(grads, *weights, g);
            }
            if ng(*states) {
                let slot = grads[states.0].get_or_insert_with(|| Tensor::zeros(h.rows(), h.cols()));
                for t in 0..steps {
                    for b in 0..batch {
                        let w = a.get(b, t);
                        if w == T::zero() {
                            continue;
                        }
                        for (o, &d) in slot.row_mut(t * batch + b).iter_mut().zip(dy.row(b)) {
                            *o += w * d;
                        }
                    }
                }
            }
        }
        Op::Conv1d {
            x,
            w,
            layout,
            width,
            cols,
        } => {
            if ng(*w) {
                let wv = val(*w);
                let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                gemm_acc(cols, true, dy, false, &mut dw, T::zero());
                accumulate(grads, *w, dw);
            }
            if ng(*x) {
                let (xv, wv) = (val(*x), val(*w));
                let cin = xv.cols();
                let mut dcols = Tensor::zeros(cols.rows(), cols.cols());
                gemm_acc(dy, false, wv, true, &mut dcols, T::zero());
                let pad = width / 2;
                let batch = layout.batch;
                let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.rows(), cin));
                for t in 0..layout.steps {
                    for b in 0..batch {
                        let len = layout.lens[b];
                        if t >= len {
                            continue;
                        }
                        let src = dcols.row(t * batch + b);
                        for k in 0..*width {
                            let s = t as isize + k as isize - pad as isize;
                            if s < 0 || s as usize >= len {
                                continue;
                            }
                            let dst = slot.row_mut(s as usize * batch + b);
                            for (o, &d) in dst.iter_mut().zip(&src[k * cin..(k + 1) * cin]) {
                                *o += d;
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            layout,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = xhat.cols();
            let valid: Vec<usize> = (0..xhat.rows()).filter(|&r| layout.row_valid(r)).collect();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for &r in &valid {
                for j in 0..c {
                    dgamma[j] += dy.get(r, j) * xhat.get(r, j);
                    dbeta[j] += dy.get(r, j);
                }
            }
            if ng(*x) {
                let gv = val(*gamma);
                let mut dx = Tensor::zeros(xhat.rows(), c);
                if *batch_stats {
                    let n = T::from_f64(valid.len().max(1) as f64);
                    for &r in &valid {
                        for j in 0..c {
                            // Σ dxhat = γ Σ dy, Σ dxhat·xhat = γ Σ dy·xhat
                            let g = gv.data()[j];
                            let dxh = dy.get(r, j) * g;
                            let v = inv_std[j] / n
                                * (n * dxh - g * dbeta[j] - xhat.get(r, j) * g * dgamma[j]);
                            dx.set(r, j, v);
                        }
                    }
                } else {
                    for &r in &valid {
                        for j in 0..c {
                            dx.set(r, j, dy.get(r, j) * gv.data()[j] * inv_std[j]);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            if ng(*gamma) {
                accumulate(grads, *gamma, Tensor::from_vec(1, c, dgamma));
            }
            if ng(*beta) {
                accumulate(grads, *beta, Tensor::from_vec(1, c, dbeta));
            }
        }
        Op::LstmCell {
            gates,
            c_prev,
            cache,
        } => {
            let cp = val(*c_prev);
            let h = cp.cols();
            let mut dg = Tensor::zeros(cp.rows(), 4 * h);
            let mut dcp = Tensor::zeros(cp.rows(), h);
            for r in 0..cp.rows() {
                let d = dy.row(r);
                lstm_unit_backward(
                    cache.row(r),
                    cp.row(r),
                    &d[..h],
                    &d[h..],
                    h,
                    dg.row_mut(r),
                    dcp.row_mut(r),
                );
            }
            if ng(*gates) {
                accumulate(grads, *gates, dg);
            }
            if ng(*c_prev) {
                accumulate(grads, *c_prev, dcp);
            }
        }
        Op::LstmSeq {
            xproj,
            recur,
            layout,
            reverse,
            acts,
            cells,
        } => {
            let uv = val(*recur);
            let h = uv.rows();
            let batch = layout.batch;
            let mut dxproj = Tensor::zeros(layout.rows(), 4 * h);
            let mut du = Tensor::zeros(h, 4 * h);
            let mut dh_state = Tensor::zeros(batch, h);
            let mut dc_state = Tensor::zeros(batch, h);
            let mut h_prev = Tensor::zeros(batch, h);
            let mut dgates = Tensor::zeros(batch, 4 * h);
            let mut dc_prev = vec![T::zero(); h];
            let mut dh_total = vec![T::zero(); h];
            let zeros = vec![T::zero(); h];
            // Walk the sequence against the direction of travel.
            for step in (0..layout.steps).rev() {
                let t = if *reverse { layout.steps - 1 - step } else { step };
                let prev_t = if step == 0 {
                    None
                } else if *reverse {
                    Some(t + 1)
                } else {
                    Some(t - 1)
                };
                dgates.fill(T::zero());
                for b in 0..batch {
                    if t >= layout.lens[b] {
                        h_prev.row_mut(b).fill(T::zero());
                        continue;
                    }
                    let row = t * batch + b;
                    let (hp, cp): (&[T], &[T]) = match prev_t {
                        Some(p) if p < layout.lens[b] => {
                            let pr = p * batch + b;
                            (node.value.row(pr), cells.row(pr))
                        }
                        _ => (&zeros, &zeros),
                    };
                    h_prev.row_mut(b).copy_from_slice(hp);
                    for j in 0..h {
                        dh_total[j] = dy.get(row, j) + dh_state.get(b, j);
                    }
                    lstm_unit_backward(
                        acts.row(row),
                        cp,
                        &dh_total,
                        dc_state.row(b),
                        h,
                        dgates.row_mut(b),
                        &mut dc_prev,
                    );
                    dc_state.row_mut(b).copy_from_slice(&dc_prev);
                    dxproj.row_mut(row).copy_from_slice(dgates.row(b));
                }
                gemm_acc(&h_prev, true, &dgates, false, &mut du, T::one());
                // dh for the previous step; rows without a valid step pass zeros.
                let mut dh_next = Tensor::zeros(batch, h);
                gemm_acc(&dgates, false, uv, true, &mut dh_next, T::zero());
                for b in 0..batch {
                    if t >= layout.lens[b] {
                        // state carried through padding unchanged
                        for j in 0..h {
                            dh_next.set(b, j, dh_state.get(b, j));
                        }
                    }
                }
                dh_state = dh_next;
            }
            if ng(*xproj) {
                accumulate(grads, *xproj, dxproj);
            }
            if ng(*recur) {
                accumulate(grads, *recur, du);
            }
        }
    }
}
