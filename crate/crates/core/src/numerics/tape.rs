//! Reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in forward order; [`Tape::backward`] walks them in exact
//! reverse order and accumulates gradients additively. A tape may be
//! differentiated once.

use alloc::boxed::Box;
use alloc::vec::Vec;

use super::kernels::{self, LayerNormCache};
use super::matrix::{Mask, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    GatherRows { table: Var, rows: Box<[usize]> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Box<[Var]>),
    Softmax(Var),
    ZeroEntries { x: Var, entries: Box<[(usize, usize)]> },
    LayerNorm { x: Var, gain: Var, bias: Var, cache: Box<LayerNormCache> },
    Gelu(Var),
    CrossEntropy { logits: Var, row: usize, target: usize, probs: Box<[f64]> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.slots.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.slots.get_mut(var.0).and_then(Option::take)
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Registers an input (parameter, constant or watched tensor).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).scale(factor);
        self.push(v, Op::Scale(x, factor))
    }

    /// Embedding lookup: rows of `table` in the given order.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(table).select_rows(rows)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                rows: rows.into(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, width)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&refs)?;
        Ok(self.push(v, Op::ConcatCols(parts.into())))
    }

    pub fn masked_softmax(&mut self, scores: Var, mask: &Mask) -> Result<Var> {
        let v = kernels::masked_row_softmax(self.value(scores), mask)?;
        Ok(self.push(v, Op::Softmax(scores)))
    }

    /// Sets the listed entries to zero; gradient does not flow through them.
    pub fn zero_entries(&mut self, x: Var, entries: &[(usize, usize)]) -> Var {
        let mut v = self.value(x).clone();
        for &(r, c) in entries {
            v.set(r, c, 0.0);
        }
        self.push(
            v,
            Op::ZeroEntries {
                x,
                entries: entries.into(),
            },
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache: Box::new(cache),
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = kernels::gelu(self.value(x));
        self.push(v, Op::Gelu(x))
    }

    /// Cross-entropy of row `row` of `logits` against `target`; a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, row: usize, target: usize) -> Result<Var> {
        let l = self.value(logits);
        if row >= l.rows() {
            return Err(Error::Index {
                what: "cross_entropy row",
                index: row,
                limit: l.rows(),
            });
        }
        let (loss, probs) = kernels::cross_entropy(l.row(row), target)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                row,
                target,
                probs: probs.into(),
            },
        ))
    }

    /// Backpropagates from the scalar (`1×1`) node `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        let mut slots: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = kernels::matmul_nt(&g, self.value(*b))?;
                    let db = kernels::matmul_tn(self.value(*a), &g)?;
                    accumulate(&mut slots, *a, da)?;
                    accumulate(&mut slots, *b, db)?;
                }
                Op::MatMulNt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let da = kernels::matmul(&g, self.value(*b))?;
                    let db = kernels::matmul_tn(&g, self.value(*a))?;
                    accumulate(&mut slots, *a, da)?;
                    accumulate(&mut slots, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut slots, *a, g.clone())?;
                    accumulate(&mut slots, *b, g.clone())?;
                }
                Op::Scale(x, f) => accumulate(&mut slots, *x, g.scale(*f))?,
                Op::GatherRows { table, rows } => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut dt = Matrix::zeros(tr, tc);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, s) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut slots, *table, dt)?;
                }
                Op::SliceCols { x, start } => {
                    let (xr, xc) = self.value(*x).shape();
                    let mut dx = Matrix::zeros(xr, xc);
                    let w = g.cols();
                    for r in 0..xr {
                        dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts.iter() {
                        let w = self.value(p).cols();
                        let dp = g.slice_cols(offset, w)?;
                        offset += w;
                        accumulate(&mut slots, p, dp)?;
                    }
                }
                Op::Softmax(x) => {
                    let dx = kernels::masked_row_softmax_backward(&node.value, &g)?;
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::ZeroEntries { x, entries } => {
                    let mut dx = g.clone();
                    for &(r, c) in entries.iter() {
                        dx.set(r, c, 0.0);
                    }
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(cache, self.value(*gain), &g)?;
                    accumulate(&mut slots, *x, dx)?;
                    accumulate(&mut slots, *gain, dg)?;
                    accumulate(&mut slots, *bias, db)?;
                }
                Op::Gelu(x) => {
                    let dx = kernels::gelu_backward(self.value(*x), &g)?;
                    accumulate(&mut slots, *x, dx)?;
                }
                Op::CrossEntropy {
                    logits,
                    row,
                    target,
                    probs,
                } => {
                    let (lr, lc) = self.value(*logits).shape();
                    let mut dl = Matrix::zeros(lr, lc);
                    let scale = g.get(0, 0);
                    for (d, v) in dl
                        .row_mut(*row)
                        .iter_mut()
                        .zip(kernels::cross_entropy_backward(probs, *target))
                    {
                        *d = v * scale;
                    }
                    accumulate(&mut slots, *logits, dl)?;
                }
            }
            // kept so callers can read gradients of intermediates (attention)
            slots[idx] = Some(g);
        }
        Ok(Gradients { slots })
    }
}

fn accumulate(slots: &mut [Option<Matrix>], var: Var, grad: Matrix) -> Result<()> {
    match &mut slots[var.0] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}
