//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays it in reverse and returns gradients for the parameters that were
//! read from a [`ParamStore`]. Values are row-major `H x D` matrices where a
//! row is usually one frame.

use std::sync::Arc;

use nalgebra::DMatrix;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape_id: u64,
}

/// Operations whose reverse pass is written by hand outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Gradient wrt the single input, given input, output and output gradient.
    fn backward(&self, input: &Mat, output: &Mat, grad_out: &Mat) -> Mat;
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    WeightedSumSq(usize, Arc<Mat>),
    Custom(usize, Arc<dyn CustomOp>),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn next_tape_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: next_tape_id(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            idx: self.nodes.len() - 1,
            tape_id: self.id,
        }
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.idx].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value[(0, 0)]
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Read a parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Read a parameter without tracking its gradient (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.value(id).clone(), Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MatMul(a.idx, b.idx))
    }

    /// `a + 1 * row`, broadcasting a `1 x D` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        let mut v = self.value(a).clone();
        for mut rv in v.row_iter_mut() {
            rv += &r;
        }
        self.push(v, Op::AddRow(a.idx, row.idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.idx, b.idx))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.idx, b.idx))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).component_mul(self.value(b));
        self.push(v, Op::Mul(a.idx, b.idx))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a.idx, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        self.push(v, Op::AddConst(a.idx))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.idx))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a.idx))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.idx))
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a.idx, lo, hi))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).rows(start, len).into_owned();
        self.push(v, Op::SliceRows(a.idx, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).columns(start, len).into_owned();
        self.push(v, Op::SliceCols(a.idx, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut r = 0;
        for p in parts {
            let m = self.value(*p);
            v.rows_mut(r, m.nrows()).copy_from(m);
            r += m.nrows();
        }
        self.push(v, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut c = 0;
        for p in parts {
            let m = self.value(*p);
            v.columns_mut(c, m.ncols()).copy_from(m);
            c += m.ncols();
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()))
    }

    /// `1 x D` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.nrows() as f64;
        let v = Mat::from_fn(1, m.ncols(), |_, c| m.column(c).sum() / n);
        self.push(v, Op::MeanRows(a.idx))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_element(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a.idx))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let w = Arc::new(Mat::from_element(
            self.value(a).nrows(),
            self.value(a).ncols(),
            1.0,
        ));
        self.weighted_sum_sq(a, w)
    }

    /// `sum_ij w_ij * a_ij^2`
    pub fn weighted_sum_sq(&mut self, a: Var, w: Arc<Mat>) -> Var {
        let s = self
            .value(a)
            .iter()
            .zip(w.iter())
            .map(|(x, k)| k * x * x)
            .sum();
        self.push(Mat::from_element(1, 1, s), Op::WeightedSumSq(a.idx, w))
    }

    pub fn custom(&mut self, input: Var, output: Mat, op: Arc<dyn CustomOp>) -> Var {
        self.push(output, Op::Custom(input.idx, op))
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape_id != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        let shape = self.nodes[loss.idx].value.shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!(
                "loss must be a 1x1 scalar, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(Mat::from_element(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    let ga = &g * val(*b).transpose();
                    let gb = val(*a).transpose() * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = Mat::from_fn(1, g.ncols(), |_, c| g.column(c).sum());
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.component_mul(val(*b));
                    let gb = g.component_mul(val(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.component_mul(&node.value);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(val(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv });
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let slot = grads[*a].get_or_insert_with(|| Mat::zeros(r, c));
                    let mut view = slot.rows_mut(*start, g.nrows());
                    view += &g;
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let slot = grads[*a].get_or_insert_with(|| Mat::zeros(r, c));
                    let mut view = slot.columns_mut(*start, g.ncols());
                    view += &g;
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let n = val(*p).nrows();
                        acc(&mut grads, *p, g.rows(r, n).into_owned());
                        r += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let n = val(*p).ncols();
                        acc(&mut grads, *p, g.columns(c, n).into_owned());
                        c += n;
                    }
                }
                Op::MeanRows(a) => {
                    let n = val(*a).nrows();
                    let ga = Mat::from_fn(n, g.ncols(), |_, c| g[(0, c)] / n as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::WeightedSumSq(a, w) => {
                    let s = 2.0 * g[(0, 0)];
                    let ga = val(*a).zip_map(w, |x, k| s * k * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Custom(a, op) => {
                    let ga = op.backward(val(*a), &node.value, &g);
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Mat>], idx: usize, g: Mat) {
    match &mut grads[idx] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}
