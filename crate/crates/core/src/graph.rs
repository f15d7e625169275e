//! Reverse-mode automatic differentiation on a flat tape of 2-D tensors.
//!
//! The denoiser builds one `Graph` per forward pass (training step or
//! sampling batch). Ops record just enough to replay their adjoint in
//! reverse topological order; with recording disabled the same code path
//! doubles as the no-grad inference engine.

use std::collections::HashMap;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention geometry: one entry per batch segment, with query rows and
/// key/value rows addressed independently so the same op serves both
/// self-attention and latent cross-attention.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: MaskPattern,
}

/// Which (query, key) pairs may attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPattern {
    /// Everything sees everything.
    Full,
    /// First `bidir_len` positions attend among themselves; later positions
    /// attend to that block and causally to themselves.
    BidirThenCausal { bidir_len: usize },
}

impl MaskPattern {
    #[inline]
    fn allow(&self, q: usize, k: usize) -> bool {
        match *self {
            MaskPattern::Full => true,
            MaskPattern::BidirThenCausal { bidir_len } => {
                if q < bidir_len {
                    k < bidir_len
                } else {
                    k < bidir_len || k <= q
                }
            }
        }
    }
}

enum Op<F> {
    Leaf { param: Option<usize> },
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Row-broadcast add: `a (m x n) + b (1 x n)`.
    AddRow(Var, Var),
    /// Column-broadcast multiply: `a (m x n) * w (m x 1)`.
    MulCol(Var, Var),
    /// Broadcast multiply by a `1 x 1` var.
    MulScalarV(Var, Var),
    Scale(Var, F),
    AddConst(Var, F),
    Neg(Var),
    Recip(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GatherRows { src: Var, rows: Rc<Vec<usize>> },
    ScatterAddRows { base: Var, src: Var, rows: Rc<Vec<usize>> },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Pick { src: Var, coords: Rc<Vec<(usize, usize)>> },
    SumAll(Var),
    RowSum(Var),
    ColSum(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Rc<Vec<AttnSegment>> },
}

enum Aux<F> {
    None,
    One(Tensor<F>),
    Many(Vec<Tensor<F>>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    aux: Aux<F>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

/// Gradients keyed by parameter id, as registered through [`Graph::param`].
pub struct Grads<F> {
    pub by_param: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    /// No-grad graph: same forward math, no adjoint bookkeeping.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), recording: false }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, aux: Aux<F>) -> Var {
        let id = self.nodes.len();
        if self.recording {
            self.nodes.push(Node { value, op, aux });
        } else {
            self.nodes.push(Node { value, op: Op::Leaf { param: None }, aux: Aux::None });
        }
        Var(id)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf { param: None }, aux: Aux::None });
        Var(id)
    }

    pub fn param(&mut self, id: usize, t: Tensor<F>) -> Var {
        let node = self.nodes.len();
        let op = if self.recording { Op::Leaf { param: Some(id) } } else { Op::Leaf { param: None } };
        self.nodes.push(Node { value: t, op, aux: Aux::None });
        Var(node)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(v, Op::Matmul(a, b), Aux::None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.transpose();
        self.push(v, Op::Transpose(a), Aux::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        self.push(v, Op::Add(a, b), Aux::None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        self.push(v, Op::Sub(a, b), Aux::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::Mul(a, b), Aux::None)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.rows, 1, "add_row bias must be a row vector");
        assert_eq!(av.cols, bv.cols, "add_row width mismatch");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b), Aux::None)
    }

    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (av, wv) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        assert_eq!(wv.cols, 1, "mul_col weight must be a column vector");
        assert_eq!(av.rows, wv.rows, "mul_col height mismatch");
        let mut v = av.clone();
        for r in 0..v.rows {
            let s = wv.data[r];
            for x in v.row_mut(r) {
                *x *= s;
            }
        }
        self.push(v, Op::MulCol(a, w), Aux::None)
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let v = self.nodes[a.0].value.map(|x| x * sv);
        self.push(v, Op::MulScalarV(a, s), Aux::None)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * s);
        self.push(v, Op::Scale(a, s), Aux::None)
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddConst(a, c), Aux::None)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(v, Op::Neg(a), Aux::None)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| F::one() / x);
        self.push(v, Op::Recip(a), Aux::None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        self.push(v, Op::Exp(a), Aux::None)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.ln());
        self.push(v, Op::Ln(a), Aux::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a), Aux::None)
    }

    /// Smooth gated unit `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let sig = self.nodes[a.0].value.map(sigmoid);
        let v = self.nodes[a.0].value.zip_map(&sig, |x, s| x * s);
        self.push(v, Op::Silu(a), Aux::One(sig))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for r in 0..v.rows {
            softmax_slice(v.row_mut(r));
        }
        self.push(v, Op::SoftmaxRows(a), Aux::None)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.nodes[a.0].value.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().fold(F::neg_infinity(), |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            for x in row {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a), Aux::None)
    }

    /// Row-wise layer normalization with learned affine over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = F::c(1e-5);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.rows, 1);
        assert_eq!(bv.rows, 1);
        assert_eq!(gv.cols, xv.cols);
        let n = F::c(xv.cols as f64);
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut inv_std = Tensor::zeros(xv.rows, 1);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.data[r] = is;
            for c in 0..xv.cols {
                let h = (row[c] - mean) * is;
                xhat.data[r * xv.cols + c] = h;
                out.data[r * xv.cols + c] = gv.data[c] * h + bv.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta }, Aux::Many(vec![xhat, inv_std]))
    }

    pub fn gather_rows(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let sv = &self.nodes[src.0].value;
        let mut v = Tensor::zeros(rows.len(), sv.cols);
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).copy_from_slice(sv.row(r));
        }
        self.push(v, Op::GatherRows { src, rows: Rc::new(rows) }, Aux::None)
    }

    pub fn scatter_add_rows(&mut self, base: Var, src: Var, rows: Vec<usize>) -> Var {
        let mut v = self.nodes[base.0].value.clone();
        let sv = &self.nodes[src.0].value;
        assert_eq!(sv.rows, rows.len());
        assert_eq!(sv.cols, v.cols);
        for (i, &r) in rows.iter().enumerate() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(sv.row(i)) {
                *x += y;
            }
        }
        self.push(v, Op::ScatterAddRows { base, src, rows: Rc::new(rows) }, Aux::None)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let sv = &self.nodes[src.0].value;
        let mut v = Tensor::zeros(len, sv.cols);
        v.data.copy_from_slice(&sv.data[start * sv.cols..(start + len) * sv.cols]);
        self.push(v, Op::SliceRows { src, start }, Aux::None)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let sv = &self.nodes[src.0].value;
        let mut v = Tensor::zeros(sv.rows, len);
        for r in 0..sv.rows {
            v.row_mut(r).copy_from_slice(&sv.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { src, start }, Aux::None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols;
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            assert_eq!(pv.cols, cols, "concat_rows width mismatch");
            v.data[at..at + pv.len()].copy_from_slice(&pv.data);
            at += pv.len();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()), Aux::None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.rows, rows, "concat_cols height mismatch");
                v.row_mut(r)[at..at + pv.cols].copy_from_slice(pv.row(r));
                at += pv.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), Aux::None)
    }

    /// Select one element per coordinate pair into a `k x 1` column.
    pub fn pick(&mut self, src: Var, coords: Vec<(usize, usize)>) -> Var {
        let sv = &self.nodes[src.0].value;
        let data: Vec<F> = coords.iter().map(|&(r, c)| sv.at(r, c)).collect();
        let v = Tensor { rows: data.len(), cols: 1, data };
        self.push(v, Op::Pick { src, coords: Rc::new(coords) }, Aux::None)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::SumAll(a), Aux::None)
    }

    /// Sum along each row: `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data: Vec<F> = (0..av.rows).map(|r| av.row(r).iter().copied().sum()).collect();
        let v = Tensor { rows: av.rows, cols: 1, data };
        self.push(v, Op::RowSum(a), Aux::None)
    }

    /// Sum down each column: `m x n -> 1 x n`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut v = Tensor::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, &x) in v.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        self.push(v, Op::ColSum(a), Aux::None)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let rows = self.nodes[a.0].value.rows;
        let s = self.col_sum(a);
        self.scale(s, F::one() / F::c(rows as f64))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.len(), rows * cols, "reshape must preserve element count");
        let v = Tensor { rows, cols, data: av.data.clone() };
        self.push(v, Op::Reshape(a), Aux::None)
    }

    pub fn flatten_row(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        self.reshape(a, 1, n)
    }

    /// Fused multi-head attention over independent segments.
    ///
    /// `q` is `Tq x D`, `k`/`v` are `Tk x D`; each segment addresses row
    /// ranges of both and applies its own mask pattern. Softmax probabilities
    /// are retained per (segment, head) for the adjoint.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Vec<AttnSegment>) -> Var {
        let d = self.nodes[q.0].value.cols;
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let dh = d / heads;
        let scale = F::one() / F::c((dh as f64).sqrt());
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs: Vec<Tensor<F>> = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            for h in 0..heads {
                let hoff = h * dh;
                let mut p = Tensor::zeros(seg.q_len, seg.k_len);
                for qi in 0..seg.q_len {
                    let qrow = &qv.row(seg.q_start + qi)[hoff..hoff + dh];
                    let prow = p.row_mut(qi);
                    for ki in 0..seg.k_len {
                        if seg.mask.allow(qi, ki) {
                            let krow = &kv.row(seg.k_start + ki)[hoff..hoff + dh];
                            let dot: F = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                            prow[ki] = dot * scale;
                        } else {
                            prow[ki] = F::neg_infinity();
                        }
                    }
                    softmax_slice(prow);
                }
                for qi in 0..seg.q_len {
                    let orow = &mut out.row_mut(seg.q_start + qi)[hoff..hoff + dh];
                    for ki in 0..seg.k_len {
                        let w = p.at(qi, ki);
                        if w == F::zero() {
                            continue;
                        }
                        let vrow = &vv.row(seg.k_start + ki)[hoff..hoff + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
                if self.recording {
                    probs.push(p);
                }
            }
        }
        self.push(
            out,
            Op::Attention { q, k, v, heads, segments: Rc::new(segments) },
            Aux::Many(probs),
        )
    }

    /// Reverse sweep from a scalar loss; returns gradients for every
    /// registered parameter leaf.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        assert!(self.recording, "backward on an inference graph");
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            // Re-store for param collection below.
            grads[i] = Some(g);
        }

        let mut by_param = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads[i].take() {
                    by_param.insert(id, g);
                }
            }
        }
        Grads { by_param }
    }

    fn bump(&self, grads: &mut [Option<Tensor<F>>], var: Var, delta: Tensor<F>) {
        match &mut grads[var.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul(a, b) => {
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                self.bump(grads, *a, g.matmul(&bv.transpose()));
                self.bump(grads, *b, av.transpose().matmul(g));
            }
            Op::Transpose(a) => self.bump(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.bump(grads, *a, g.clone());
                self.bump(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.bump(grads, *a, g.clone());
                self.bump(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let bv = &self.nodes[b.0].value;
                let av = &self.nodes[a.0].value;
                self.bump(grads, *a, g.zip_map(bv, |x, y| x * y));
                self.bump(grads, *b, g.zip_map(av, |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                self.bump(grads, *a, g.clone());
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in db.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.bump(grads, *b, db);
            }
            Op::MulCol(a, w) => {
                let av = &self.nodes[a.0].value;
                let wv = &self.nodes[w.0].value;
                let mut da = g.clone();
                let mut dw = Tensor::zeros(av.rows, 1);
                for r in 0..av.rows {
                    let s = wv.data[r];
                    let mut acc = F::zero();
                    for (d, (&gx, &ax)) in da.row_mut(r).iter_mut().zip(g.row(r).iter().zip(av.row(r))) {
                        *d = gx * s;
                        acc += gx * ax;
                    }
                    dw.data[r] = acc;
                }
                self.bump(grads, *a, da);
                self.bump(grads, *w, dw);
            }
            Op::MulScalarV(a, s) => {
                let sv = self.nodes[s.0].value.item();
                let av = &self.nodes[a.0].value;
                self.bump(grads, *a, g.map(|x| x * sv));
                let ds: F = g.data.iter().zip(&av.data).map(|(&gx, &ax)| gx * ax).sum();
                self.bump(grads, *s, Tensor::scalar(ds));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.bump(grads, *a, g.map(|x| x * s));
            }
            Op::AddConst(a, _) => self.bump(grads, *a, g.clone()),
            Op::Neg(a) => self.bump(grads, *a, g.map(|x| -x)),
            Op::Recip(a) => {
                let av = &self.nodes[a.0].value;
                self.bump(grads, *a, g.zip_map(av, |gx, x| -gx / (x * x)));
            }
            Op::Exp(a) => {
                self.bump(grads, *a, g.zip_map(&node.value, |gx, y| gx * y));
            }
            Op::Ln(a) => {
                let av = &self.nodes[a.0].value;
                self.bump(grads, *a, g.zip_map(av, |gx, x| gx / x));
            }
            Op::Sigmoid(a) => {
                self.bump(grads, *a, g.zip_map(&node.value, |gx, y| gx * y * (F::one() - y)));
            }
            Op::Silu(a) => {
                let sig = match &node.aux {
                    Aux::One(s) => s,
                    _ => unreachable!("silu aux missing"),
                };
                let av = &self.nodes[a.0].value;
                let mut da = Tensor::zeros(g.rows, g.cols);
                for idx in 0..g.data.len() {
                    let s = sig.data[idx];
                    let x = av.data[idx];
                    da.data[idx] = g.data[idx] * s * (F::one() + x * (F::one() - s));
                }
                self.bump(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut da = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let dot: F = g.row(r).iter().zip(p.row(r)).map(|(&gx, &px)| gx * px).sum();
                    for c in 0..p.cols {
                        da.data[r * p.cols + c] = p.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                self.bump(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gsum: F = g.row(r).iter().copied().sum();
                    for c in 0..y.cols {
                        da.data[r * y.cols + c] = g.at(r, c) - y.at(r, c).exp() * gsum;
                    }
                }
                self.bump(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, inv_std) = match &node.aux {
                    Aux::Many(v) => (&v[0], &v[1]),
                    _ => unreachable!("layer_norm aux missing"),
                };
                let gv = &self.nodes[gamma.0].value;
                let n = F::c(xhat.cols as f64);
                let mut dgamma = Tensor::zeros(1, xhat.cols);
                let mut dbeta = Tensor::zeros(1, xhat.cols);
                let mut dx = Tensor::zeros(xhat.rows, xhat.cols);
                for r in 0..xhat.rows {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for c in 0..xhat.cols {
                        let gx = g.at(r, c);
                        let h = xhat.at(r, c);
                        dgamma.data[c] += gx * h;
                        dbeta.data[c] += gx;
                        let dh = gx * gv.data[c];
                        mean_dh += dh;
                        mean_dh_h += dh * h;
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    let is = inv_std.data[r];
                    for c in 0..xhat.cols {
                        let dh = g.at(r, c) * gv.data[c];
                        let h = xhat.at(r, c);
                        dx.data[r * xhat.cols + c] = is * (dh - mean_dh - h * mean_dh_h);
                    }
                }
                self.bump(grads, *x, dx);
                self.bump(grads, *gamma, dgamma);
                self.bump(grads, *beta, dbeta);
            }
            Op::GatherRows { src, rows } => {
                let sv = &self.nodes[src.0].value;
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &x) in ds.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.bump(grads, *src, ds);
            }
            Op::ScatterAddRows { base, src, rows } => {
                self.bump(grads, *base, g.clone());
                let mut ds = Tensor::zeros(rows.len(), g.cols);
                for (i, &r) in rows.iter().enumerate() {
                    ds.row_mut(i).copy_from_slice(g.row(r));
                }
                self.bump(grads, *src, ds);
            }
            Op::SliceRows { src, start } => {
                let sv = &self.nodes[src.0].value;
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                ds.data[start * sv.cols..start * sv.cols + g.len()].copy_from_slice(&g.data);
                self.bump(grads, *src, ds);
            }
            Op::SliceCols { src, start } => {
                let sv = &self.nodes[src.0].value;
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                for r in 0..g.rows {
                    ds.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                self.bump(grads, *src, ds);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let mut dp = Tensor::zeros(pv.rows, pv.cols);
                    dp.data.copy_from_slice(&g.data[at..at + pv.len()]);
                    at += pv.len();
                    self.bump(grads, *p, dp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let mut dp = Tensor::zeros(pv.rows, pv.cols);
                    for r in 0..pv.rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + pv.cols]);
                    }
                    at += pv.cols;
                    self.bump(grads, *p, dp);
                }
            }
            Op::Pick { src, coords } => {
                let sv = &self.nodes[src.0].value;
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                for (i, &(r, c)) in coords.iter().enumerate() {
                    *ds.at_mut(r, c) += g.data[i];
                }
                self.bump(grads, *src, ds);
            }
            Op::SumAll(a) => {
                let av = &self.nodes[a.0].value;
                let s = g.item();
                self.bump(grads, *a, Tensor::filled(av.rows, av.cols, s));
            }
            Op::RowSum(a) => {
                let av = &self.nodes[a.0].value;
                let mut da = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let s = g.data[r];
                    for x in da.row_mut(r) {
                        *x = s;
                    }
                }
                self.bump(grads, *a, da);
            }
            Op::ColSum(a) => {
                let av = &self.nodes[a.0].value;
                let mut da = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    da.row_mut(r).copy_from_slice(&g.data);
                }
                self.bump(grads, *a, da);
            }
            Op::Reshape(a) => {
                let av = &self.nodes[a.0].value;
                let da = Tensor { rows: av.rows, cols: av.cols, data: g.data.clone() };
                self.bump(grads, *a, da);
            }
            Op::Attention { q, k, v, heads, segments } => {
                let probs = match &node.aux {
                    Aux::Many(p) => p,
                    _ => unreachable!("attention aux missing"),
                };
                let d = self.nodes[q.0].value.cols;
                let dh = d / heads;
                let scale = F::one() / F::c((dh as f64).sqrt());
                let qv = &self.nodes[q.0].value;
                let kv = &self.nodes[k.0].value;
                let vv = &self.nodes[v.0].value;
                let mut dq = Tensor::zeros(qv.rows, qv.cols);
                let mut dk = Tensor::zeros(kv.rows, kv.cols);
                let mut dv = Tensor::zeros(vv.rows, vv.cols);
                let mut pi = 0;
                for seg in segments.iter() {
                    for h in 0..*heads {
                        let hoff = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        // dV and dP.
                        let mut dp = Tensor::zeros(seg.q_len, seg.k_len);
                        for qi in 0..seg.q_len {
                            let grow = &g.row(seg.q_start + qi)[hoff..hoff + dh];
                            for ki in 0..seg.k_len {
                                let w = p.at(qi, ki);
                                let vrow = &vv.row(seg.k_start + ki)[hoff..hoff + dh];
                                let dot: F = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                                *dp.at_mut(qi, ki) = dot;
                                if w != F::zero() {
                                    let dvrow = &mut dv.row_mut(seg.k_start + ki)[hoff..hoff + dh];
                                    for (o, &gx) in dvrow.iter_mut().zip(grow) {
                                        *o += w * gx;
                                    }
                                }
                            }
                        }
                        // Softmax adjoint, then dQ / dK.
                        for qi in 0..seg.q_len {
                            let dot: F =
                                dp.row(qi).iter().zip(p.row(qi)).map(|(&a, &b)| a * b).sum();
                            for ki in 0..seg.k_len {
                                let w = p.at(qi, ki);
                                if w == F::zero() {
                                    continue;
                                }
                                let ds = w * (dp.at(qi, ki) - dot) * scale;
                                let krow = &kv.row(seg.k_start + ki)[hoff..hoff + dh];
                                let qrow = &qv.row(seg.q_start + qi)[hoff..hoff + dh];
                                let dqrow = &mut dq.row_mut(seg.q_start + qi)[hoff..hoff + dh];
                                for (o, &x) in dqrow.iter_mut().zip(krow) {
                                    *o += ds * x;
                                }
                                let dkrow = &mut dk.row_mut(seg.k_start + ki)[hoff..hoff + dh];
                                for (o, &x) in dkrow.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                self.bump(grads, *q, dq);
                self.bump(grads, *k, dk);
                self.bump(grads, *v, dv);
            }
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}
