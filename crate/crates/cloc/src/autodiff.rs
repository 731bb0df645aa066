//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records operations during an eager forward pass; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every leaf that influenced it. Nodes are
//! appended in topological order by construction, so the reverse sweep
//! needs no explicit sort.
//!
//! All values are `ndarray::Array2`; vectors are 1×d or d×1 matrices.
//! The element type is generic so the same graph code runs in f32 for
//! training and in f64 for finite-difference gradient checks.

use ndarray::{s, Array2, ArrayView2, ScalarOperand};
use rayon::prelude::*;
use std::cell::RefCell;
use std::fmt::Debug;
use std::rc::Rc;

/// Rows per parallel block in [`par_dot`]. Fixed so the splitting — and
/// therefore every floating-point result — depends only on shapes, never
/// on the number of worker threads.
const PAR_ROWS: usize = 512;
const PAR_FLOP_THRESHOLD: usize = 4_000_000;

/// Matrix product that farms fixed-size row blocks out to the thread pool
/// when the work is large enough to pay for it. Each block is an
/// independent product, so results are bit-identical across runs and
/// thread counts.
pub fn par_dot<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let (m, k) = a.dim();
    let n = b.ncols();
    if m < 2 * PAR_ROWS || m * k * n < PAR_FLOP_THRESHOLD {
        return a.dot(&b);
    }
    let blocks: Vec<(usize, usize)> = (0..m)
        .step_by(PAR_ROWS)
        .map(|start| (start, (start + PAR_ROWS).min(m)))
        .collect();
    let parts: Vec<Array2<F>> = blocks
        .par_iter()
        .map(|&(start, end)| a.slice(s![start..end, ..]).dot(&b))
        .collect();
    let mut out = Array2::zeros((m, n));
    for (&(start, end), part) in blocks.iter().zip(&parts) {
        out.slice_mut(s![start..end, ..]).assign(part);
    }
    out
}

/// Scalar types the tape can operate on.
pub trait Real:
    num_traits::Float + ScalarOperand + ndarray::LinalgScalar + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&Array2<F>, &mut Grads<F>)>;

struct Node<F: Real> {
    value: Rc<Array2<F>>,
    back: Option<BackFn<F>>,
}

/// Gradient accumulator indexed by node id.
pub struct Grads<F: Real> {
    slots: Vec<Option<Array2<F>>>,
}

impl<F: Real> Grads<F> {
    fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    fn accum(&mut self, id: usize, g: Array2<F>) {
        match &mut self.slots[id] {
            Some(acc) => *acc = &*acc + &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient of the backward root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<F>> {
        self.slots[v.0].take()
    }
}

/// Recording tape. Create one per forward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<F>, back: Option<BackFn<F>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Insert a leaf. Leaves accumulate gradients but have no parents.
    pub fn leaf(&self, value: Array2<F>) -> Var {
        self.push(value, None)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Rc<Array2<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let val = self.value(v);
        (val.nrows(), val.ncols())
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Reverse sweep from a 1×1 root. Returns gradients for every node the
    /// root depends on; query leaves with [`Grads::get`].
    pub fn backward(&self, root: Var) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads = Grads::new(nodes.len());
        grads.slots[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        for id in (0..=root.0).rev() {
            if nodes[id].back.is_some() {
                if let Some(g) = grads.slots[id].take() {
                    (nodes[id].back.as_ref().unwrap())(&g, &mut grads);
                }
            }
        }
        grads
    }

    // ---- elementwise and linear ops ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g.clone());
                gr.accum(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g.clone());
                gr.accum(b.0, g.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g * &*vb);
                gr.accum(b.0, g * &*va);
            })),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: Var, c: F) -> Var {
        let va = self.value(a);
        let out = &*va * c;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g * c);
            })),
        )
    }

    /// Multiply every element by a 1×1 node (e.g. an inverse temperature).
    pub fn scale_by(&self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.dim(), (1, 1), "scale_by: scalar expected");
        let c = vs[[0, 0]];
        let out = &*va * c;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g * c);
                let ds = (g * &*va).sum();
                gr.accum(s.0, Array2::from_elem((1, 1), ds));
            })),
        )
    }

    /// Add a 1×n row vector to every row.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row vector expected");
        assert_eq!(va.ncols(), vr.ncols(), "add_row: width mismatch");
        let out = &*va + &*vr;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g.clone());
                let mut dr = Array2::zeros((1, g.ncols()));
                for r in g.rows() {
                    dr.row_mut(0).zip_mut_with(&r, |d, &x| *d = *d + x);
                }
                gr.accum(row.0, dr);
            })),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let out = va.dot(&*vb);
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g.dot(&vb.t()));
                gr.accum(b.0, va.t().dot(g));
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.t().to_owned();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g.t().to_owned());
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.exp());
        let cached = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, g * &cached);
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    /// Tanh-form Gaussian error linear unit. The forward tanh values are
    /// cached so the backward pass is transcendental-free.
    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let c0 = F::from_f64(0.7978845608028654); // sqrt(2/pi)
        let c1 = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let tanh_u = va.mapv(|x| (c0 * (x + c1 * x * x * x)).tanh());
        let mut out = tanh_u.clone();
        out.zip_mut_with(&*va, |t, &x| *t = half * x * (F::one() + *t));
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = tanh_u.clone();
                dx.zip_mut_with(&*va, |t, &x| {
                    let du = c0 * (F::one() + F::from_f64(3.0) * c1 * x * x);
                    *t = half * (F::one() + *t) + half * x * (F::one() - *t * *t) * du;
                });
                dx.zip_mut_with(g, |d, &gg| *d = *d * gg);
                gr.accum(a.0, dx);
            })),
        )
    }

    // ---- structural ops ----

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.nrows(), "slice_rows: out of range");
        let out = va.slice(s![start..start + len, ..]).to_owned();
        let (rows, cols) = va.dim();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = Array2::zeros((rows, cols));
                dx.slice_mut(s![start..start + len, ..]).assign(g);
                gr.accum(a.0, dx);
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values[0].ncols();
        let total: usize = values.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut at = 0;
        let mut spans = Vec::with_capacity(values.len());
        for (v, &p) in values.iter().zip(parts) {
            out.slice_mut(s![at..at + v.nrows(), ..]).assign(v);
            spans.push((p.0, at, v.nrows()));
            at += v.nrows();
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                for &(id, start, len) in &spans {
                    gr.accum(id, g.slice(s![start..start + len, ..]).to_owned());
                }
            })),
        )
    }

    /// Row gather: out[k, :] = a[index[k], :]. Repeated indices accumulate in
    /// the backward scatter, so this doubles as an embedding lookup.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Var {
        let va = self.value(a);
        for &i in index {
            assert!(i < va.nrows(), "gather_rows: index out of range");
        }
        let mut out = Array2::zeros((index.len(), va.ncols()));
        for (k, &i) in index.iter().enumerate() {
            out.row_mut(k).assign(&va.row(i));
        }
        let idx = index.to_vec();
        let (rows, cols) = va.dim();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = Array2::zeros((rows, cols));
                for (k, &i) in idx.iter().enumerate() {
                    dx.row_mut(i).zip_mut_with(&g.row(k), |d, &x| *d = *d + x);
                }
                gr.accum(a.0, dx);
            })),
        )
    }

    /// Mean over rows, returning 1×d.
    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.nrows();
        let inv = F::from_f64(1.0 / n as f64);
        let mut out = Array2::zeros((1, va.ncols()));
        for r in va.rows() {
            out.row_mut(0).zip_mut_with(&r, |d, &x| *d = *d + x);
        }
        out = out * inv;
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = Array2::zeros((n, g.ncols()));
                for mut r in dx.rows_mut() {
                    r.zip_mut_with(&g.row(0), |d, &x| *d = x * inv);
                }
                gr.accum(a.0, dx);
            })),
        )
    }

    /// Mean of all elements, returning 1×1.
    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len();
        let inv = F::from_f64(1.0 / n as f64);
        let out = Array2::from_elem((1, 1), va.sum() * inv);
        let dim = va.dim();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                gr.accum(a.0, Array2::from_elem(dim, g[[0, 0]] * inv));
            })),
        )
    }

    // ---- row-wise nonlinear ops ----

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - m).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let probs = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = g * &*probs;
                for (mut drow, prow) in dx.rows_mut().into_iter().zip(probs.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&prow, |d, &p| *d = *d - p * dot);
                }
                gr.accum(a.0, dx);
            })),
        )
    }

    /// Row-wise layer normalization with learnable gain and bias (both 1×d).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.ncols();
        assert_eq!(vg.dim(), (1, d), "layer_norm: gain shape");
        assert_eq!(vb.dim(), (1, d), "layer_norm: bias shape");
        let invd = F::from_f64(1.0 / d as f64);
        let mut xhat: Array2<F> = Array2::zeros(vx.dim());
        let mut rstd = Vec::with_capacity(vx.nrows());
        for (mut orow, vrow) in xhat.rows_mut().into_iter().zip(vx.rows()) {
            let mean = vrow.sum() * invd;
            let var = vrow.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * invd;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            orow.zip_mut_with(&vrow, |o, &v| *o = (v - mean) * r);
        }
        let out = &xhat * &*vg + &*vb;
        let xhat = Rc::new(xhat);
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let n = g.nrows();
                let mut dgain: Array2<F> = Array2::zeros((1, d));
                let mut dbias: Array2<F> = Array2::zeros((1, d));
                let mut dx: Array2<F> = Array2::zeros((n, d));
                {
                    let mut dgain_row = dgain.row_mut(0);
                    let mut dbias_row = dbias.row_mut(0);
                    for (grow, xrow) in g.rows().into_iter().zip(xhat.rows()) {
                        for (((dg, db), &gv), &xv) in dgain_row
                            .iter_mut()
                            .zip(dbias_row.iter_mut())
                            .zip(grow.iter())
                            .zip(xrow.iter())
                        {
                            *dg = *dg + gv * xv;
                            *db = *db + gv;
                        }
                    }
                }
                let gain_row = vg.row(0);
                for ((mut dxrow, grow), (xrow, &r)) in dx
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows())
                    .zip(xhat.rows().into_iter().zip(rstd.iter()))
                {
                    let mut sum_dh = F::zero();
                    let mut sum_dh_xhat = F::zero();
                    for ((&gv, &kv), &xv) in grow.iter().zip(gain_row.iter()).zip(xrow.iter()) {
                        let dh = gv * kv;
                        sum_dh = sum_dh + dh;
                        sum_dh_xhat = sum_dh_xhat + dh * xv;
                    }
                    let c1 = sum_dh * invd;
                    let c2 = sum_dh_xhat * invd;
                    for (((dxv, &gv), &kv), &xv) in dxrow
                        .iter_mut()
                        .zip(grow.iter())
                        .zip(gain_row.iter())
                        .zip(xrow.iter())
                    {
                        *dxv = r * (gv * kv - c1 - xv * c2);
                    }
                }
                gr.accum(x.0, dx);
                gr.accum(gain.0, dgain);
                gr.accum(bias.0, dbias);
            })),
        )
    }

    /// L2-normalize every row. Rows must be nonzero.
    pub fn normalize_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        let mut norms = Vec::with_capacity(va.nrows());
        for mut row in out.rows_mut() {
            let n = row.fold(F::zero(), |acc, &v| acc + v * v).sqrt();
            assert!(n > F::zero(), "normalize_rows: zero row");
            norms.push(n);
            row.mapv_inplace(|x| x / n);
        }
        let unit = Rc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = Array2::zeros(g.dim());
                for i in 0..g.nrows() {
                    let grow = g.row(i);
                    let urow = unit.row(i);
                    let dot = grow.dot(&urow);
                    for j in 0..g.ncols() {
                        dx[[i, j]] = (grow[j] - urow[j] * dot) / norms[i];
                    }
                }
                gr.accum(a.0, dx);
            })),
        )
    }

    /// Euclidean norm of each row, returning n×1. Gradient is zero for
    /// all-zero rows (subgradient choice).
    pub fn row_norms(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Array2::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            out[[i, 0]] = row.fold(F::zero(), |acc, &v| acc + v * v).sqrt();
        }
        let norms = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dx = Array2::zeros(va.dim());
                for i in 0..va.nrows() {
                    let n = norms[[i, 0]];
                    if n > F::zero() {
                        let c = g[[i, 0]] / n;
                        for j in 0..va.ncols() {
                            dx[[i, j]] = va[[i, j]] * c;
                        }
                    }
                }
                gr.accum(a.0, dx);
            })),
        )
    }

    /// Mean diagonal cross-entropy of a logit matrix under a denominator
    /// mask: -(1/n) Σ_i (x[i,i] - logsumexp_{j: mask[i,j]} x[i,j]).
    ///
    /// `mask[i][j] == true` keeps pair (i, j) in row i's denominator. The
    /// diagonal must be unmasked. This is the shared kernel of the
    /// image-text and region-text contrastive terms.
    pub fn masked_diag_cross_entropy(&self, logits: Var, mask: Rc<Array2<bool>>) -> Var {
        let vx = self.value(logits);
        let n = vx.nrows();
        assert_eq!(vx.ncols(), n, "cross_entropy: square logits expected");
        assert_eq!(mask.dim(), (n, n), "cross_entropy: mask shape");
        for i in 0..n {
            assert!(mask[[i, i]], "cross_entropy: diagonal must stay unmasked");
        }
        let inv_n = F::from_f64(1.0 / n as f64);
        let mut loss = F::zero();
        let mut lse = Vec::with_capacity(n);
        for i in 0..n {
            let mut m = F::neg_infinity();
            for j in 0..n {
                if mask[[i, j]] {
                    m = m.max(vx[[i, j]]);
                }
            }
            let mut sum = F::zero();
            for j in 0..n {
                if mask[[i, j]] {
                    sum = sum + (vx[[i, j]] - m).exp();
                }
            }
            let l = m + sum.ln();
            lse.push(l);
            loss = loss + (l - vx[[i, i]]);
        }
        let out = Array2::from_elem((1, 1), loss * inv_n);
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let gs = g[[0, 0]] * inv_n;
                let mut dx = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        if mask[[i, j]] {
                            let p = (vx[[i, j]] - lse[i]).exp();
                            dx[[i, j]] = gs * p;
                        }
                    }
                    dx[[i, i]] = dx[[i, i]] - gs;
                }
                gr.accum(logits.0, dx);
            })),
        )
    }

    /// Multi-head scaled dot-product self-attention over `batch` packed
    /// sequences of identical length `seq`. Inputs are (batch·seq)×d stacks.
    pub fn attention(&self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.ncols();
        assert_eq!(vq.dim(), (batch * seq, d), "attention: q shape");
        assert_eq!(vk.dim(), (batch * seq, d), "attention: k shape");
        assert_eq!(vv.dim(), (batch * seq, d), "attention: v shape");
        assert_eq!(d % heads, 0, "attention: heads must divide width");
        let dh = d / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((batch * seq, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r0 = b * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let qs = vq.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let ks = vk.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let vs = vv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let mut scores = qs.dot(&ks.t());
                scores.mapv_inplace(|x| x * scale);
                for mut row in scores.rows_mut() {
                    let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    row.mapv_inplace(|x| (x - m).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
                let o = scores.dot(&vs);
                out.slice_mut(s![r0..r0 + seq, c0..c0 + dh]).assign(&o);
                probs.push(scores);
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, gr| {
                let mut dq = Array2::zeros((batch * seq, d));
                let mut dk = Array2::zeros((batch * seq, d));
                let mut dv = Array2::zeros((batch * seq, d));
                for b in 0..batch {
                    let r0 = b * seq;
                    for h in 0..heads {
                        let c0 = h * dh;
                        let p = &probs[b * heads + h];
                        let qs = vq.slice(s![r0..r0 + seq, c0..c0 + dh]);
                        let ks = vk.slice(s![r0..r0 + seq, c0..c0 + dh]);
                        let vs = vv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                        let go = g.slice(s![r0..r0 + seq, c0..c0 + dh]);
                        dv.slice_mut(s![r0..r0 + seq, c0..c0 + dh])
                            .assign(&p.t().dot(&go));
                        let mut dp = go.dot(&vs.t());
                        // softmax backward per row
                        for (mut dprow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let dot = dprow.dot(&prow);
                            for (dpj, &pj) in dprow.iter_mut().zip(prow.iter()) {
                                *dpj = pj * (*dpj - dot);
                            }
                        }
                        dp.mapv_inplace(|x| x * scale);
                        dq.slice_mut(s![r0..r0 + seq, c0..c0 + dh])
                            .assign(&dp.dot(&ks));
                        dk.slice_mut(s![r0..r0 + seq, c0..c0 + dh])
                            .assign(&dp.t().dot(&qs));
                    }
                }
                gr.accum(q.0, dq);
                gr.accum(k.0, dk);
                gr.accum(v.0, dv);
            })),
        )
    }
}
