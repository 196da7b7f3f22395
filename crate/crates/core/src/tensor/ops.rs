//! Recorded operations: forward constructors on [`Tape`] and their backward rules.

use super::tape::{slot, Node, Tape, Var};
use super::{gemm_strided, Float, MatRef, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const FOCAL_CLAMP: f64 = 1e-7;
const LOG_FLOOR: f64 = 1e-6;
pub(crate) const MIN_WIDTH: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply<F: Float>(self, a: F, b: F) -> F {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }
}

/// Elementwise unary functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Abs,
    Sigmoid,
    Silu,
    Relu,
    Square,
    Tanh,
}

pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl UnaryOp {
    fn forward<F: Float>(self, x: F) -> F {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Abs => x.abs(),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Relu => x.max(F::zero()),
            UnaryOp::Square => x * x,
            UnaryOp::Tanh => x.tanh(),
        }
    }

    fn derivative<F: Float>(self, x: F, y: F) -> F {
        match self {
            UnaryOp::Neg => -F::one(),
            UnaryOp::Exp => y,
            UnaryOp::Ln => F::one() / x,
            UnaryOp::Abs => {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            }
            UnaryOp::Sigmoid => y * (F::one() - y),
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s + x * s * (F::one() - s)
            }
            UnaryOp::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            UnaryOp::Square => x + x,
            UnaryOp::Tanh => F::one() - y * y,
        }
    }
}

/// Per-row segment regression losses on `(center, width)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentLossKind {
    /// `1 − GIoU`.
    Giou,
    /// `|ln(c/ĉ)| + |ln(d/d̂)|`.
    LogRatio,
}

/// How the right operand's index follows from the output index.
#[derive(Clone, Debug)]
pub(super) enum Bcast {
    Same,
    /// `b` repeats along leading axes.
    Suffix(usize),
    /// `b` is constant along trailing axes of this combined extent.
    Prefix(usize),
    General {
        out_shape: Vec<usize>,
        b_strides: Vec<usize>,
    },
}

impl Bcast {
    fn plan(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if a == b {
            return Some(Bcast::Same);
        }
        if b.len() > a.len() {
            return None;
        }
        let pad = a.len() - b.len();
        let full_b: Vec<usize> = std::iter::repeat(1).take(pad).chain(b.iter().copied()).collect();
        if full_b.iter().zip(a).any(|(&bd, &ad)| bd != 1 && bd != ad) {
            return None;
        }
        let bn: usize = b.iter().product();
        let an: usize = a.iter().product();
        let first_real = full_b.iter().position(|&d| d != 1).unwrap_or(a.len());
        if full_b[first_real..] == a[first_real..] {
            return Some(Bcast::Suffix(bn));
        }
        let last_real = full_b.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if full_b[..last_real] == a[..last_real] {
            return Some(Bcast::Prefix(an / bn));
        }
        let mut b_strides = vec![0; a.len()];
        let mut stride = 1;
        for d in (0..a.len()).rev() {
            if full_b[d] != 1 {
                b_strides[d] = stride;
            }
            stride *= full_b[d];
        }
        Some(Bcast::General {
            out_shape: a.to_vec(),
            b_strides,
        })
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Prefix(r) => i / r,
            Bcast::General { out_shape, b_strides } => {
                let mut rem = i;
                let mut idx = 0;
                for d in (0..out_shape.len()).rev() {
                    idx += (rem % out_shape[d]) * b_strides[d];
                    rem /= out_shape[d];
                }
                idx
            }
        }
    }
}

pub(super) enum Op<F> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Affine {
        a: Var,
        scale: F,
    },
    RowAffine {
        a: Var,
        scale: Vec<F>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    AvgPool2 {
        a: Var,
    },
    DeformAggregate {
        values: Vec<Var>,
        pos: Var,
        weights: Var,
        heads: usize,
        points: usize,
    },
    Focal {
        logits: Var,
        targets: Vec<F>,
        alpha: F,
        gamma: F,
    },
    SegmentLoss {
        pred: Var,
        target: Vec<F>,
        kind: SegmentLossKind,
    },
    RefineRefs {
        delta: Var,
        base: Vec<F>,
    },
}

impl<F: Float> Op<F> {
    pub(super) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Affine { a, .. }
            | Op::RowAffine { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Softmax { a }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::AvgPool2 { a } => vec![*a],
            Op::Linear { x, w, b } | Op::Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols { parts } | Op::ConcatRows { parts } => parts.clone(),
            Op::DeformAggregate {
                values, pos, weights, ..
            } => {
                let mut v = values.clone();
                v.push(*pos);
                v.push(*weights);
                v
            }
            Op::Focal { logits, .. } => vec![*logits],
            Op::SegmentLoss { pred, .. } => vec![*pred],
            Op::RefineRefs { delta, .. } => vec![*delta],
        }
    }

    /// Accumulates input gradients given the output value and its gradient `g`.
    pub(super) fn backward(
        &self,
        nodes: &[Node<F>],
        out: &Tensor<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let val = |v: &Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = val(a).data();
                let bv = val(b).data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi)
                        }
                        BinaryKind::Mul => {
                            for (i, d) in ga.iter_mut().enumerate() {
                                *d += g[i] * bv[bcast.index(i)];
                            }
                        }
                        BinaryKind::Div => {
                            for (i, d) in ga.iter_mut().enumerate() {
                                *d += g[i] / bv[bcast.index(i)];
                            }
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bcast.index(i);
                        gb[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av[i],
                            BinaryKind::Div => -gi * av[i] / (bv[j] * bv[j]),
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = val(a).data();
                let y = out.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kind.derivative(x[i], y[i]);
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * *scale);
                }
            }
            Op::RowAffine { a, scale } => {
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i] * scale[i / cols];
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                let (av, bv) = (val(a).data(), val(b).data());
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm_strided(m, n, k, g, MatRef::row_major(n), bv, MatRef::transposed(n), ga, MatRef::row_major(k), true);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm_strided(k, m, n, av, MatRef::transposed(k), g, MatRef::row_major(n), gb, MatRef::row_major(n), true);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (val(x).shape()[0], val(x).shape()[1]);
                let o = val(w).shape()[0];
                let (xv, wv) = (val(x).data(), val(w).data());
                if let Some(gx) = slot(grads, nodes, *x) {
                    gemm_strided(n, o, i, g, MatRef::row_major(o), wv, MatRef::row_major(i), gx, MatRef::row_major(i), true);
                }
                if let Some(gw) = slot(grads, nodes, *w) {
                    gemm_strided(o, n, i, g, MatRef::transposed(o), xv, MatRef::row_major(i), gw, MatRef::row_major(i), true);
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for row in g.chunks_exact(o) {
                            gb.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    let s = g[0] / F::of(ga.len() as f64);
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Softmax { a } => {
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((y, gr), d) in out
                        .data()
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(ga.chunks_exact_mut(cols))
                    {
                        let dot: F = y.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                        for j in 0..cols {
                            d[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = out.cols();
                let gv = val(gamma).data();
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for (gr, xr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for gr in g.chunks_exact(dim) {
                        gb.iter_mut().zip(gr).for_each(|(d, &gi)| *d += gi);
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    let inv_d = F::one() / F::of(dim as f64);
                    for (r, ((gr, xr), dr)) in g
                        .chunks_exact(dim)
                        .zip(xhat.chunks_exact(dim))
                        .zip(gx.chunks_exact_mut(dim))
                        .enumerate()
                    {
                        let mut mean_g = F::zero();
                        let mut mean_gx = F::zero();
                        for j in 0..dim {
                            let gh = gr[j] * gv[j];
                            mean_g += gh;
                            mean_gx += gh * xr[j];
                        }
                        mean_g *= inv_d;
                        mean_gx *= inv_d;
                        for j in 0..dim {
                            let gh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (gh - mean_g - xr[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (t, cin) = (val(x).shape()[0], val(x).shape()[1]);
                let (cout, ksize) = (val(w).shape()[0], val(w).shape()[2]);
                let (xv, wv) = (val(x).data(), val(w).data());
                let half = ksize / 2;
                for j in 0..ksize {
                    let shift = (j as isize - half as isize) * *dilation as isize;
                    let Some((t0, t1)) = valid_rows(t, shift) else { continue };
                    let src = (t0 as isize + shift) as usize;
                    let rows = t1 - t0;
                    if let Some(gx) = slot(grads, nodes, *x) {
                        // gx[t+s, c] += Σ_o g[t, o] · w[o, c, j]
                        gemm_strided(
                            rows, cout, cin,
                            g, MatRef::row_major(cout).at(t0 * cout),
                            wv, MatRef { offset: j, rs: cin * ksize, cs: ksize },
                            gx, MatRef::row_major(cin).at(src * cin),
                            true,
                        );
                    }
                    if let Some(gw) = slot(grads, nodes, *w) {
                        // gw[o, c, j] += Σ_t g[t, o] · x[t+s, c]
                        gemm_strided(
                            cout, rows, cin,
                            g, MatRef::transposed(cout).at(t0 * cout),
                            xv, MatRef::row_major(cin).at(src * cin),
                            gw, MatRef { offset: j, rs: cin * ksize, cs: ksize },
                            true,
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(grads, nodes, *b) {
                        for row in g.chunks_exact(cout) {
                            gb.iter_mut().zip(row).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let cols = val(a).cols();
                let len = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        let dst = &mut ga[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(gr).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        for (r, dr) in gp.chunks_exact_mut(w).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dr.iter_mut().zip(src).for_each(|(d, &gi)| *d += gi);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = val(p).numel();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &gi)| *d += gi);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::AvgPool2 { a } => {
                let t = val(a).shape()[0];
                let cols = out.cols();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (o, gr) in g.chunks_exact(cols).enumerate() {
                        let lo = 2 * o;
                        let hi = (lo + 2).min(t);
                        let s = F::one() / F::of((hi - lo) as f64);
                        for src in lo..hi {
                            for j in 0..cols {
                                ga[src * cols + j] += gr[j] * s;
                            }
                        }
                    }
                }
            }
            Op::DeformAggregate {
                values,
                pos,
                weights,
                heads,
                points,
            } => deform_backward(nodes, g, grads, values, *pos, *weights, *heads, *points),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let x = val(logits).data();
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for i in 0..gl.len() {
                        gl[i] += g[i] * focal_dlogit(x[i], targets[i], *alpha, *gamma);
                    }
                }
            }
            Op::SegmentLoss { pred, target, kind } => {
                let pv = val(pred).data();
                if let Some(gp) = slot(grads, nodes, *pred) {
                    for r in 0..g.len() {
                        let (dc, dd) = match kind {
                            SegmentLossKind::Giou => giou_loss_grad(
                                pv[2 * r], pv[2 * r + 1], target[2 * r], target[2 * r + 1],
                            ),
                            SegmentLossKind::LogRatio => log_ratio_grad(
                                pv[2 * r], pv[2 * r + 1], target[2 * r], target[2 * r + 1],
                            ),
                        };
                        gp[2 * r] += g[r] * dc;
                        gp[2 * r + 1] += g[r] * dd;
                    }
                }
            }
            Op::RefineRefs { delta, base } => {
                let dv = val(delta).data();
                let ov = out.data();
                if let Some(gd) = slot(grads, nodes, *delta) {
                    let min_w = F::of(MIN_WIDTH);
                    for r in 0..gd.len() / 2 {
                        let c = base[2 * r] + dv[2 * r];
                        if c > F::zero() && c < F::one() {
                            gd[2 * r] += g[2 * r];
                        }
                        let d = base[2 * r + 1] * dv[2 * r + 1].exp();
                        if d > min_w && d < F::one() {
                            gd[2 * r + 1] += g[2 * r + 1] * ov[2 * r + 1];
                        }
                    }
                }
            }
        }
    }
}

/// Output rows `[t0, t1)` whose shifted source row `t + shift` is in range.
fn valid_rows(t: usize, shift: isize) -> Option<(usize, usize)> {
    let t0 = (-shift).max(0) as usize;
    let t1 = (t as isize - shift.max(0)).max(0) as usize;
    (t0 < t1).then_some((t0, t1))
}

/// Border-clamped linear interpolation stencil for a normalized position.
///
/// Returns `(lower row, upper row, upper weight, d(index)/d(position))`.
#[inline]
pub(crate) fn interp_stencil<F: Float>(p: F, len: usize) -> (usize, usize, F, F) {
    if len == 1 {
        return (0, 0, F::zero(), F::zero());
    }
    let span = F::of((len - 1) as f64);
    let inside = p > F::zero() && p < F::one();
    let t = p.max(F::zero()).min(F::one()) * span;
    let i0 = t.floor().to_usize().unwrap_or(0).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let frac = t - F::of(i0 as f64);
    (i0, i1, frac, if inside { span } else { F::zero() })
}

#[allow(clippy::too_many_arguments)]
fn deform_forward<F: Float>(
    values: &[&Tensor<F>],
    pos: &[F],
    weights: &[F],
    nq: usize,
    heads: usize,
    points: usize,
) -> Vec<F> {
    let dim = values[0].cols();
    let dh = dim / heads;
    let levels = values.len();
    let per_query = heads * levels * points;
    let mut out = vec![F::zero(); nq * dim];
    for q in 0..nq {
        let orow = &mut out[q * dim..(q + 1) * dim];
        for m in 0..heads {
            let acc = &mut orow[m * dh..(m + 1) * dh];
            for (l, v) in values.iter().enumerate() {
                let len = v.rows();
                let vd = v.data();
                for k in 0..points {
                    let idx = q * per_query + (m * levels + l) * points + k;
                    let w = weights[idx];
                    let (i0, i1, frac, _) = interp_stencil(pos[idx], len);
                    let r0 = &vd[i0 * dim + m * dh..i0 * dim + (m + 1) * dh];
                    let r1 = &vd[i1 * dim + m * dh..i1 * dim + (m + 1) * dh];
                    let w0 = w * (F::one() - frac);
                    let w1 = w * frac;
                    for j in 0..dh {
                        acc[j] += w0 * r0[j] + w1 * r1[j];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn deform_backward<F: Float>(
    nodes: &[Node<F>],
    g: &[F],
    grads: &mut [Option<Vec<F>>],
    values: &[Var],
    pos: Var,
    weights: Var,
    heads: usize,
    points: usize,
) {
    let dim = nodes[values[0].0].value.cols();
    let dh = dim / heads;
    let levels = values.len();
    let per_query = heads * levels * points;
    let pv = nodes[pos.0].value.data();
    let wv = nodes[weights.0].value.data();
    let nq = pv.len() / per_query;
    let mut gpos = vec![F::zero(); pv.len()];
    let mut gw = vec![F::zero(); wv.len()];
    for (l, vvar) in values.iter().enumerate() {
        let vt = &nodes[vvar.0].value;
        let len = vt.rows();
        let vd = vt.data();
        let mut gv = slot(grads, nodes, *vvar);
        for q in 0..nq {
            let grow = &g[q * dim..(q + 1) * dim];
            for m in 0..heads {
                let gh = &grow[m * dh..(m + 1) * dh];
                for k in 0..points {
                    let idx = q * per_query + (m * levels + l) * points + k;
                    let w = wv[idx];
                    let (i0, i1, frac, dt) = interp_stencil(pv[idx], len);
                    let b0 = i0 * dim + m * dh;
                    let b1 = i1 * dim + m * dh;
                    let mut dot_sample = F::zero();
                    let mut dot_slope = F::zero();
                    for j in 0..dh {
                        let v0 = vd[b0 + j];
                        let v1 = vd[b1 + j];
                        dot_sample += gh[j] * (v0 + frac * (v1 - v0));
                        dot_slope += gh[j] * (v1 - v0);
                    }
                    gw[idx] += dot_sample;
                    gpos[idx] += w * dot_slope * dt;
                    if let Some(gv) = gv.as_deref_mut() {
                        let w0 = w * (F::one() - frac);
                        let w1 = w * frac;
                        for j in 0..dh {
                            gv[b0 + j] += w0 * gh[j];
                            gv[b1 + j] += w1 * gh[j];
                        }
                    }
                }
            }
        }
    }
    if let Some(gp) = slot(grads, nodes, pos) {
        gp.iter_mut().zip(&gpos).for_each(|(d, &v)| *d += v);
    }
    if let Some(gwt) = slot(grads, nodes, weights) {
        gwt.iter_mut().zip(&gw).for_each(|(d, &v)| *d += v);
    }
}

fn clamp_prob<F: Float>(p: F) -> (F, bool) {
    let lo = F::of(FOCAL_CLAMP);
    let hi = F::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Sigmoid focal loss of one logit.
pub(crate) fn focal_from_logit<F: Float>(x: F, target: F, alpha: F, gamma: F) -> F {
    focal_from_prob(sigmoid(x), target, alpha, gamma)
}

/// `−α_t (1−p_t)^γ ln p_t` with the probability clamped to `[1e-7, 1−1e-7]`.
pub(crate) fn focal_from_prob<F: Float>(p: F, target: F, alpha: F, gamma: F) -> F {
    let (p, _) = clamp_prob(p);
    if target > F::of(0.5) {
        -alpha * (F::one() - p).powf(gamma) * p.ln()
    } else {
        -(F::one() - alpha) * p.powf(gamma) * (F::one() - p).ln()
    }
}

fn focal_dlogit<F: Float>(x: F, target: F, alpha: F, gamma: F) -> F {
    let (p, clamped) = clamp_prob(sigmoid(x));
    if clamped {
        return F::zero();
    }
    let one = F::one();
    let dldp = if target > F::of(0.5) {
        let mut d = -(one - p).powf(gamma) / p;
        if gamma != F::zero() {
            d += gamma * (one - p).powf(gamma - one) * p.ln();
        }
        alpha * d
    } else {
        let mut d = p.powf(gamma) / (one - p);
        if gamma != F::zero() {
            d -= gamma * p.powf(gamma - one) * (one - p).ln();
        }
        (one - alpha) * d
    };
    dldp * p * (one - p)
}

/// `1 − GIoU` between `(center, width)` segments.
pub(crate) fn giou_loss<F: Float>(c1: F, d1: F, c2: F, d2: F) -> F {
    let half = F::of(0.5);
    let (s1, e1) = (c1 - half * d1, c1 + half * d1);
    let (s2, e2) = (c2 - half * d2, c2 + half * d2);
    let inter = (e1.min(e2) - s1.max(s2)).max(F::zero());
    let union = (e1 - s1) + (e2 - s2) - inter;
    let hull = e1.max(e2) - s1.min(s2);
    F::one() - (inter / union - (hull - union) / hull)
}

fn giou_loss_grad<F: Float>(c1: F, d1: F, c2: F, d2: F) -> (F, F) {
    let (zero, one, half) = (F::zero(), F::one(), F::of(0.5));
    let (s1, e1) = (c1 - half * d1, c1 + half * d1);
    let (s2, e2) = (c2 - half * d2, c2 + half * d2);
    let raw = e1.min(e2) - s1.max(s2);
    let overlap = raw > zero;
    let inter = raw.max(zero);
    let union = (e1 - s1) + (e2 - s2) - inter;
    let hull = e1.max(e2) - s1.min(s2);
    let di_de = if overlap && e1 <= e2 { one } else { zero };
    let di_ds = if overlap && s1 >= s2 { -one } else { zero };
    let du_de = one - di_de;
    let du_ds = -one - di_ds;
    let dh_de = if e1 >= e2 { one } else { zero };
    let dh_ds = if s1 <= s2 { -one } else { zero };
    let dgiou = |di: F, du: F, dh: F| {
        di / union - inter * du / (union * union) + du / hull - union * dh / (hull * hull)
    };
    let dl_de = -dgiou(di_de, du_de, dh_de);
    let dl_ds = -dgiou(di_ds, du_ds, dh_ds);
    (dl_ds + dl_de, half * (dl_de - dl_ds))
}

pub(crate) fn log_ratio<F: Float>(c1: F, d1: F, c2: F, d2: F) -> F {
    let floor = F::of(LOG_FLOOR);
    (c1.max(floor).ln() - c2.ln()).abs() + (d1.max(floor).ln() - d2.ln()).abs()
}

fn log_ratio_grad<F: Float>(c1: F, d1: F, c2: F, d2: F) -> (F, F) {
    let floor = F::of(LOG_FLOOR);
    let part = |p: F, t: F| {
        if p <= floor {
            return F::zero();
        }
        let diff = p.ln() - t.ln();
        if diff > F::zero() {
            F::one() / p
        } else if diff < F::zero() {
            -F::one() / p
        } else {
            F::zero()
        }
    };
    (part(c1, c2), part(d1, d2))
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn require_matrix<F: Float>(op: &'static str, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("{op} expects a matrix"),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<F: Float> Tape<F> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let bcast = Bcast::plan(at.shape(), bt.shape())
            .ok_or_else(|| mismatch(kind.name(), at.shape(), bt.shape()))?;
        let (av, bv) = (at.data(), bt.data());
        let data = (0..av.len())
            .map(|i| kind.apply(av[i], bv[bcast.index(i)]))
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bcast }))
    }

    /// `a + b`, with `b` broadcast over `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Var {
        let value = self.value(a).map(|x| kind.forward(x));
        self.push(value, Op::Unary { kind, a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Silu, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Ln, a)
    }

    /// `a · scale + shift`.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        self.push(value, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        self.affine(a, k, F::zero())
    }

    /// `y[r, j] = a[r, j]·scale[r] + shift[r]` with constant per-row coefficients.
    pub fn row_affine(&mut self, a: Var, scale: &[F], shift: &[F]) -> Result<Var> {
        let at = self.value(a);
        let (rows, cols) = require_matrix("row_affine", at)?;
        if scale.len() != rows || shift.len() != rows {
            return Err(mismatch("row_affine", at.shape(), &[scale.len(), shift.len()]));
        }
        let data = at
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * scale[i / cols] + shift[i / cols])
            .collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::RowAffine {
                a,
                scale: scale.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// `x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, i) = require_matrix("linear", xt)?;
        let (o, wi) = require_matrix("linear", wt)?;
        if wi != i {
            return Err(mismatch("linear", xt.shape(), wt.shape()));
        }
        let mut out = vec![F::zero(); n * o];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [o] {
                return Err(mismatch("linear bias", wt.shape(), bt.shape()));
            }
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm_strided(
            n,
            i,
            o,
            xt.data(),
            MatRef::row_major(i),
            wt.data(),
            MatRef::transposed(i),
            &mut out,
            MatRef::row_major(o),
            b.is_some(),
        );
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax { a })
    }

    /// Layer normalization over the last axis (epsilon 1e-5 inside the square root).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xt = self.value(x);
        let dim = xt.cols();
        let (gt, bt) = (self.value(gamma), self.value(beta));
        if gt.shape() != [dim] || bt.shape() != [dim] {
            return Err(mismatch("layer_norm", xt.shape(), gt.shape()));
        }
        let rows = xt.numel() / dim;
        let mut xhat = Vec::with_capacity(xt.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xt.numel());
        let inv_d = F::one() / F::of(dim as f64);
        let eps = F::of(LN_EPS);
        for row in xt.data().chunks_exact(dim) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gt.data()[j] + bt.data()[j]);
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Length-preserving dilated convolution over rows (time) of `x: [T, Cin]`
    /// with `w: [Cout, Cin, k]` (odd `k`) and zero padding `dilation·(k−1)/2`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (t, cin) = require_matrix("conv1d", xt)?;
        if wt.ndim() != 3 || wt.shape()[1] != cin {
            return Err(mismatch("conv1d", xt.shape(), wt.shape()));
        }
        let (cout, ksize) = (wt.shape()[0], wt.shape()[2]);
        if ksize % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: wt.shape().to_vec(),
                reason: "kernel size must be odd for symmetric padding".into(),
            });
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be at least 1".into()));
        }
        let mut out = vec![F::zero(); t * cout];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.shape() != [cout] {
                return Err(mismatch("conv1d bias", wt.shape(), bt.shape()));
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bt.data());
            }
        }
        let half = ksize / 2;
        for j in 0..ksize {
            let shift = (j as isize - half as isize) * dilation as isize;
            let Some((t0, t1)) = valid_rows(t, shift) else { continue };
            let src = (t0 as isize + shift) as usize;
            gemm_strided(
                t1 - t0,
                cin,
                cout,
                xt.data(),
                MatRef::row_major(cin).at(src * cin),
                wt.data(),
                MatRef { offset: j, rs: ksize, cs: cin * ksize },
                &mut out,
                MatRef::row_major(cout).at(t0 * cout),
                true,
            );
        }
        let value = Tensor::new(vec![t, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, dilation }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        let (rows, cols) = require_matrix("slice_cols", at)?;
        if len == 0 || start + len > cols {
            return Err(Error::InvalidShape {
                shape: at.shape().to_vec(),
                reason: format!("column range {start}..{} out of bounds", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for row in at.data().chunks_exact(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rows = require_matrix("concat_cols", self.value(*first))?.0;
        let mut total = 0;
        for p in parts {
            let (r, c) = require_matrix("concat_cols", self.value(*p))?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(*first), self.shape(*p)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let cols = require_matrix("concat_rows", self.value(*first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = require_matrix("concat_rows", self.value(*p))?;
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(*first), self.shape(*p)));
            }
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let at = self.value(a);
        let (rows, cols) = require_matrix("gather_rows", at)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "gather of {} rows from a {rows}-row tensor is out of bounds",
                idx.len()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(at.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Stride-2 average pooling over rows; an odd trailing row is averaged alone.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let (t, cols) = require_matrix("avg_pool2", at)?;
        let out_t = t.div_ceil(2);
        let mut data = Vec::with_capacity(out_t * cols);
        for o in 0..out_t {
            let lo = 2 * o;
            let hi = (lo + 2).min(t);
            let s = F::one() / F::of((hi - lo) as f64);
            for j in 0..cols {
                let mut acc = F::zero();
                for src in lo..hi {
                    acc += at.data()[src * cols + j];
                }
                data.push(acc * s);
            }
        }
        let value = Tensor::new(vec![out_t, cols], data)?;
        Ok(self.push(value, Op::AvgPool2 { a }))
    }

    /// Multi-head, multi-level deformable aggregation.
    ///
    /// `values[l]: [T_l, D]`; `pos` and `weights` are `[Nq, heads·levels·points]`
    /// ordered `(head, level, point)`. Head `m` reads columns `m·D/heads..`.
    /// Positions are normalized (`0` = first row, `1` = last row) and clamp to
    /// the border.
    pub fn deform_aggregate(
        &mut self,
        values: &[Var],
        pos: Var,
        weights: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let levels = values.len();
        if levels == 0 || heads == 0 || points == 0 {
            return Err(Error::InvalidArgument(
                "deformable aggregation needs at least one level, head and point".into(),
            ));
        }
        let dim = self.value(values[0]).cols();
        if dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "value dim {dim} not divisible by {heads} heads"
            )));
        }
        for v in values {
            let (_, c) = require_matrix("deform_aggregate", self.value(*v))?;
            if c != dim {
                return Err(mismatch("deform_aggregate", self.shape(values[0]), self.shape(*v)));
            }
        }
        let (pt, wt) = (self.value(pos), self.value(weights));
        let (nq, per) = require_matrix("deform_aggregate", pt)?;
        if per != heads * levels * points || wt.shape() != pt.shape() {
            return Err(mismatch("deform_aggregate", pt.shape(), wt.shape()));
        }
        let vals: Vec<&Tensor<F>> = values.iter().map(|v| self.value(*v)).collect();
        let out = deform_forward(&vals, pt.data(), wt.data(), nq, heads, points);
        let value = Tensor::new(vec![nq, dim], out)?;
        Ok(self.push(
            value,
            Op::DeformAggregate {
                values: values.to_vec(),
                pos,
                weights,
                heads,
                points,
            },
        ))
    }

    /// Elementwise sigmoid focal loss of `logits` against 0/1 `targets`.
    pub fn focal_loss(&mut self, logits: Var, targets: &Tensor<F>, alpha: F, gamma: F) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape() != targets.shape() {
            return Err(mismatch("focal_loss", lt.shape(), targets.shape()));
        }
        let data = lt
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| focal_from_logit(x, t, alpha, gamma))
            .collect();
        let value = Tensor::new(lt.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::Focal {
                logits,
                targets: targets.data().to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    /// Per-row segment loss between `pred: [n, 2]` and a constant `target: [n, 2]`,
    /// both `(center, width)`.
    pub fn segment_loss(&mut self, pred: Var, target: &Tensor<F>, kind: SegmentLossKind) -> Result<Var> {
        let pt = self.value(pred);
        let (n, c) = require_matrix("segment_loss", pt)?;
        if c != 2 || target.shape() != pt.shape() {
            return Err(mismatch("segment_loss", pt.shape(), target.shape()));
        }
        let (p, t) = (pt.data(), target.data());
        let data = (0..n)
            .map(|r| match kind {
                SegmentLossKind::Giou => giou_loss(p[2 * r], p[2 * r + 1], t[2 * r], t[2 * r + 1]),
                SegmentLossKind::LogRatio => {
                    log_ratio(p[2 * r], p[2 * r + 1], t[2 * r], t[2 * r + 1])
                }
            })
            .collect();
        let value = Tensor::new(vec![n], data)?;
        Ok(self.push(
            value,
            Op::SegmentLoss {
                pred,
                target: target.data().to_vec(),
                kind,
            },
        ))
    }

    /// Reference refinement: `c' = clamp(c + Δc, 0, 1)`, `d' = clamp(d·exp(Δd), 1e-4, 1)`.
    pub fn refine_refs(&mut self, delta: Var, base: &Tensor<F>) -> Result<Var> {
        let dt = self.value(delta);
        let (_, c) = require_matrix("refine_refs", dt)?;
        if c != 2 || dt.shape() != base.shape() {
            return Err(mismatch("refine_refs", dt.shape(), base.shape()));
        }
        let (d, b) = (dt.data(), base.data());
        let min_w = F::of(MIN_WIDTH);
        let mut out = Vec::with_capacity(d.len());
        for r in 0..d.len() / 2 {
            out.push((b[2 * r] + d[2 * r]).max(F::zero()).min(F::one()));
            out.push((b[2 * r + 1] * d[2 * r + 1].exp()).max(min_w).min(F::one()));
        }
        let value = Tensor::new(dt.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::RefineRefs {
                delta,
                base: base.data().to_vec(),
            },
        ))
    }
}
