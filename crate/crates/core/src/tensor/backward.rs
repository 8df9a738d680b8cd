//! Backward rules, one per op.

use rayon::prelude::*;

use super::kernels::{gemm, Mat};
use super::ops::{gather_rows, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use super::tape::{AttentionSpec, Grad, Node, Op};
use super::{Buffer, Element, Var};
use crate::error::Result;

fn send<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Grad<T>>], v: Var, g: Grad<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let shape = nodes[v.0].value.shape();
    grads[v.0] = Some(match grads[v.0].take() {
        None => g,
        Some(prev) => prev.accumulate(g, shape),
    });
}

fn dense<T: Element>(nodes: &[Node<T>], id: usize, g: Grad<T>) -> Buffer<T> {
    g.into_dense(nodes[id].value.shape())
}

pub(crate) fn propagate<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    g: Grad<T>,
    grads: &mut [Option<Grad<T>>],
) -> Result<()> {
    let node = &nodes[id];
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let gy = dense(nodes, id, g);
            let (av, bv) = (val(*a), val(*b));
            let am = Mat::dense(av.shape()[0], av.shape()[1], *ta);
            let bm = Mat::dense(bv.shape()[0], bv.shape()[1], *tb);
            let gm = Mat::dense(am.rows, bm.cols, false);
            if wants(*a) {
                // d op(A) = dY · op(B)ᵀ, written through op's layout
                let mut ga = Buffer::zeros(av.shape());
                let target = Mat::dense(av.shape()[0], av.shape()[1], *ta);
                gemm(T::ONE, &gy, gm, bv.data(), bm.t(), T::ZERO, &mut ga, target);
                send(nodes, grads, *a, Grad::Dense(ga));
            }
            if wants(*b) {
                let mut gb = Buffer::zeros(bv.shape());
                let target = Mat::dense(bv.shape()[0], bv.shape()[1], *tb);
                gemm(T::ONE, av.data(), am.t(), &gy, gm, T::ZERO, &mut gb, target);
                send(nodes, grads, *b, Grad::Dense(gb));
            }
        }
        Op::Add { a, b } => {
            let gy = dense(nodes, id, g);
            if wants(*a) && wants(*b) {
                send(nodes, grads, *a, Grad::Dense(gy.clone()));
            } else if wants(*a) {
                send(nodes, grads, *a, Grad::Dense(gy));
                return Ok(());
            }
            if wants(*b) {
                send(nodes, grads, *b, Grad::Dense(gy));
            }
        }
        Op::AddRow { a, bias } => {
            let gy = dense(nodes, id, g);
            if wants(*bias) {
                let c = val(*bias).numel();
                let mut gb = Buffer::zeros(&[c]);
                for row in gy.chunks(c) {
                    for (o, &x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                send(nodes, grads, *bias, Grad::Dense(gb));
            }
            if wants(*a) {
                send(nodes, grads, *a, Grad::Dense(gy));
            }
        }
        Op::Mul { a, b } => {
            let gy = dense(nodes, id, g);
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                let data: Vec<T> = gy.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                send(nodes, grads, *a, Grad::Dense(Buffer::from_vec(data, av.shape())));
            }
            if wants(*b) {
                let data: Vec<T> = gy.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                send(nodes, grads, *b, Grad::Dense(Buffer::from_vec(data, bv.shape())));
            }
        }
        Op::Scale { a, factor } => {
            let mut gy = dense(nodes, id, g);
            gy.iter_mut().for_each(|x| *x *= *factor);
            send(nodes, grads, *a, Grad::Dense(gy));
        }
        Op::Sum { a } => {
            let gy = dense(nodes, id, g)[0];
            let shape = val(*a).shape();
            let n = val(*a).numel();
            send(nodes, grads, *a, Grad::Dense(Buffer::from_vec(vec![gy; n], shape)));
        }
        Op::Reshape { a } => {
            // Same element order: reinterpret the gradient.
            let g = match g {
                Grad::Dense(b) => Grad::Dense(b),
                rows @ Grad::Rows { .. } => Grad::Dense(rows.into_dense(node.value.shape())),
            };
            send(nodes, grads, *a, g);
        }
        Op::Gather { src, rows } => {
            let width = val(*src).shape()[1];
            let values = dense(nodes, id, g);
            send(nodes, grads, *src, Grad::Rows { rows: rows.to_vec(), values, width });
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let gy = dense(nodes, id, g);
            let xv = val(*x);
            let gam = val(*gamma).data();
            let d = xv.cols();
            let inv_d = T::ONE / T::from_usize(d);
            let mut gx = if wants(*x) { Some(Buffer::zeros(xv.shape())) } else { None };
            let mut gg = Buffer::zeros(&[d]);
            let mut gb = Buffer::zeros(&[d]);
            let mut xhat = vec![T::ZERO; d];
            let mut dxhat = vec![T::ZERO; d];
            for r in 0..xv.rows() {
                let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                let row = xv.row(r);
                let gyr = &gy[r * d..(r + 1) * d];
                for j in 0..d {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = gyr[j] * gam[j];
                    gg[j] += gyr[j] * xhat[j];
                    gb[j] += gyr[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    let out = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
            }
            if let Some(gx) = gx {
                send(nodes, grads, *x, Grad::Dense(gx));
            }
            send(nodes, grads, *gamma, Grad::Dense(gg));
            send(nodes, grads, *beta, Grad::Dense(gb));
        }
        Op::Gelu { x } => {
            let mut gy = dense(nodes, id, g);
            let c = T::from_f64(GELU_SQRT_2_OVER_PI);
            let k = T::from_f64(GELU_CUBIC);
            let half = T::from_f64(0.5);
            let three_k = T::from_f64(3.0 * GELU_CUBIC);
            for (o, &v) in gy.iter_mut().zip(val(*x).data()) {
                let t = (c * (v + k * v * v * v)).tanh();
                let dt = c * (T::ONE + three_k * v * v);
                let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * dt;
                *o *= d;
            }
            send(nodes, grads, *x, Grad::Dense(gy));
        }
        Op::LogSoftmax { x } => {
            let mut gy = dense(nodes, id, g);
            let out = node.value.data();
            let c = node.value.cols();
            for (grow, orow) in gy.chunks_mut(c).zip(out.chunks(c)) {
                let s: T = grow.iter().copied().sum();
                for (gv, &o) in grow.iter_mut().zip(orow) {
                    *gv -= o.exp() * s;
                }
            }
            send(nodes, grads, *x, Grad::Dense(gy));
        }
        Op::PickSum { x, cols, weights } => {
            let gy = dense(nodes, id, g)[0];
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = Buffer::zeros(xv.shape());
            for (r, (&j, &w)) in cols.iter().zip(weights).enumerate() {
                gx[r * c + j] -= w * gy;
            }
            send(nodes, grads, *x, Grad::Dense(gx));
        }
        Op::GatherDot { a, a_rows, b, b_rows } => {
            let gy = dense(nodes, id, g);
            let (av, bv) = (val(*a), val(*b));
            let width = av.shape()[1];
            let (m, n) = (a_rows.len(), b_rows.len());
            let gm = Mat::dense(m, n, false);
            if wants(*a) {
                let gb_sel = gather_rows(bv.data(), width, b_rows);
                let mut ga = Buffer::zeros(&[m, width]);
                gemm(T::ONE, &gy, gm, &gb_sel, Mat::dense(n, width, false), T::ZERO, &mut ga, Mat::dense(m, width, false));
                drop(gb_sel);
                send(nodes, grads, *a, Grad::Rows { rows: a_rows.to_vec(), values: ga, width });
            }
            if wants(*b) {
                let ga_sel = gather_rows(av.data(), width, a_rows);
                let mut gb = Buffer::zeros(&[n, width]);
                gemm(T::ONE, &gy, gm.t(), &ga_sel, Mat::dense(m, width, false), T::ZERO, &mut gb, Mat::dense(n, width, false));
                drop(ga_sel);
                send(nodes, grads, *b, Grad::Rows { rows: b_rows.to_vec(), values: gb, width });
            }
        }
        Op::Attention { q, k, v, spec, probs } => {
            let gy = dense(nodes, id, g);
            let (gq, gk, gv) = attention_backward(val(*q).data(), val(*k).data(), val(*v).data(), probs, &gy, *spec, val(*q).shape()[1]);
            send(nodes, grads, *q, Grad::Dense(gq));
            send(nodes, grads, *k, Grad::Dense(gk));
            send(nodes, grads, *v, Grad::Dense(gv));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gy: &[T],
    spec: AttentionSpec,
    d: usize,
) -> (Buffer<T>, Buffer<T>, Buffer<T>) {
    let AttentionSpec { n_seq, seq_len: l, n_heads, .. } = spec;
    let dh = d / n_heads;
    let scale = T::ONE / T::from_usize(dh).sqrt();
    let shape = [n_seq * l, d];
    let mut gq = Buffer::zeros(&shape);
    let mut gk = Buffer::zeros(&shape);
    let mut gv = Buffer::zeros(&shape);
    // Per-sequence scratch, allocated untracked inside the workers.
    gq.par_chunks_mut(l * d)
        .zip(gk.par_chunks_mut(l * d))
        .zip(gv.par_chunks_mut(l * d))
        .enumerate()
        .for_each(|(s, ((gq_s, gk_s), gv_s))| {
            let base = s * l * d;
            let mut dp = vec![T::ZERO; l * l];
            for h in 0..n_heads {
                let p = &probs[(s * n_heads + h) * l * l..(s * n_heads + h + 1) * l * l];
                let pm = Mat::dense(l, l, false);
                let head = |off: usize| Mat::strided(off + h * dh, l, dh, d);
                // dV = Pᵀ · dY
                gemm(T::ONE, p, pm.t(), gy, head(base), T::ZERO, gv_s, head(0));
                // dP = dY · Vᵀ
                gemm(T::ONE, gy, head(base), v, head(base).t(), T::ZERO, &mut dp, pm);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot);
                    }
                }
                // dQ = dS · K · scale, dK = dSᵀ · Q · scale
                gemm(scale, &dp, pm, k, head(base), T::ZERO, gq_s, head(0));
                gemm(scale, &dp, pm.t(), q, head(base), T::ZERO, gk_s, head(0));
            }
        });
    (gq, gk, gv)
}
