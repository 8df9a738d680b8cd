//! Forward rules. Each op validates shapes, computes its output eagerly and
//! records what the backward rule needs.

use rayon::prelude::*;

use super::kernels::{gemm, Mat};
use super::tape::{AttentionSpec, Op};
use super::{Buffer, Element, Tape, Tensor, Var};
use crate::error::{bail, Result};

/// `sqrt(2 / pi)`, the scale inside the tanh form of GELU.
pub(crate) const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub(crate) const GELU_CUBIC: f64 = 0.044_715;

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => bail!(Shape, "{what} must be a matrix, got shape {:?}", shape),
    }
}

pub(crate) fn gather_rows<T: Element>(src: &[T], width: usize, rows: &[usize]) -> Buffer<T> {
    let mut out = Buffer::zeros(&[rows.len(), width]);
    for (i, &r) in rows.iter().enumerate() {
        out[i * width..(i + 1) * width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

impl<T: Element> Tape<T> {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    /// `a · b` for matrices.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ` (e.g. hidden states against an embedding table).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            let (ar, ac) = matrix_dims(av.shape(), "matmul lhs")?;
            let (br, bc) = matrix_dims(bv.shape(), "matmul rhs")?;
            let am = Mat::dense(ar, ac, ta);
            let bm = Mat::dense(br, bc, tb);
            if am.cols != bm.rows {
                bail!(
                    Shape,
                    "matmul inner dimensions disagree: lhs {:?}{} vs rhs {:?}{}",
                    av.shape(),
                    if ta { "ᵀ" } else { "" },
                    bv.shape(),
                    if tb { "ᵀ" } else { "" }
                );
            }
            let shape = [am.rows, bm.cols];
            let mut c = Buffer::zeros(&shape);
            gemm(T::ONE, av.data(), am, bv.data(), bm, T::ZERO, &mut c, Mat::dense(am.rows, bm.cols, false));
            Tensor::from_buffer(shape.to_vec(), c)
        };
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, self.any_grad(&[a, b])))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            bail!(Shape, "{what}: shapes {:?} and {:?} differ", sa, sb);
        }
        Ok(())
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_buffer(av.shape().to_vec(), Buffer::from_vec(data, av.shape()))
    }

    fn map1(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data: Vec<T> = av.data().iter().map(|&x| f(x)).collect();
        Tensor::from_buffer(av.shape().to_vec(), Buffer::from_vec(data, av.shape()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.map2(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }, self.any_grad(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.map2(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, self.any_grad(&[a, b])))
    }

    /// Adds `bias` (length = last dimension of `a`) to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.check(a)?;
        self.check(bias)?;
        let out = {
            let av = self.value(a);
            let bv = self.value(bias);
            let c = av.cols();
            if bv.shape() != [c] {
                bail!(Shape, "add_row: bias {:?} does not match rows of {:?}", bv.shape(), av.shape());
            }
            let b = bv.data();
            let data: Vec<T> = av.data().iter().enumerate().map(|(i, &x)| x + b[i % c]).collect();
            Tensor::from_buffer(av.shape().to_vec(), Buffer::from_vec(data, av.shape()))
        };
        Ok(self.push(out, Op::AddRow { a, bias }, self.any_grad(&[a, bias])))
    }

    pub fn scale(&self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let out = self.map1(a, |x| x * factor);
        Ok(self.push(out, Op::Scale { a, factor }, self.any_grad(&[a])))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, self.any_grad(&[a])))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a)?;
        self.scale(s, T::ONE / T::from_usize(n))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, self.any_grad(&[a])))
    }

    /// Row gather (embedding lookup): row `t` of the output is row `ids[t]` of `src`.
    pub fn gather(&self, src: Var, ids: &[usize]) -> Result<Var> {
        self.check(src)?;
        if ids.is_empty() {
            bail!(Shape, "gather with an empty id list");
        }
        let out = {
            let sv = self.value(src);
            let (rows, width) = matrix_dims(sv.shape(), "gather source")?;
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                bail!(Index, "id {bad} out of range for table with {rows} rows");
            }
            Tensor::from_buffer(vec![ids.len(), width], gather_rows(sv.data(), width, ids))
        };
        Ok(self.push(out, Op::Gather { src, rows: ids.into() }, self.any_grad(&[src])))
    }

    /// Per-row normalisation over the last dimension followed by `gamma`/`beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        for v in [x, gamma, beta] {
            self.check(v)?;
        }
        if !(eps > 0.0) {
            bail!(Contract, "layer_norm eps must be positive, got {eps}");
        }
        let (out, stats) = {
            let xv = self.value(x);
            let gv = self.value(gamma);
            let bv = self.value(beta);
            let d = xv.cols();
            if gv.shape() != [d] || bv.shape() != [d] {
                bail!(
                    Shape,
                    "layer_norm: gamma {:?} / beta {:?} do not match width {d}",
                    gv.shape(),
                    bv.shape()
                );
            }
            let rows = xv.rows();
            let eps = T::from_f64(eps);
            let inv_d = T::ONE / T::from_usize(d);
            let mut out = Buffer::zeros(xv.shape());
            // per row: mean, 1/std
            let mut stats = Buffer::zeros(&[rows, 2]);
            for r in 0..rows {
                let row = xv.row(r);
                // shifted mean: exact for constant rows
                let x0 = row[0];
                let mean = x0 + row.iter().map(|&v| v - x0).sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::ONE / (var + eps).sqrt();
                stats[2 * r] = mean;
                stats[2 * r + 1] = rstd;
                let o = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    o[j] = (row[j] - mean) * rstd * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::from_buffer(xv.shape().to_vec(), out), stats)
        };
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, self.any_grad(&[x, gamma, beta])))
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let c = T::from_f64(GELU_SQRT_2_OVER_PI);
        let k = T::from_f64(GELU_CUBIC);
        let half = T::from_f64(0.5);
        let out = self.map1(x, |v| half * v * (T::ONE + (c * (v + k * v * v * v)).tanh()));
        Ok(self.push(out, Op::Gelu { x }, self.any_grad(&[x])))
    }

    /// Row-wise log-softmax over the last dimension (max-subtracted).
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = {
            let xv = self.value(x);
            if xv.shape().is_empty() {
                bail!(Shape, "log_softmax needs at least one dimension");
            }
            let c = xv.cols();
            let mut out = Buffer::zeros(xv.shape());
            for r in 0..xv.rows() {
                log_softmax_row(xv.row(r), &mut out[r * c..(r + 1) * c]);
            }
            Tensor::from_buffer(xv.shape().to_vec(), out)
        };
        Ok(self.push(out, Op::LogSoftmax { x }, self.any_grad(&[x])))
    }

    /// `-Σ_r weights[r] · x[r, cols[r]]`, a weighted negative log-likelihood
    /// when `x` holds log-probabilities.
    pub fn weighted_nll(&self, x: Var, cols: &[usize], weights: &[T]) -> Result<Var> {
        self.check(x)?;
        let out = {
            let xv = self.value(x);
            let (rows, c) = matrix_dims(xv.shape(), "weighted_nll input")?;
            if cols.len() != rows || weights.len() != rows {
                bail!(
                    Shape,
                    "weighted_nll: {} rows but {} columns / {} weights",
                    rows,
                    cols.len(),
                    weights.len()
                );
            }
            if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
                bail!(Index, "target {bad} out of range for {c} classes");
            }
            let mut acc = T::ZERO;
            for r in 0..rows {
                acc -= weights[r] * xv.data()[r * c + cols[r]];
            }
            Tensor::scalar(acc)
        };
        let op = Op::PickSum { x, cols: cols.to_vec(), weights: weights.to_vec() };
        Ok(self.push(out, op, self.any_grad(&[x])))
    }

    /// Score matrix between indexed rows of two tables:
    /// `out[i][j] = a[a_rows[i]] · b[b_rows[j]]`.
    ///
    /// Neither gathered operand is retained; the op keeps only the
    /// `|a_rows| × |b_rows|` output.
    pub fn gather_dot(&self, a: Var, a_rows: &[usize], b: Var, b_rows: &[usize]) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if a_rows.is_empty() || b_rows.is_empty() {
            bail!(Shape, "gather_dot with an empty row set");
        }
        let out = {
            let av = self.value(a);
            let bv = self.value(b);
            let (ra, da) = matrix_dims(av.shape(), "gather_dot lhs")?;
            let (rb, db) = matrix_dims(bv.shape(), "gather_dot rhs")?;
            if da != db {
                bail!(Shape, "gather_dot widths disagree: {:?} vs {:?}", av.shape(), bv.shape());
            }
            if let Some(&bad) = a_rows.iter().find(|&&i| i >= ra) {
                bail!(Index, "row {bad} out of range for lhs with {ra} rows");
            }
            if let Some(&bad) = b_rows.iter().find(|&&i| i >= rb) {
                bail!(Index, "id {bad} out of range for table with {rb} rows");
            }
            let ga = gather_rows(av.data(), da, a_rows);
            let gb = gather_rows(bv.data(), db, b_rows);
            let (m, n) = (a_rows.len(), b_rows.len());
            let mut c = Buffer::zeros(&[m, n]);
            gemm(
                T::ONE,
                &ga,
                Mat::dense(m, da, false),
                &gb,
                Mat::dense(n, db, true),
                T::ZERO,
                &mut c,
                Mat::dense(m, n, false),
            );
            Tensor::from_buffer(vec![m, n], c)
        };
        let op = Op::GatherDot { a, a_rows: a_rows.into(), b, b_rows: b_rows.into() };
        Ok(self.push(out, op, self.any_grad(&[a, b])))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[n_seq·seq_len, d_model]`; heads split the columns.
    /// With `causal`, position `i` attends to positions `0..=i` only.
    pub fn attention(&self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        for x in [q, k, v] {
            self.check(x)?;
        }
        let (out, probs) = {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            let (rows, d) = matrix_dims(qv.shape(), "attention query")?;
            if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
                bail!(Shape, "attention: q {:?}, k {:?}, v {:?} differ", qv.shape(), kv.shape(), vv.shape());
            }
            let AttentionSpec { n_seq, seq_len, n_heads, causal } = spec;
            if n_seq * seq_len != rows || n_heads == 0 || d % n_heads != 0 {
                bail!(Shape, "attention geometry {:?} does not fit input {:?}", spec, qv.shape());
            }
            let dh = d / n_heads;
            let scale = T::ONE / T::from_usize(dh).sqrt();
            let mut out = Buffer::zeros(&[rows, d]);
            let mut probs = Buffer::zeros(&[n_seq, n_heads, seq_len, seq_len]);
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let l = seq_len;
            out.par_chunks_mut(l * d).zip(probs.par_chunks_mut(n_heads * l * l)).enumerate().for_each(
                |(s, (out_s, probs_s))| {
                    let base = s * l * d;
                    for h in 0..n_heads {
                        let p = &mut probs_s[h * l * l..(h + 1) * l * l];
                        let qm = Mat::strided(base + h * dh, l, dh, d);
                        let km = Mat::strided(base + h * dh, l, dh, d);
                        gemm(scale, qd, qm, kd, km.t(), T::ZERO, p, Mat::dense(l, l, false));
                        for i in 0..l {
                            let row = &mut p[i * l..(i + 1) * l];
                            let visible = if causal { i + 1 } else { l };
                            softmax_in_place(&mut row[..visible]);
                            row[visible..].iter_mut().for_each(|x| *x = T::ZERO);
                        }
                        let vm = Mat::strided(base + h * dh, l, dh, d);
                        let om = Mat::strided(h * dh, l, dh, d);
                        gemm(T::ONE, p, Mat::dense(l, l, false), vd, vm, T::ZERO, out_s, om);
                    }
                },
            );
            (Tensor::from_buffer(vec![rows, d], out), probs)
        };
        let op = Op::Attention { q, k, v, spec, probs };
        Ok(self.push(out, op, self.any_grad(&[q, k, v])))
    }
}

pub(crate) fn log_softmax_row<T: Element>(x: &[T], out: &mut [T]) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    let lse = m + s.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::ONE / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

