//! Weight-tied cross-entropy, contrastive weight tying (CWT) and balanced
//! cross-entropy.
//!
//! CWT scores each supervised output `o_a` against the embeddings of every
//! target in the batch, `M[a][b] = o_a · e(target_b)`, and applies
//! `−log softmax(M[a])[a]`, averaged over the K supervised positions. The
//! score matrix is K×K; no V-wide buffer is ever allocated.

use crate::data::Batch;
use crate::error::{bail, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub value: f64,
    pub n_supervised: usize,
    /// Fraction of positions whose own target scores highest among the
    /// candidates (in-batch targets for CWT, the vocabulary for CE).
    pub aux_accuracy: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn finish<T: Element>(tape: &Tape<T>, loss: Var, n_supervised: usize, correct: usize) -> Result<LossOutput> {
    let value = tape.value(loss).item()?.to_f64();
    Ok(LossOutput { loss, value, n_supervised, aux_accuracy: correct as f64 / n_supervised as f64 })
}

fn check_supervised(batch: &Batch) -> Result<()> {
    if batch.positions.is_empty() {
        bail!(Contract, "no supervised positions");
    }
    if batch.targets.len() != batch.positions.len() {
        bail!(Contract, "{} targets for {} supervised positions", batch.targets.len(), batch.positions.len());
    }
    Ok(())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits` `[K, C]`.
pub fn cross_entropy<T: Element>(tape: &Tape<T>, logits: Var, targets: &[usize]) -> Result<LossOutput> {
    let k = targets.len();
    if k == 0 {
        bail!(Contract, "no supervised positions");
    }
    let ls = tape.log_softmax(logits)?;
    let w = vec![T::ONE / T::from_usize(k); k];
    let loss = tape.weighted_nll(ls, targets, &w)?;
    let correct = {
        let lv = tape.value(logits);
        (0..k).filter(|&r| argmax(lv.row(r)) == targets[r]).count()
    };
    finish(tape, loss, k, correct)
}

/// Cross-entropy on precomputed vocabulary logits `[n·len, V]` at the positions of S.
pub fn ce_weight_tying_loss<T: Element>(tape: &Tape<T>, logits: Var, batch: &Batch) -> Result<LossOutput> {
    check_supervised(batch)?;
    let sel = tape.gather(logits, &batch.flat_positions())?;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    cross_entropy(tape, sel, &targets)
}

/// Weight-tied cross-entropy from backbone outputs: logits are computed only
/// for the K supervised rows, `O_S · Pᵀ` (`[K, V]`).
pub fn ce_tied_from_outputs<T: Element>(tape: &Tape<T>, o: Var, proj: Var, batch: &Batch) -> Result<LossOutput> {
    check_supervised(batch)?;
    let sel = tape.gather(o, &batch.flat_positions())?;
    let logits = tape.matmul_nt(sel, proj)?;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    cross_entropy(tape, logits, &targets)
}

/// Contrastive weight tying over the supervised set of `batch`.
///
/// `o` is the backbone output `[n·len, D]`, `e` the embedding table `[V, D]`.
/// Duplicate targets stay distinct columns; only the diagonal counts as positive.
pub fn cwt_loss<T: Element>(tape: &Tape<T>, o: Var, e: Var, batch: &Batch) -> Result<LossOutput> {
    check_supervised(batch)?;
    let rows = batch.flat_positions();
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    cwt_loss_rows(tape, o, &rows, e, &targets)
}

/// [`cwt_loss`] with explicit output rows and target ids.
pub fn cwt_loss_rows<T: Element>(tape: &Tape<T>, o: Var, rows: &[usize], e: Var, targets: &[usize]) -> Result<LossOutput> {
    let k = rows.len();
    if k == 0 {
        bail!(Contract, "no supervised positions");
    }
    if targets.len() != k {
        bail!(Contract, "{} targets for {k} supervised positions", targets.len());
    }
    let scores = tape.gather_dot(o, rows, e, targets)?;
    let ls = tape.log_softmax(scores)?;
    let diag: Vec<usize> = (0..k).collect();
    let w = vec![T::ONE / T::from_usize(k); k];
    let loss = tape.weighted_nll(ls, &diag, &w)?;
    let correct = {
        let sv = tape.value(scores);
        (0..k).filter(|&a| targets[argmax(sv.row(a))] == targets[a]).count()
    };
    finish(tape, loss, k, correct)
}

/// The log-free expression `−(1/K) Σ_a softmax(M[a])[a]`, for comparison
/// only (its minimum is −1, not 0). Not differentiable through the tape.
pub fn cwt_loss_literal<T: Element>(o: &Tensor<T>, rows: &[usize], e: &Tensor<T>, targets: &[usize]) -> Result<f64> {
    let k = rows.len();
    if k == 0 || targets.len() != k {
        bail!(Contract, "no supervised positions");
    }
    let tape = Tape::new();
    let scores = tape.gather_dot(tape.constant(o), rows, tape.constant(e), targets)?;
    let ls = tape.log_softmax(scores)?;
    let lv = tape.value(ls);
    Ok(-(0..k).map(|a| lv.row(a)[a].to_f64().exp()).sum::<f64>() / k as f64)
}

/// Class-balanced cross-entropy `Σ_c L_c / w_c`, where `L_c` sums the
/// per-sample losses of class `c` and `w_c = count_c / n`. Absent classes
/// contribute nothing. The value scales with the batch size.
pub fn balanced_ce_loss<T: Element>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<LossOutput> {
    let n = labels.len();
    if n == 0 {
        bail!(Contract, "balanced cross-entropy needs at least one sample");
    }
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != n {
        bail!(Shape, "logits {:?} do not match {n} labels", shape);
    }
    let c = shape[1];
    let mut counts = vec![0usize; c];
    for &y in labels {
        if y >= c {
            bail!(Index, "label {y} out of range for {c} classes");
        }
        counts[y] += 1;
    }
    let w: Vec<T> = labels.iter().map(|&y| T::from_usize(n) / T::from_usize(counts[y])).collect();
    let ls = tape.log_softmax(logits)?;
    let loss = tape.weighted_nll(ls, labels, &w)?;
    let correct = {
        let lv = tape.value(logits);
        (0..n).filter(|&r| argmax(lv.row(r)) == labels[r]).count()
    };
    finish(tape, loss, n, correct)
}
