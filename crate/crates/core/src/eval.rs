//! Evaluation probes: perplexity, cloze accuracy, in-batch / full-vocabulary
//! retrieval and embedding cosine similarity of synonym pairs.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_clm_batch, make_mlm_batch, Batch, MaskConfig, Tokenizer, Vocab, MASK, N_SPECIAL};
use crate::error::{bail, HlmError, Result};
use crate::model::{forward_backbone, output_projection, Model};
use crate::objectives::argmax;
use crate::rng;
use crate::tensor::{Element, Tape, Tensor};
use crate::training::{Stage, Task};

const Z95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n_examples: usize,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub checkpoint_digest: String,
}

fn accuracy_report(metric: &str, hits: usize, n: usize) -> EvalReport {
    let p = hits as f64 / n as f64;
    EvalReport {
        metric: metric.to_string(),
        value: p,
        n_examples: n,
        half_width: Z95 * (p * (1.0 - p) / n as f64).sqrt(),
        checkpoint_digest: String::new(),
    }
}

/// Anything that maps token ids to next-token or masked-token logits.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    fn max_len(&self) -> usize;
    fn causal(&self) -> bool;
    /// Logits `[rows.len(), V]` at the given flat rows of an `n × len` batch.
    fn logits(&self, ids: &[u32], n: usize, len: usize, rows: &[usize]) -> Result<Tensor<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// The untied head.
    Head,
    /// `O · e_θᵀ`, the tied embedding transpose.
    Tied,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelScorer<'a, T: Element> {
    pub model: &'a Model<T>,
    pub readout: Readout,
}

impl<'a, T: Element> ModelScorer<'a, T> {
    /// Picks the readout a checkpoint supports. A headless model has no
    /// distribution over tokens unless `naive_readout` asks for `e_θᵀ`.
    pub fn new(model: &'a Model<T>, stage: Stage, naive_readout: bool) -> Result<Self> {
        let readout = if naive_readout {
            Readout::Tied
        } else if model.has_head() {
            Readout::Head
        } else if stage == Stage::PretrainedHeadless {
            bail!(
                Contract,
                "headless checkpoint has no LM head; run finetune-head first or request the naive e_θᵀ readout"
            );
        } else {
            Readout::Tied
        };
        Ok(ModelScorer { model, readout })
    }
}

impl<T: Element> Scorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn causal(&self) -> bool {
        self.model.config.causal
    }

    fn logits(&self, ids: &[u32], n: usize, len: usize, rows: &[usize]) -> Result<Tensor<f64>> {
        let tape = Tape::new();
        let w = self.model.params.map(|_, t| tape.constant(t));
        let o = forward_backbone(&tape, &self.model.config, &w, ids, n, len)?;
        let sel = tape.gather(o, rows)?;
        let proj = match self.readout {
            Readout::Head => output_projection(&w),
            Readout::Tied => w.tok_emb,
        };
        let logits = tape.matmul_nt(sel, proj)?;
        let out = tape.value(logits).cast();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub task: Task,
    pub batch_size: usize,
    pub seq_len: usize,
    pub mask_rate: f64,
    /// Ids below this bound may be corrupted into by MLM masking.
    pub mask_vocab: usize,
    pub seed: u64,
    /// Restrict the softmax to non-special tokens.
    pub exclude_specials: bool,
}

/// Evaluation batches over `tokens`: non-overlapping windows in order, the
/// last partial window dropped. MLM masking uses a fixed per-batch seed.
pub fn eval_batches(tokens: &[u32], opts: &EvalOptions) -> Result<Vec<Batch>> {
    let window = match opts.task {
        Task::Mlm => opts.seq_len,
        Task::Clm => opts.seq_len + 1,
    };
    // CLM windows overlap by one token so every token is predicted once
    let stride = opts.seq_len;
    if tokens.len() < window {
        bail!(Data, "{} evaluation tokens do not fill one window of {window}", tokens.len());
    }
    let starts: Vec<usize> = (0..=tokens.len() - window).step_by(stride).collect();
    let mut out = Vec::new();
    for (b, chunk) in starts.chunks(opts.batch_size).enumerate() {
        let flat: Vec<u32> = chunk.iter().flat_map(|&s| tokens[s..s + window].iter().copied()).collect();
        let batch = match opts.task {
            Task::Mlm => {
                let mc = MaskConfig { mask_rate: opts.mask_rate, vocab_size: opts.mask_vocab };
                let batch = make_mlm_batch(&flat, chunk.len(), opts.seq_len, &mc, rng::derive_seed(opts.seed, "eval", b as u64))?;
                if batch.positions.is_empty() {
                    continue;
                }
                batch
            }
            Task::Clm => make_clm_batch(&flat, chunk.len(), opts.seq_len)?,
        };
        out.push(batch);
    }
    Ok(out)
}

/// Log-probability of `target` under softmax of `row`, optionally over
/// non-special entries only.
fn log_prob(row: &[f64], target: usize, exclude_specials: bool) -> f64 {
    let lo = if exclude_specials { N_SPECIAL as usize } else { 0 };
    let m = row[lo..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row[lo..].iter().map(|&x| (x - m).exp()).sum();
    row[target] - m - z.ln()
}

/// Mean negative log-likelihood per scored token, exponentiated. Special
/// targets are skipped when `exclude_specials` is set.
pub fn perplexity(scorer: &dyn Scorer, tokens: &[u32], opts: &EvalOptions) -> Result<EvalReport> {
    if scorer.causal() != (opts.task == Task::Clm) {
        bail!(Contract, "model and evaluation task disagree on causality");
    }
    let mut nll = Vec::new();
    for batch in eval_batches(tokens, opts)? {
        let keep: Vec<usize> = (0..batch.targets.len())
            .filter(|&i| !(opts.exclude_specials && Vocab::is_special(batch.targets[i])))
            .collect();
        if keep.is_empty() {
            continue;
        }
        let flat = batch.flat_positions();
        let rows: Vec<usize> = keep.iter().map(|&i| flat[i]).collect();
        let logits = scorer.logits(&batch.x_tilde, batch.n, batch.len, &rows)?;
        for (r, &i) in keep.iter().enumerate() {
            nll.push(-log_prob(logits.row(r), batch.targets[i] as usize, opts.exclude_specials));
        }
    }
    if nll.is_empty() {
        bail!(Contract, "no tokens to score");
    }
    let n = nll.len() as f64;
    let mean = nll.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        bail!(Numeric, "non-finite mean negative log-likelihood");
    }
    let var = nll.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let ppl = mean.exp();
    Ok(EvalReport {
        metric: "perplexity".into(),
        value: ppl,
        n_examples: nll.len(),
        half_width: ppl * Z95 * (var / n).sqrt(),
        checkpoint_digest: String::new(),
    })
}

/// Cuts each document into consecutive passages of `len` tokens whose final
/// token is not special.
pub fn cloze_passages(docs: &[Vec<u32>], len: usize) -> Vec<Vec<u32>> {
    docs.iter()
        .flat_map(|d| d.chunks_exact(len))
        .filter(|p| !Vocab::is_special(p[len - 1]))
        .map(|p| p.to_vec())
        .collect()
}

/// Fraction of passages whose final token is the argmax prediction given
/// the rest (ties to the lowest id). Causal scorers read the prediction at
/// the last context position; bidirectional ones at a trailing MASK.
pub fn cloze_accuracy(scorer: &dyn Scorer, passages: &[Vec<u32>], batch_size: usize) -> Result<EvalReport> {
    if passages.is_empty() {
        bail!(Contract, "cloze evaluation needs at least one passage");
    }
    let causal = scorer.causal();
    let mut inputs = Vec::with_capacity(passages.len());
    for p in passages {
        if p.len() < 2 {
            bail!(Contract, "cloze passages need at least two tokens, got {}", p.len());
        }
        let (ctx, answer) = p.split_at(p.len() - 1);
        let mut ids = ctx.to_vec();
        if !causal {
            ids.push(MASK);
        }
        let keep = scorer.max_len();
        if ids.len() > keep {
            ids.drain(..ids.len() - keep);
        }
        inputs.push((ids, answer[0]));
    }
    let mut hits = 0;
    let mut i = 0;
    while i < inputs.len() {
        let len = inputs[i].0.len();
        let mut j = i;
        while j < inputs.len() && j - i < batch_size.max(1) && inputs[j].0.len() == len {
            j += 1;
        }
        let ids: Vec<u32> = inputs[i..j].iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let rows: Vec<usize> = (0..j - i).map(|b| b * len + len - 1).collect();
        let logits = scorer.logits(&ids, j - i, len, &rows)?;
        hits += (i..j).filter(|&k| argmax(logits.row(k - i)) == inputs[k].1 as usize).count();
        i = j;
    }
    Ok(accuracy_report("cloze_accuracy", hits, inputs.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalScope {
    /// Candidates are the targets of the batch's supervised positions.
    InBatch,
    /// Candidates are all rows of `e_θ`.
    FullVocab,
}

impl std::str::FromStr for RetrievalScope {
    type Err = HlmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_batch" => Ok(RetrievalScope::InBatch),
            "full_vocab" => Ok(RetrievalScope::FullVocab),
            _ => Err(HlmError::Config(format!("unknown retrieval scope {s:?} (in_batch, full_vocab)"))),
        }
    }
}

/// Per position: does the own target win among the in-batch targets?
/// `o` holds the K supervised outputs, `e` the embedding table.
pub fn in_batch_hits<T: Element>(o: &Tensor<T>, e: &Tensor<T>, targets: &[u32]) -> Vec<bool> {
    let cand: Vec<&[T]> = targets.iter().map(|&t| e.row(t as usize)).collect();
    (0..targets.len())
        .map(|a| {
            let oa = o.row(a);
            let scores: Vec<f64> =
                cand.iter().map(|c| oa.iter().zip(c.iter()).map(|(x, y)| x.to_f64() * y.to_f64()).sum()).collect();
            targets[argmax(&scores)] == targets[a]
        })
        .collect()
}

/// Retrieval hits for one batch, in supervised-position order.
pub fn retrieval_hits<T: Element>(model: &Model<T>, batch: &Batch, scope: RetrievalScope) -> Result<Vec<bool>> {
    if batch.positions.is_empty() {
        bail!(Contract, "no supervised positions");
    }
    let tape = Tape::new();
    let w = model.params.map(|_, t| tape.constant(t));
    let o = forward_backbone(&tape, &model.config, &w, &batch.x_tilde, batch.n, batch.len)?;
    let sel = tape.gather(o, &batch.flat_positions())?;
    match scope {
        RetrievalScope::InBatch => Ok(in_batch_hits(&tape.value(sel), &model.params.tok_emb, &batch.targets)),
        RetrievalScope::FullVocab => full_vocab_hits(&tape.value(sel), &model.params.tok_emb, &batch.targets),
    }
}

/// Per position: is the own target the argmax of `o · eᵀ` over the whole table?
pub fn full_vocab_hits<T: Element>(o: &Tensor<T>, e: &Tensor<T>, targets: &[u32]) -> Result<Vec<bool>> {
    let tape = Tape::new();
    let logits = tape.matmul_nt(tape.constant(o), tape.constant(e))?;
    let lv = tape.value(logits);
    Ok(targets.iter().enumerate().map(|(r, &t)| argmax(lv.row(r)) == t as usize).collect())
}

pub fn retrieval_accuracy<T: Element>(model: &Model<T>, batches: &[Batch], scope: RetrievalScope) -> Result<EvalReport> {
    let (mut hits, mut n) = (0, 0);
    for b in batches {
        let h = retrieval_hits(model, b, scope)?;
        hits += h.iter().filter(|&&x| x).count();
        n += h.len();
    }
    if n == 0 {
        bail!(Contract, "no supervised positions");
    }
    let name = match scope {
        RetrievalScope::InBatch => "retrieval_in_batch",
        RetrievalScope::FullVocab => "retrieval_full_vocab",
    };
    Ok(accuracy_report(name, hits, n))
}

pub const COSINE_BINS: usize = 40;

/// Vocabulary id pairs to compare, deduplicated and without self-pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynonymPairs {
    pub pairs: Vec<(u32, u32)>,
    /// Lines whose words are not single tokens.
    pub skipped: usize,
}

/// A word's id if it encodes to a single token, preferring the
/// space-prefixed form that occurs mid-sentence.
pub fn word_id(tok: &Tokenizer, word: &str) -> Option<u32> {
    [format!(" {word}"), word.to_string()].iter().find_map(|w| match tok.encode(w).as_slice() {
        [id] if !Vocab::is_special(*id) => Some(*id),
        _ => None,
    })
}

impl SynonymPairs {
    /// Parses `word_a<TAB>word_b` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str, tok: &Tokenizer) -> Result<Self> {
        let mut out = SynonymPairs::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((a, b)) = line.split_once('\t') else {
                bail!(Data, "synonym line {}: expected two tab-separated words", n + 1);
            };
            match (word_id(tok, a.trim()), word_id(tok, b.trim())) {
                (Some(x), Some(y)) if x != y => {
                    if seen.insert((x.min(y), x.max(y))) {
                        out.pairs.push((x, y));
                    }
                }
                _ => out.skipped += 1,
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path, tok: &Tokenizer) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HlmError::Data(format!("cannot read synonym file {}: {e}", path.display())))?;
        Self::parse(&text, tok)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub n_pairs: usize,
    /// Pairs dropped because one embedding row has zero norm.
    pub n_zero_norm: usize,
    /// Counts over 40 equal bins spanning [−1, 1]; 1.0 falls in the last bin.
    pub histogram: Vec<u64>,
    pub cosines: Vec<f64>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn cosine_bin(c: f64) -> usize {
    (((c + 1.0) / 2.0 * COSINE_BINS as f64).floor() as usize).min(COSINE_BINS - 1)
}

/// Cosine similarity between embedding rows of each pair.
pub fn synonym_cosine<T: Element>(e: &Tensor<T>, pairs: &[(u32, u32)]) -> Result<CosineSummary> {
    if pairs.is_empty() {
        bail!(Contract, "synonym probe needs at least one pair");
    }
    let v = e.rows();
    let row = |id: u32| -> Result<Vec<f64>> {
        if id as usize >= v {
            bail!(Index, "token id {id} out of range for {v} embeddings");
        }
        Ok(e.row(id as usize).iter().map(|x| x.to_f64()).collect())
    };
    let mut cosines = Vec::with_capacity(pairs.len());
    let mut histogram = vec![0u64; COSINE_BINS];
    let mut n_zero_norm = 0;
    for &(a, b) in pairs {
        match cosine(&row(a)?, &row(b)?) {
            Some(c) => {
                histogram[cosine_bin(c)] += 1;
                cosines.push(c);
            }
            None => n_zero_norm += 1,
        }
    }
    let mean = if cosines.is_empty() { f64::NAN } else { cosines.iter().sum::<f64>() / cosines.len() as f64 };
    Ok(CosineSummary { mean, n_pairs: cosines.len(), n_zero_norm, histogram, cosines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn cosine_edges() {
        let e = Tensor::new(&[3, 2], vec![0.3f64, -1.7, 2.0, 0.0, 0.0, 5.0]).unwrap();
        let s = synonym_cosine(&e, &[(0, 0), (1, 2)]).unwrap();
        assert_eq!(s.cosines[0], 1.0);
        assert!(s.cosines[1].abs() < 1e-12);
        assert_eq!(s.histogram[COSINE_BINS - 1], 1);
        assert_eq!(s.histogram[20], 1);
        assert_eq!(cosine_bin(-1.0), 0);
    }

    #[test]
    fn zero_rows_are_excluded() {
        let e = Tensor::new(&[2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let s = synonym_cosine(&e, &[(0, 1), (1, 1)]).unwrap();
        assert_eq!((s.n_pairs, s.n_zero_norm), (1, 1));
        assert_eq!(s.histogram.iter().sum::<u64>(), 1);
        assert!(matches!(synonym_cosine(&e, &[]), Err(HlmError::Contract(_))));
    }

    #[test]
    fn headless_without_head_needs_naive_flag() {
        let cfg = ModelConfig { vocab_size: 8, d_model: 4, max_len: 4, n_layers: 1, n_heads: 1, d_ff: 8, ..Default::default() };
        let m = Model::<f64>::init(cfg, 0).unwrap();
        let err = ModelScorer::new(&m, Stage::PretrainedHeadless, false).unwrap_err();
        assert!(err.to_string().contains("finetune-head"));
        assert_eq!(ModelScorer::new(&m, Stage::PretrainedHeadless, true).unwrap().readout, Readout::Tied);
        assert_eq!(ModelScorer::new(&m, Stage::PretrainedVanilla, false).unwrap().readout, Readout::Tied);
    }

    #[test]
    fn clm_windows_predict_each_token_once() {
        let tokens: Vec<u32> = (0..41).collect();
        let opts = EvalOptions {
            task: Task::Clm,
            batch_size: 3,
            seq_len: 8,
            mask_rate: 0.15,
            mask_vocab: 50,
            seed: 0,
            exclude_specials: false,
        };
        let batches = eval_batches(&tokens, &opts).unwrap();
        let targets: Vec<u32> = batches.iter().flat_map(|b| b.targets.iter().copied()).collect();
        assert_eq!(targets, (1..41).collect::<Vec<u32>>());
    }
}
