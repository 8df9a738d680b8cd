use hlm_core::data::{make_mlm_batch, MaskConfig, MASK};
use hlm_core::eval::*;
use hlm_core::model::{forward_backbone, tied_logits, Model, ModelConfig};
use hlm_core::objectives::argmax;
use hlm_core::tensor::{Tape, Tensor};
use hlm_core::training::{Stage, Task};
use hlm_core::HlmError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(vocab: usize, causal: bool) -> ModelConfig {
    ModelConfig { vocab_size: vocab, d_model: 16, max_len: 8, n_layers: 2, n_heads: 2, d_ff: 32, causal, ..Default::default() }
}

fn opts(task: Task, vocab: usize, exclude_specials: bool) -> EvalOptions {
    EvalOptions { task, batch_size: 3, seq_len: 8, mask_rate: 0.3, mask_vocab: vocab, seed: 11, exclude_specials }
}

fn random_tokens(n: usize, lo: u32, hi: u32, seed: u64) -> Vec<u32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

#[test]
fn single_real_token_gives_perplexity_one() {
    for task in [Task::Clm, Task::Mlm] {
        let m = Model::<f64>::init(cfg(5, task == Task::Clm), 1).unwrap();
        let s = ModelScorer::new(&m, Stage::PretrainedVanilla, false).unwrap();
        let tokens = vec![4u32; 100];
        let r = perplexity(&s, &tokens, &opts(task, 5, true)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12, "{}", r.value);
    }
}

#[test]
fn zero_logits_give_perplexity_v() {
    let mut m = Model::<f64>::init(cfg(40, true), 2).unwrap();
    m.add_head().unwrap();
    m.params.head.as_mut().unwrap().data_mut().fill(0.0);
    let s = ModelScorer::new(&m, Stage::HeadRecovered, false).unwrap();
    assert_eq!(s.readout, Readout::Head);
    let tokens = random_tokens(200, 4, 40, 3);
    let full = perplexity(&s, &tokens, &opts(Task::Clm, 40, false)).unwrap();
    assert!((full.value - 40.0).abs() < 1e-6, "{}", full.value);
    let real = perplexity(&s, &tokens, &opts(Task::Clm, 40, true)).unwrap();
    assert!((real.value - 36.0).abs() < 1e-6, "{}", real.value);
}

/// exp(mean NLL) from full-sequence logits and an explicit per-token loop.
fn loop_perplexity(m: &Model<f64>, tokens: &[u32], o: &EvalOptions) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in eval_batches(tokens, o).unwrap() {
        let tape = Tape::new();
        let w = m.bind(&tape);
        let out = forward_backbone(&tape, &m.config, &w, &batch.x_tilde, batch.n, batch.len).unwrap();
        let logits = tied_logits(&tape, &w, out).unwrap();
        let lv = tape.value(logits);
        for (i, &(seq, pos)) in batch.positions.iter().enumerate() {
            let row = lv.row(seq * batch.len + pos);
            let mut z = 0.0;
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            for &x in row {
                z += (x - mx).exp();
            }
            total += -(row[batch.targets[i] as usize] - mx - z.ln());
            count += 1;
        }
    }
    (total / count as f64).exp()
}

#[test]
fn perplexity_matches_per_token_loop() {
    for (task, seed) in [(Task::Clm, 4), (Task::Mlm, 5)] {
        let m = Model::<f64>::init(ModelConfig { init_std: 0.5, ..cfg(30, task == Task::Clm) }, seed).unwrap();
        let s = ModelScorer::new(&m, Stage::PretrainedVanilla, false).unwrap();
        let tokens = random_tokens(300, 4, 30, seed);
        let o = opts(task, 30, false);
        let got = perplexity(&s, &tokens, &o).unwrap();
        let want = loop_perplexity(&m, &tokens, &o);
        assert!(((got.value - want) / want).abs() < 1e-10, "{} vs {want}", got.value);
        assert!(got.half_width > 0.0 && got.n_examples > 0);
    }
}

#[test]
fn causality_mismatch_is_rejected() {
    let m = Model::<f64>::init(cfg(10, false), 0).unwrap();
    let s = ModelScorer::new(&m, Stage::PretrainedVanilla, false).unwrap();
    let err = perplexity(&s, &random_tokens(50, 4, 10, 0), &opts(Task::Clm, 10, false)).unwrap_err();
    assert!(matches!(err, HlmError::Contract(_)));
}

/// Puts all mass on `answer(first token of the row's sequence)`.
struct Oracle {
    v: usize,
    causal: bool,
}

fn answer(first: u32, v: usize) -> u32 {
    4 + (first * 7) % (v as u32 - 4)
}

impl Scorer for Oracle {
    fn vocab_size(&self) -> usize {
        self.v
    }
    fn max_len(&self) -> usize {
        16
    }
    fn causal(&self) -> bool {
        self.causal
    }
    fn logits(&self, ids: &[u32], _n: usize, len: usize, rows: &[usize]) -> hlm_core::Result<Tensor<f64>> {
        let mut t = Tensor::zeros(&[rows.len(), self.v])?;
        for (i, &r) in rows.iter().enumerate() {
            let a = answer(ids[r / len * len], self.v) as usize;
            t.data_mut()[i * self.v + a] = 1.0;
        }
        Ok(t)
    }
}

/// Pseudo-random logits that depend on the input ids only.
struct RandomLogits {
    v: usize,
}

impl Scorer for RandomLogits {
    fn vocab_size(&self) -> usize {
        self.v
    }
    fn max_len(&self) -> usize {
        16
    }
    fn causal(&self) -> bool {
        true
    }
    fn logits(&self, ids: &[u32], _n: usize, len: usize, rows: &[usize]) -> hlm_core::Result<Tensor<f64>> {
        let mut data = Vec::new();
        for &r in rows {
            let key = ids[r / len * len..r + 1].iter().fold(1469598103934665603u64, |h, &x| (h ^ x as u64).wrapping_mul(1099511628211));
            let mut g = ChaCha8Rng::seed_from_u64(key);
            data.extend((0..self.v).map(|_| g.gen::<f64>()));
        }
        Tensor::new(&[rows.len(), self.v], data)
    }
}

#[test]
fn cloze_oracle_is_perfect() {
    let v = 20;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let passages: Vec<Vec<u32>> = (0..50)
        .map(|i| {
            let len = 2 + i % 6;
            let mut p: Vec<u32> = (0..len - 1).map(|_| r.gen_range(4..v as u32)).collect();
            p.push(answer(p[0], v));
            p
        })
        .collect();
    for causal in [true, false] {
        let rep = cloze_accuracy(&Oracle { v, causal }, &passages, 4).unwrap();
        assert_eq!(rep.value, 1.0);
        assert_eq!(rep.n_examples, 50);
    }
}

#[test]
fn cloze_random_scorer_sits_at_chance() {
    let v = 10usize;
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let passages: Vec<Vec<u32>> = (0..10_000).map(|_| (0..6).map(|_| r.gen_range(0..v as u32)).collect()).collect();
    let s = RandomLogits { v };
    let a = cloze_accuracy(&s, &passages, 64).unwrap();
    let p = 1.0 / v as f64;
    let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
    assert!((a.value - p).abs() < 3.0 * sigma, "{} vs {p} ± {}", a.value, 3.0 * sigma);
    let b = cloze_accuracy(&s, &passages, 7).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cloze_rejects_bad_input() {
    let s = RandomLogits { v: 5 };
    assert!(matches!(cloze_accuracy(&s, &[], 4), Err(HlmError::Contract(_))));
    assert!(matches!(cloze_accuracy(&s, &[vec![1]], 4), Err(HlmError::Contract(_))));
}

#[test]
fn cloze_passages_skip_special_answers() {
    let docs = vec![vec![5, 6, 7, 8, 9, 1, 4], vec![3, 9], vec![4, 2]];
    assert_eq!(cloze_passages(&docs, 2), vec![vec![5, 6], vec![7, 8], vec![3, 9]]);
}

#[test]
fn masked_cloze_feeds_a_trailing_mask() {
    struct Spy;
    impl Scorer for Spy {
        fn vocab_size(&self) -> usize {
            8
        }
        fn max_len(&self) -> usize {
            4
        }
        fn causal(&self) -> bool {
            false
        }
        fn logits(&self, ids: &[u32], n: usize, len: usize, rows: &[usize]) -> hlm_core::Result<Tensor<f64>> {
            assert_eq!((n, len), (1, 4));
            assert_eq!(ids, &[5, 6, 7, MASK]);
            assert_eq!(rows, &[3]);
            Tensor::zeros(&[1, 8])
        }
    }
    let r = cloze_accuracy(&Spy, &[vec![4, 5, 6, 7, 0]], 1).unwrap();
    assert_eq!(r.value, 1.0);
}

#[test]
fn orthogonal_construction_retrieves_everything() {
    let v = 12;
    let e = Tensor::from_fn(&[v, v], |i| if i / v == i % v { 1.0f64 } else { 0.0 }).unwrap();
    let targets: Vec<u32> = vec![3, 7, 7, 0, 11, 5];
    let o = Tensor::from_fn(&[targets.len(), v], |i| if targets[i / v] as usize == i % v { 2.5 } else { 0.0 }).unwrap();
    assert!(in_batch_hits(&o, &e, &targets).into_iter().all(|h| h));
    assert!(full_vocab_hits(&o, &e, &targets).unwrap().into_iter().all(|h| h));
}

#[test]
fn in_batch_matches_double_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (k, d, v) = (r.gen_range(1..24), r.gen_range(1..10), r.gen_range(2..30));
        let o = Tensor::from_fn(&[k, d], |_| r.gen_range(-1.0..1.0f64)).unwrap();
        let e = Tensor::from_fn(&[v, d], |_| r.gen_range(-1.0..1.0f64)).unwrap();
        let targets: Vec<u32> = (0..k).map(|_| r.gen_range(0..v as u32)).collect();
        let mut want = Vec::new();
        for a in 0..k {
            let mut best = (f64::NEG_INFINITY, 0);
            for b in 0..k {
                let mut s = 0.0;
                for j in 0..d {
                    s += o.row(a)[j] * e.row(targets[b] as usize)[j];
                }
                if s > best.0 {
                    best = (s, b);
                }
            }
            want.push(targets[best.1] == targets[a]);
        }
        assert_eq!(in_batch_hits(&o, &e, &targets), want);
    }
}

#[test]
fn full_vocab_retrieval_agrees_with_tied_argmax() {
    let m = Model::<f32>::init(ModelConfig { init_std: 0.3, ..cfg(50, false) }, 13).unwrap();
    let tokens = random_tokens(8 * 6, 4, 50, 14);
    let batch = make_mlm_batch(&tokens, 6, 8, &MaskConfig { mask_rate: 0.4, vocab_size: 50 }, 15).unwrap();
    let hits = retrieval_hits(&m, &batch, RetrievalScope::FullVocab).unwrap();
    let tape = Tape::new();
    let w = m.bind(&tape);
    let out = forward_backbone(&tape, &m.config, &w, &batch.x_tilde, batch.n, batch.len).unwrap();
    let logits = tied_logits(&tape, &w, tape.gather(out, &batch.flat_positions()).unwrap()).unwrap();
    let lv = tape.value(logits);
    let want: Vec<bool> = batch.targets.iter().enumerate().map(|(r, &t)| argmax(lv.row(r)) == t as usize).collect();
    assert_eq!(hits, want);
    let rep = retrieval_accuracy(&m, &[batch.clone()], RetrievalScope::InBatch).unwrap();
    assert_eq!(rep.n_examples, batch.targets.len());
    let again = retrieval_accuracy(&m, &[batch], RetrievalScope::InBatch).unwrap();
    assert_eq!(rep, again);
}

#[test]
fn synonym_mean_matches_per_pair_loop() {
    let mut r = ChaCha8Rng::seed_from_u64(16);
    let (v, d) = (60, 9);
    let e = Tensor::from_fn(&[v, d], |_| r.gen_range(-1.0..1.0f64)).unwrap();
    let pairs: Vec<(u32, u32)> = (0..200).map(|_| (r.gen_range(0..v as u32), r.gen_range(0..v as u32))).collect();
    let s = synonym_cosine(&e, &pairs).unwrap();
    let mut sum = 0.0;
    for &(a, b) in &pairs {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for j in 0..d {
            let (x, y) = (e.row(a as usize)[j], e.row(b as usize)[j]);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        sum += dot / (na.sqrt() * nb.sqrt());
    }
    assert!((s.mean - sum / pairs.len() as f64).abs() < 1e-12);
    assert_eq!(s.histogram.iter().sum::<u64>() as usize, s.n_pairs);
    assert!(s.cosines.iter().all(|c| (-1.0..=1.0).contains(c)));
}

#[test]
fn synonym_file_parsing() {
    let docs = ["the cat sat on the mat with the big dog and the large dog ".repeat(20)];
    let tok = hlm_core::data::train_bpe(docs.iter().map(|d| d.as_bytes()), 50).unwrap();
    let text = "# comment\nbig\tlarge\nlarge\tbig\ncat\tcat\nzebra\tquagga\n\n";
    let p = SynonymPairs::parse(text, &tok).unwrap();
    assert_eq!(p.pairs.len(), 1);
    assert_eq!(p.skipped, 2);
    assert!(matches!(SynonymPairs::parse("one column\n", &tok), Err(HlmError::Data(_))));
}
