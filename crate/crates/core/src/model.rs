//! Pre-LN transformer backbone with learned absolute positions and a
//! weight-tied (or, after head recovery, untied) vocabulary projection.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::N_SPECIAL;
use crate::error::{bail, Result};
use crate::rng;
use crate::tensor::{AttentionSpec, Element, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub causal: bool,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Apply a layer norm to the backbone output.
    pub final_ln: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2000,
            d_model: 128,
            max_len: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            causal: false,
            init_std: 0.02,
            ln_eps: 1e-5,
            final_ln: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("max_len", self.max_len),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in dims {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if self.d_model % self.n_heads != 0 {
            bail!(Config, "d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.vocab_size <= N_SPECIAL as usize {
            bail!(Config, "vocab_size {} must exceed the {N_SPECIAL} special tokens", self.vocab_size);
        }
        if !(self.init_std > 0.0) || !(self.ln_eps > 0.0) {
            bail!(Config, "init_std and ln_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<W> {
    pub ln1_g: W,
    pub ln1_b: W,
    pub wq: W,
    pub bq: W,
    pub wk: W,
    pub wv: W,
    pub bv: W,
    pub wo: W,
    pub bo: W,
    pub ln2_g: W,
    pub ln2_b: W,
    pub w1: W,
    pub b1: W,
    pub w2: W,
    pub b2: W,
}

impl<W> Layer<W> {
    const NAMES: [&'static str; 15] = [
        "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    ];

    fn fields(&self) -> [&W; 15] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut W; 15] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk, &mut self.wv,
            &mut self.bv, &mut self.wo, &mut self.bo, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2,
        ]
    }

    fn build(mut f: impl FnMut(&'static str) -> Result<W>) -> Result<Self> {
        let mut it = Self::NAMES.into_iter();
        let mut next = || f(it.next().unwrap());
        Ok(Layer {
            ln1_g: next()?,
            ln1_b: next()?,
            wq: next()?,
            bq: next()?,
            wk: next()?,
            wv: next()?,
            bv: next()?,
            wo: next()?,
            bo: next()?,
            ln2_g: next()?,
            ln2_b: next()?,
            w1: next()?,
            b1: next()?,
            w2: next()?,
            b2: next()?,
        })
    }
}

/// Every parameter of the model, generic over what is stored per entry
/// (tensors, tape handles, optimizer moments, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<W> {
    pub tok_emb: W,
    pub pos_emb: W,
    pub layers: Vec<Layer<W>>,
    pub final_ln: Option<(W, W)>,
    pub head: Option<W>,
}

impl<W> Weights<W> {
    /// `(name, entry)` in the canonical order used by checkpoints and the optimizer.
    pub fn entries(&self) -> Vec<(String, &W)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, w) in Layer::<W>::NAMES.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{n}"), w));
            }
        }
        if let Some((g, b)) = &self.final_ln {
            out.push(("final_ln.gamma".to_string(), g));
            out.push(("final_ln.beta".to_string(), b));
        }
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Mutable entries in the same order as [`Weights::entries`].
    pub fn entries_mut(&mut self) -> Vec<&mut W> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        if let Some((g, b)) = &mut self.final_ln {
            out.push(g);
            out.push(b);
        }
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    /// Builds a structure with the given layout, calling `f` with each canonical name in order.
    pub fn build(
        n_layers: usize,
        final_ln: bool,
        head: bool,
        mut f: impl FnMut(&str) -> Result<W>,
    ) -> Result<Self> {
        let tok_emb = f("tok_emb")?;
        let pos_emb = f("pos_emb")?;
        let layers = (0..n_layers)
            .map(|i| Layer::build(|n| f(&format!("layers.{i}.{n}"))))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = if final_ln { Some((f("final_ln.gamma")?, f("final_ln.beta")?)) } else { None };
        let head = if head { Some(f("head")?) } else { None };
        Ok(Weights { tok_emb, pos_emb, layers, final_ln, head })
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &W) -> Result<U>) -> Result<Weights<U>> {
        let entries = self.entries();
        let mut it = entries.iter();
        Weights::build(self.layers.len(), self.final_ln.is_some(), self.head.is_some(), |name| {
            let (n, w) = it.next().unwrap();
            debug_assert_eq!(n, name);
            f(name, w)
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &W) -> U) -> Weights<U> {
        self.try_map(|n, w| Ok(f(n, w))).unwrap()
    }

    pub fn len(&self) -> usize {
        self.entries().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Expected shape of a named parameter.
pub fn param_shape(cfg: &ModelConfig, name: &str) -> Vec<usize> {
    let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let leaf = name.rsplit_once('.').map_or(name, |(_, l)| l);
    match (name, leaf) {
        ("tok_emb", _) | ("head", _) => vec![v, d],
        ("pos_emb", _) => vec![cfg.max_len, d],
        (_, "wq" | "wk" | "wv" | "wo") => vec![d, d],
        (_, "w1") => vec![d, f],
        (_, "w2") => vec![f, d],
        (_, "b1") => vec![f],
        _ => vec![d],
    }
}

/// Layer-norm gains start at one, other vectors at zero, matrices random.
fn init_kind(name: &str) -> InitKind {
    if name.ends_with(".gamma") {
        InitKind::Ones
    } else if matches!(name, "tok_emb" | "pos_emb" | "head") || name.rsplit('.').next().is_some_and(|l| l.starts_with('w')) {
        InitKind::Normal
    } else {
        InitKind::Zeros
    }
}

enum InitKind {
    Zeros,
    Ones,
    Normal,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: Weights<Tensor<T>>,
}

impl<T: Element> Model<T> {
    /// Matrices ~ N(0, init_std²) from a per-parameter named stream; biases
    /// and betas zero; gammas one. No head.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std).map_err(|e| crate::HlmError::Config(e.to_string()))?;
        let params = Weights::build(config.n_layers, config.final_ln, false, |name| {
            let shape = param_shape(&config, name);
            match init_kind(name) {
                InitKind::Zeros => Tensor::zeros(&shape),
                InitKind::Ones => Tensor::full(&shape, T::ONE),
                InitKind::Normal => {
                    let mut r = rng::stream(seed, &format!("init.{name}"), 0);
                    Tensor::from_fn(&shape, |_| T::from_f64(normal.sample(&mut r)))
                }
            }
        })?;
        Ok(Model { config, params })
    }

    /// Checks that every tensor has the shape the config implies.
    pub fn from_params(config: ModelConfig, params: Weights<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        if params.layers.len() != config.n_layers || params.final_ln.is_some() != config.final_ln {
            bail!(Shape, "parameter layout does not match model config");
        }
        for (name, t) in params.entries() {
            let want = param_shape(&config, &name);
            if t.shape() != want.as_slice() {
                bail!(Shape, "{name}: expected {:?}, got {:?}", want, t.shape());
            }
        }
        Ok(Model { config, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn has_head(&self) -> bool {
        self.params.head.is_some()
    }

    /// Adds an untied head initialised as a copy of the token embeddings.
    pub fn add_head(&mut self) -> Result<()> {
        if self.has_head() {
            bail!(Contract, "model already has an untied head");
        }
        self.params.head = Some(Tensor::new(self.params.tok_emb.shape(), self.params.tok_emb.to_vec())?);
        Ok(())
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Weights<Var> {
        self.params.map(|_, t| tape.param(t))
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.map(|_, t| t.cast()) }
    }
}

/// Backbone output `O` as a `[n·len, d_model]` matrix (row `i·len + j` is
/// sequence `i`, position `j`).
pub fn forward_backbone<T: Element>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    ids: &[u32],
    n: usize,
    len: usize,
) -> Result<Var> {
    if len > cfg.max_len {
        bail!(Shape, "sequence length {len} exceeds max_len {}", cfg.max_len);
    }
    if n == 0 || len == 0 || ids.len() != n * len {
        bail!(Shape, "expected {n}x{len} token ids, got {}", ids.len());
    }
    let tok: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let pos: Vec<usize> = (0..n * len).map(|r| r % len).collect();
    let mut x = tape.add(tape.gather(w.tok_emb, &tok)?, tape.gather(w.pos_emb, &pos)?)?;
    let spec = AttentionSpec { n_seq: n, seq_len: len, n_heads: cfg.n_heads, causal: cfg.causal };
    let eps = cfg.ln_eps;
    for l in &w.layers {
        let h = tape.layer_norm(x, l.ln1_g, l.ln1_b, eps)?;
        let q = tape.add_row(tape.matmul(h, l.wq)?, l.bq)?;
        let k = tape.matmul(h, l.wk)?;
        let v = tape.add_row(tape.matmul(h, l.wv)?, l.bv)?;
        let a = tape.attention(q, k, v, spec)?;
        x = tape.add(x, tape.add_row(tape.matmul(a, l.wo)?, l.bo)?)?;
        let h = tape.layer_norm(x, l.ln2_g, l.ln2_b, eps)?;
        let m = tape.gelu(tape.add_row(tape.matmul(h, l.w1)?, l.b1)?)?;
        x = tape.add(x, tape.add_row(tape.matmul(m, l.w2)?, l.b2)?)?;
    }
    if let Some((g, b)) = w.final_ln {
        x = tape.layer_norm(x, g, b, eps)?;
    }
    Ok(x)
}

/// The vocabulary projection: the untied head when present, else `e_θ`.
pub fn output_projection(w: &Weights<Var>) -> Var {
    w.head.unwrap_or(w.tok_emb)
}

/// `O · Pᵀ` over all rows of `o`, with `P` from [`output_projection`].
pub fn tied_logits<T: Element>(tape: &Tape<T>, w: &Weights<Var>, o: Var) -> Result<Var> {
    tape.matmul_nt(o, output_projection(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { vocab_size: 30, d_model: 16, max_len: 8, n_layers: 2, n_heads: 2, d_ff: 24, ..Default::default() }
    }

    fn run(model: &Model<f64>, ids: &[u32], n: usize, len: usize) -> Tensor<f64> {
        let tape = Tape::new();
        let w = model.bind(&tape);
        let o = forward_backbone(&tape, &model.config, &w, ids, n, len).unwrap();
        let out = tape.value(o).clone();
        out
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = small();
        let a = Model::<f32>::init(cfg.clone(), 7).unwrap();
        assert_eq!(a.params.tok_emb.shape(), &[30, 16]);
        assert_eq!(a.params.pos_emb.shape(), &[8, 16]);
        let b = Model::<f32>::init(cfg.clone(), 7).unwrap();
        for ((_, x), (_, y)) in a.params.entries().into_iter().zip(b.params.entries()) {
            assert!(x.bitwise_eq(y));
        }
        let c = Model::<f32>::init(cfg, 8).unwrap();
        assert!(!a.params.tok_emb.bitwise_eq(&c.params.tok_emb));
        let l = &a.params.layers[0];
        assert!(l.ln1_g.data().iter().all(|&x| x == 1.0));
        assert!(l.bq.data().iter().all(|&x| x == 0.0));
        assert!(l.w1.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn embedding_std_matches_init_std() {
        let cfg = ModelConfig { vocab_size: 1000, d_model: 128, ..small() };
        let m = Model::<f64>::init(cfg, 1).unwrap();
        let d = m.params.tok_emb.data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // sample std of a normal has standard error sigma / sqrt(2(n-1))
        let se = 0.02 / (2.0 * (n - 1.0)).sqrt();
        assert!((std - 0.02).abs() < 3.0 * se, "std {std}");
    }

    #[test]
    fn names_and_shapes_are_consistent() {
        let m = Model::<f32>::init(small(), 0).unwrap();
        let names: Vec<String> = m.params.entries().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 2 + 2 * 15 + 2);
        assert_eq!(names[2], "layers.0.ln1.gamma");
        assert!(Model::from_params(m.config.clone(), m.params.clone()).is_ok());
        let mut bad = m.params.clone();
        bad.layers[1].w2 = Tensor::zeros(&[3, 3]).unwrap();
        assert!(matches!(Model::from_params(m.config.clone(), bad), Err(crate::HlmError::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..small() }.validate().is_err());
        assert!(ModelConfig { vocab_size: 4, ..small() }.validate().is_err());
        assert!(ModelConfig { d_ff: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn output_shape_and_length_check() {
        let m = Model::<f64>::init(small(), 0).unwrap();
        let ids: Vec<u32> = (0..24).map(|i| 4 + i % 20).collect();
        assert_eq!(run(&m, &ids, 3, 8).shape(), &[24, 16]);
        let tape = Tape::new();
        let w = m.bind(&tape);
        let long: Vec<u32> = vec![5; 9];
        assert!(matches!(forward_backbone(&tape, &m.config, &w, &long, 1, 9), Err(crate::HlmError::Shape(_))));
        assert!(matches!(forward_backbone(&tape, &m.config, &w, &[99], 1, 1), Err(crate::HlmError::Index(_))));
    }

    #[test]
    fn causal_prefix_is_bitwise_invariant() {
        let m = Model::<f64>::init(ModelConfig { causal: true, init_std: 0.3, ..small() }, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<u32> = (0..16).map(|_| rng.gen_range(4..30)).collect();
        let base = run(&m, &ids, 2, 8);
        for k in 0..7 {
            let mut p = ids.clone();
            for j in k + 1..8 {
                p[8 + j] = 4 + (p[8 + j] + 3) % 26;
            }
            let out = run(&m, &p, 2, 8);
            for j in 0..=k {
                assert_eq!(base.row(8 + j), out.row(8 + j));
            }
            assert_ne!(base.row(15), out.row(15));
            for r in 0..8 {
                assert_eq!(base.row(r), out.row(r));
            }
        }
    }

    #[test]
    fn bidirectional_sees_other_positions() {
        let m = Model::<f64>::init(ModelConfig { init_std: 0.3, ..small() }, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<u32> = (0..8).map(|_| rng.gen_range(4..30)).collect();
        let base = run(&m, &ids, 1, 8);
        let mut p = ids.clone();
        p[5] = 4 + (p[5] + 1) % 26;
        let out = run(&m, &p, 1, 8);
        assert!((0..8).filter(|&j| j != 5).any(|j| base.row(j) != out.row(j)));
    }

    #[test]
    fn tied_logits_match_per_row_dot_products() {
        let m = Model::<f64>::init(ModelConfig { init_std: 0.3, ..small() }, 5).unwrap();
        let ids: Vec<u32> = (0..8).map(|i| 4 + i * 3).collect();
        let tape = Tape::new();
        let w = m.bind(&tape);
        let o = forward_backbone(&tape, &m.config, &w, &ids, 1, 8).unwrap();
        let logits = tied_logits(&tape, &w, o).unwrap();
        let (ov, lv) = (tape.value(o), tape.value(logits));
        assert_eq!(lv.shape(), &[8, 30]);
        let e = &m.params.tok_emb;
        let mut diff = 0.0f64;
        for r in 0..8 {
            for v in 0..30 {
                let dot: f64 = ov.row(r).iter().zip(e.row(v)).map(|(a, b)| a * b).sum();
                diff = diff.max((dot - lv.row(r)[v]).abs());
            }
        }
        assert!(diff < 1e-10);
    }

    #[test]
    fn orthogonal_embeddings_recover_token() {
        let d = 16;
        let e = Tensor::<f64>::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }).unwrap();
        let tape = Tape::new();
        let ev = tape.param(&e);
        for v in 0..d {
            let o = Tensor::from_fn(&[1, d], |j| if j == v { 3.0 } else { 0.0 }).unwrap();
            let logits = tape.matmul_nt(tape.constant(&o), ev).unwrap();
            let lv = tape.value(logits);
            let arg = (0..d).max_by(|&a, &b| lv.data()[a].total_cmp(&lv.data()[b])).unwrap();
            assert_eq!(arg, v);
        }
    }

    #[test]
    fn new_head_starts_equal_to_embeddings() {
        let mut m = Model::<f32>::init(small(), 2).unwrap();
        m.add_head().unwrap();
        assert!(m.params.head.as_ref().unwrap().bitwise_eq(&m.params.tok_emb));
        assert!(m.add_head().is_err());
        assert_eq!(m.params.entries().last().unwrap().0, "head");
    }
}
