//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are errors.
//! Relative paths in a config file resolve against the file's directory.

use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{bail, HlmError, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    VanillaCe,
    HeadlessCwt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Mlm,
    Clm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Triangular,
    Cosine,
    Constant,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($ty::$variant),)*
                    _ => Err(format!("expected one of {}", [$($text),*].join(", "))),
                }
            }
        }
        impl Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $text,)* })
            }
        }
    };
}

keyword_enum!(Objective { VanillaCe => "vanilla_ce", HeadlessCwt => "headless_cwt" });
keyword_enum!(Task { Mlm => "mlm", Clm => "clm" });
keyword_enum!(Schedule { Triangular => "triangular", Cosine => "cosine", Constant => "constant" });

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, f64, bool, Objective, Task, Schedule);

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

macro_rules! train_config {
    ($($field:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        /// Every knob of a training or fine-tuning run.
        #[derive(Debug, Clone, PartialEq)]
        pub struct TrainConfig {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for TrainConfig {
            fn default() -> Self {
                TrainConfig { $($field: $default,)* }
            }
        }

        impl TrainConfig {
            /// `(key, description)` for every accepted key, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[$((stringify!($field), $doc),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| HlmError::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => bail!(Config, "unknown config key {key:?}"),
                }
                Ok(())
            }

            /// Canonical text form listing every key.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($field), ConfigValue::show(&self.$field)).unwrap();)*
                s
            }
        }
    };
}

train_config! {
    objective: Objective = Objective::HeadlessCwt, "vanilla_ce or headless_cwt";
    task: Task = Task::Mlm, "mlm (bidirectional) or clm (causal)";
    corpus: String = "data/corpus".into(), "comma-separated corpus files or directories";
    tokenizer: String = String::new(), "existing tokenizer file; empty trains one on the corpus";
    vocab_size: usize = 2000, "tokenizer vocabulary size, specials included";
    model_vocab: usize = 0, "embedding rows when larger than the tokenizer vocabulary (0: same)";
    heldout_frac: f64 = 0.05, "tail fraction of every document held out for evaluation";
    d_model: usize = 128, "hidden size";
    n_layers: usize = 4, "transformer blocks";
    n_heads: usize = 4, "attention heads";
    d_ff: usize = 512, "MLP width";
    seq_len: usize = 64, "sequence length (also the position table size)";
    init_std: f64 = 0.02, "std of the normal init for weight matrices";
    ln_eps: f64 = 1e-5, "layer-norm epsilon";
    final_ln: bool = true, "layer norm on the backbone output";
    batch_size: usize = 16, "sequences per micro-batch";
    grad_accum: usize = 1, "micro-batches per optimizer step";
    mask_rate: f64 = 0.15, "MLM selection rate";
    total_steps: u64 = 2000, "optimizer steps";
    seed: u64 = 0, "root seed for init, data order and masking";
    lr: f64 = 1e-3, "peak learning rate";
    beta1: f64 = 0.9, "AdamW first-moment decay";
    beta2: f64 = 0.95, "AdamW second-moment decay";
    adam_eps: f64 = 1e-8, "AdamW epsilon";
    weight_decay: f64 = 0.01, "decoupled weight decay on matrices";
    clip_norm: f64 = 1.0, "global gradient-norm clip (0 disables)";
    schedule: Schedule = Schedule::Triangular, "triangular, cosine or constant";
    warmup_steps: u64 = 100, "linear warmup steps";
    eval_every: u64 = 50, "steps per metrics record";
    checkpoint_every: u64 = 0, "steps per intermediate checkpoint (0: final only)";
    log_timing: bool = false, "record wall-clock tokens/sec (false writes null and keeps logs reproducible)";
    init_from: String = String::new(), "checkpoint to start from (head fine-tuning)";
    freeze_backbone: bool = false, "head fine-tuning: train only the head";
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Sets every key in `text`, returning the keys in order.
    fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut keys = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key = value, got {raw:?}", n + 1);
            };
            self.set(k.trim(), v.trim()).map_err(|e| HlmError::Config(format!("line {}: {}", n + 1, e.message())))?;
            keys.push(k.trim().to_string());
        }
        Ok(keys)
    }

    /// Reads a config file. Paths the file sets are taken relative to its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    /// Overlays the keys a config file sets onto `self`.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HlmError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let keys = self.apply_text(&text).map_err(|e| HlmError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &str| -> String {
            if p.is_empty() || Path::new(p).is_absolute() {
                p.to_string()
            } else {
                base.join(p).to_string_lossy().into_owned()
            }
        };
        for k in keys {
            match k.as_str() {
                "corpus" => self.corpus = self.corpus.split(',').map(|p| fix(p.trim())).collect::<Vec<_>>().join(","),
                "tokenizer" => self.tokenizer = fix(&self.tokenizer),
                "init_from" => self.init_from = fix(&self.init_from),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn corpus_paths(&self) -> Vec<PathBuf> {
        self.corpus.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
    }

    /// Hex SHA-256 of [`TrainConfig::to_text`].
    pub fn digest(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.grad_accum == 0 || self.seq_len == 0 {
            bail!(Config, "batch_size, grad_accum and seq_len must be positive");
        }
        if self.warmup_steps > self.total_steps {
            bail!(Config, "warmup_steps {} exceeds total_steps {}", self.warmup_steps, self.total_steps);
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            bail!(Config, "mask_rate must be in [0, 1)");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) || !(self.adam_eps > 0.0) {
            bail!(Config, "lr, weight_decay and clip_norm must be non-negative, adam_eps positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Config, "betas must be in [0, 1)");
        }
        if self.eval_every == 0 {
            bail!(Config, "eval_every must be positive");
        }
        if self.corpus_paths().is_empty() {
            bail!(Config, "corpus is empty");
        }
        if self.model_vocab != 0 && self.model_vocab < self.vocab_size {
            bail!(Config, "model_vocab {} is smaller than vocab_size {}", self.model_vocab, self.vocab_size);
        }
        self.model_config(self.vocab_size).validate()
    }

    /// Model shape for a tokenizer of `tokenizer_vocab` entries.
    pub fn model_config(&self, tokenizer_vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: tokenizer_vocab.max(self.model_vocab),
            d_model: self.d_model,
            max_len: self.seq_len,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            causal: self.task == Task::Clm,
            init_std: self.init_std,
            ln_eps: self.ln_eps,
            final_ln: self.final_ln,
        }
    }

    /// Tokens read per optimizer step.
    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len * self.grad_accum
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("objective", "vanilla_ce").unwrap();
        cfg.set("lr", "0.0003").unwrap();
        cfg.set("schedule", "cosine").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(cfg.to_text().lines().count(), TrainConfig::KEYS.len());
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::parse("# desk run\nseed = 7  # override\n\ntask=clm\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.task, Task::Clm);
        for bad in ["bogus = 1", "seed = x", "task = seq2seq", "seed"] {
            assert!(matches!(TrainConfig::parse(bad), Err(HlmError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { warmup_steps: 10, total_steps: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { n_heads: 5, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "corpus = a.txt, /abs/b.txt\n").unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.corpus_paths(), vec![dir.path().join("a.txt"), PathBuf::from("/abs/b.txt")]);
        assert_eq!(cfg.tokenizer, "");
        std::fs::write(&path, "seed = 1\n").unwrap();
        assert_eq!(TrainConfig::from_file(&path).unwrap().corpus, "data/corpus");
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
