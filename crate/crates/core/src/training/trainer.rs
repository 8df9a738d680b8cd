//! Pretraining and head-recovery loops.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use super::checkpoint::{Checkpoint, OptimizerSnapshot, RngState, Stage};
use super::config::{Objective, Task, TrainConfig};
use super::metrics::{MetricsLog, Record};
use super::optim::{AdamW, AdamWConfig};
use super::schedule::LrSchedule;
use crate::data::{
    load_documents, make_clm_batch, make_mlm_batch, train_bpe, Batch, MaskConfig, TokenCorpus, Tokenizer,
    WindowSampler,
};
use crate::error::{bail, HlmError, Result};
use crate::model::{forward_backbone, output_projection, Model, Weights};
use crate::objectives::{ce_tied_from_outputs, cwt_loss, LossOutput};
use crate::rng;
use crate::tensor::{AllocProbe, Element, Tape, Var};

/// Tokenizer plus the tokenized corpus of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub tokenizer: Tokenizer,
    pub corpus: TokenCorpus,
}

impl RunData {
    /// Loads the corpus and tokenizes it. The tokenizer comes from
    /// `tokenizer`, else from the config's tokenizer file, else is trained
    /// on the corpus with `vocab_size` entries.
    pub fn prepare(cfg: &TrainConfig, tokenizer: Option<Tokenizer>) -> Result<Self> {
        let docs = load_documents(&cfg.corpus_paths())?;
        let tokenizer = match tokenizer {
            Some(t) => t,
            None if !cfg.tokenizer.is_empty() => Tokenizer::load(Path::new(&cfg.tokenizer))?,
            None => train_bpe(docs.iter().map(|d| d.text.as_slice()), cfg.vocab_size)?,
        };
        let corpus = TokenCorpus::build(&tokenizer, &docs, cfg.heldout_frac)?;
        Ok(RunData { tokenizer, corpus })
    }
}

/// Forward pass plus the configured objective. Both objectives share the
/// backbone call; only the loss differs.
pub fn loss_on_batch<T: Element>(
    tape: &Tape<T>,
    model: &Model<T>,
    w: &Weights<Var>,
    objective: Objective,
    batch: &Batch,
) -> Result<LossOutput> {
    let o = forward_backbone(tape, &model.config, w, &batch.x_tilde, batch.n, batch.len)?;
    match objective {
        Objective::HeadlessCwt => cwt_loss(tape, o, w.tok_emb, batch),
        Objective::VanillaCe => ce_tied_from_outputs(tape, o, output_projection(w), batch),
    }
}

/// Builds batch `idx` of a run from its training stream.
pub fn build_batch(cfg: &TrainConfig, data: &RunData, sampler: &WindowSampler, idx: u64) -> Result<Batch> {
    let (n, l) = (cfg.batch_size, cfg.seq_len);
    let tokens = sampler.batch_tokens(&data.corpus.train, idx, n);
    match cfg.task {
        Task::Mlm => {
            let mask = MaskConfig { mask_rate: cfg.mask_rate, vocab_size: data.tokenizer.vocab_size() };
            make_mlm_batch(&tokens, n, l, &mask, rng::derive_seed(cfg.seed, "mask", idx))
        }
        Task::Clm => make_clm_batch(&tokens, n, l),
    }
}

pub fn window_len(cfg: &TrainConfig) -> usize {
    match cfg.task {
        Task::Mlm => cfg.seq_len,
        Task::Clm => cfg.seq_len + 1,
    }
}

/// Desk-scale head-recovery settings: weight-tied CE through the new head,
/// constant schedule after a linear warmup of a fifth of the run.
pub fn head_recovery_defaults(cfg: &mut TrainConfig) {
    cfg.objective = Objective::VanillaCe;
    cfg.schedule = super::config::Schedule::Constant;
    cfg.lr = 1e-4;
    cfg.total_steps = 500;
    cfg.warmup_steps = 100;
    cfg.checkpoint_every = 0;
    cfg.init_from = String::new();
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub aux_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub peak_bytes: u64,
    pub n_supervised: usize,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub stage: Stage,
    pub step: u64,
    opt: AdamW<f32>,
    /// Per parameter entry: trained or frozen.
    trainable: Vec<bool>,
    data: Arc<RunData>,
    sampler: WindowSampler,
    schedule: LrSchedule,
}

fn adamw_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
    }
}

impl Trainer {
    /// Fresh pretraining run with parameters drawn from the config seed.
    pub fn new(cfg: TrainConfig, data: Arc<RunData>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model_config(data.tokenizer.vocab_size()), cfg.seed)?;
        let stage = match cfg.objective {
            Objective::VanillaCe => Stage::PretrainedVanilla,
            Objective::HeadlessCwt => Stage::PretrainedHeadless,
        };
        let trainable = vec![true; model.params.len()];
        Self::assemble(cfg, data, model, stage, 0, None, trainable)
    }

    /// Continues a run from a checkpoint that carries optimizer state.
    pub fn resume(ckpt: Checkpoint<f32>, cfg: TrainConfig, data: Arc<RunData>) -> Result<Self> {
        cfg.validate()?;
        let Some(snap) = ckpt.optimizer else {
            bail!(Contract, "checkpoint has no optimizer state to resume from");
        };
        let names: Vec<String> = ckpt.model.params.entries().into_iter().map(|(n, _)| n).collect();
        let trainable: Vec<bool> = names.iter().map(|n| snap.params.contains(n)).collect();
        if ckpt.rng.next_batch != ckpt.step * cfg.grad_accum as u64 {
            bail!(Contract, "checkpoint data position {} does not match step {}", ckpt.rng.next_batch, ckpt.step);
        }
        Self::assemble(cfg, data, ckpt.model, ckpt.stage, ckpt.step, Some(snap.state), trainable)
    }

    /// Head recovery: adds an untied head initialised from `e_θ` and trains
    /// with weight-tied cross-entropy through that head.
    pub fn finetune_head(ckpt: Checkpoint<f32>, mut cfg: TrainConfig, data: Arc<RunData>) -> Result<Self> {
        if ckpt.stage != Stage::PretrainedHeadless {
            bail!(Contract, "head fine-tuning needs a pretrained_headless checkpoint, got {:?}", ckpt.stage);
        }
        cfg.objective = Objective::VanillaCe;
        let mc = &ckpt.model.config;
        cfg.d_model = mc.d_model;
        cfg.n_layers = mc.n_layers;
        cfg.n_heads = mc.n_heads;
        cfg.d_ff = mc.d_ff;
        cfg.seq_len = cfg.seq_len.min(mc.max_len);
        cfg.task = if mc.causal { Task::Clm } else { Task::Mlm };
        cfg.final_ln = mc.final_ln;
        cfg.validate()?;
        let mut model = ckpt.model;
        model.add_head()?;
        let names: Vec<String> = model.params.entries().into_iter().map(|(n, _)| n).collect();
        let trainable = names.iter().map(|n| !cfg.freeze_backbone || n == "head").collect();
        Self::assemble(cfg, data, model, Stage::HeadRecovered, 0, None, trainable)
    }

    fn assemble(
        cfg: TrainConfig,
        data: Arc<RunData>,
        model: Model<f32>,
        stage: Stage,
        step: u64,
        opt: Option<AdamW<f32>>,
        trainable: Vec<bool>,
    ) -> Result<Self> {
        if data.tokenizer.vocab_size() > model.config.vocab_size {
            bail!(Config, "tokenizer has {} entries, model only {}", data.tokenizer.vocab_size(), model.config.vocab_size);
        }
        if cfg.seq_len > model.config.max_len {
            bail!(Config, "seq_len {} exceeds the model's position table {}", cfg.seq_len, model.config.max_len);
        }
        let opt = match opt {
            Some(o) => o,
            None => {
                let tensors: Vec<_> = model.params.entries().into_iter().zip(&trainable).filter(|(_, &t)| t).map(|((_, p), _)| p).collect();
                AdamW::new(adamw_config(&cfg), &tensors)?
            }
        };
        if opt.m.len() != trainable.iter().filter(|&&t| t).count() {
            bail!(Contract, "optimizer state does not match the trainable parameters");
        }
        let sampler = WindowSampler::new(data.corpus.train.len(), window_len(&cfg), cfg.seed, true)?;
        let schedule = LrSchedule { kind: cfg.schedule, peak: cfg.lr, warmup_steps: cfg.warmup_steps, total_steps: cfg.total_steps };
        Ok(Trainer { cfg, model, stage, step, opt, trainable, data, sampler, schedule })
    }

    pub fn data(&self) -> &RunData {
        &self.data
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.schedule.lr_at(step)
    }

    pub fn batch(&self, idx: u64) -> Result<Batch> {
        build_batch(&self.cfg, &self.data, &self.sampler, idx)
    }

    fn bind(&self, tape: &Tape<f32>) -> Weights<Var> {
        let mut flags = self.trainable.iter();
        self.model.params.map(|_, t| if *flags.next().unwrap() { tape.param(t) } else { tape.constant(t) })
    }

    /// Runs one optimizer step over `grad_accum` micro-batches.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let accum = self.cfg.grad_accum;
        let probe = AllocProbe::start();
        let mut grads: Vec<Vec<f32>> = self
            .model
            .params
            .entries()
            .into_iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|((_, p), _)| vec![0.0; p.numel()])
            .collect();
        let (mut loss, mut acc, mut k) = (0.0, 0.0, 0);
        for m in 0..accum {
            let batch = self.batch(self.step * accum as u64 + m as u64)?;
            let tape = Tape::new();
            let w = self.bind(&tape);
            let out = loss_on_batch(&tape, &self.model, &w, self.cfg.objective, &batch)?;
            if !out.value.is_finite() {
                bail!(Numeric, "non-finite loss {} at step {}", out.value, self.step);
            }
            let g = tape.backward(out.loss)?;
            let vars = w.entries();
            let mut slot = grads.iter_mut();
            for ((_, v), &t) in vars.iter().zip(&self.trainable) {
                if t {
                    g.accumulate_into(**v, slot.next().unwrap(), 1.0 / accum as f32);
                }
            }
            loss += out.value / accum as f64;
            acc += out.aux_accuracy / accum as f64;
            k += out.n_supervised;
        }
        let lr = self.schedule.lr_at(self.step);
        let decay: Vec<bool> = self
            .model
            .params
            .entries()
            .into_iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|((_, p), _)| p.shape().len() == 2)
            .collect();
        let mut params: Vec<_> = self.model.params.entries_mut().into_iter().zip(&self.trainable).filter(|(_, &t)| t).map(|(p, _)| p).collect();
        let info = self.opt.update(&mut params, &mut grads, &decay, lr)?;
        drop(grads);
        let peak_bytes = probe.finish().peak_bytes;
        self.step += 1;
        Ok(StepStats { step: self.step, loss, aux_acc: acc, lr, grad_norm: info.grad_norm, peak_bytes, n_supervised: k })
    }

    /// Trains until `total_steps`, writing a record every `eval_every` steps
    /// and checkpoints every `checkpoint_every` steps into `out`.
    pub fn run(&mut self, log: &mut MetricsLog, out: Option<&Path>) -> Result<()> {
        self.run_until(self.cfg.total_steps, log, out)
    }

    pub fn run_until(&mut self, last_step: u64, log: &mut MetricsLog, out: Option<&Path>) -> Result<()> {
        let (mut loss, mut acc, mut mem, mut n) = (0.0, 0.0, 0u64, 0u64);
        let mut t0 = Instant::now();
        while self.step < last_step {
            let s = match self.train_step() {
                Ok(s) => s,
                Err(e) => {
                    if matches!(e, HlmError::Numeric(_)) {
                        log.failure(self.step, &e.to_string())?;
                    }
                    return Err(e);
                }
            };
            loss += s.loss;
            acc += s.aux_acc;
            mem = mem.max(s.peak_bytes);
            n += 1;
            if s.step % self.cfg.eval_every == 0 || s.step == last_step {
                let secs = t0.elapsed().as_secs_f64();
                let tok_per_s = self.cfg.log_timing.then(|| (n * self.cfg.tokens_per_step() as u64) as f64 / secs.max(1e-9));
                log.record(Record { step: s.step, loss: loss / n as f64, lr: s.lr, tok_per_s, aux_acc: acc / n as f64, mem_bytes: mem })?;
                (loss, acc, mem, n) = (0.0, 0.0, 0, 0);
                t0 = Instant::now();
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && s.step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint()?.save(&dir.join(format!("ckpt-{}.hlm", s.step)))?;
                }
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let names: Vec<String> = self
            .model
            .params
            .entries()
            .into_iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|((n, _), _)| n)
            .collect();
        Ok(Checkpoint {
            stage: self.stage,
            step: self.step,
            model: self.model.clone(),
            config_digest: self.cfg.digest(),
            config: self.cfg.to_text(),
            rng: RngState { seed: self.cfg.seed, next_batch: self.step * self.cfg.grad_accum as u64 },
            tokenizer: Some(self.data.tokenizer.to_text()),
            optimizer: Some(OptimizerSnapshot { state: self.opt.clone(), params: names }),
        })
    }
}
