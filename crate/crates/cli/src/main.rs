use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use hlm_core::bench::{bench_loss_scaling, BenchConfig};
use hlm_core::data::Tokenizer;
use hlm_core::eval::{
    cloze_accuracy, cloze_passages, eval_batches, perplexity, retrieval_accuracy, synonym_cosine, EvalOptions,
    EvalReport, ModelScorer, RetrievalScope, SynonymPairs,
};
use hlm_core::training::{
    head_recovery_defaults, Checkpoint, Header, MetricsLog, Objective, RunData, Stage, Task, TrainConfig, Trainer,
};
use hlm_core::{HlmError, Result};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown subcommand or flag, malformed --set)
  3  configuration error (bad value, unknown key, wrong checkpoint stage)
  4  data error (missing corpus, unreadable or corrupt file)
  5  numeric error (non-finite loss or gradient)
  1  internal error

Report columns (--format csv):
  eval:            metric,value,n_examples,half_width,checkpoint_digest
  bench:           objective,v,k,d,n,reps,median_s,iqr_s,peak_loss_bytes,peak_step_bytes,v_dim_seen,skipped
  probe-synonyms:  checkpoint,mean,n_pairs,skipped,n_zero_norm,histogram (40 ';'-separated bins over [-1,1])";

#[derive(Parser)]
#[command(name = "hlm", version, about = "Train and probe headless language models", after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads for data preparation (1 keeps runs reproducible).
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Metric {
    Perplexity,
    Cloze,
    RetrievalInBatch,
    RetrievalFullVocab,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model; writes config.txt, tokenizer.txt, metrics.jsonl and final.hlm.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Run directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
    },
    /// Add an LM head initialised from the embeddings to a headless checkpoint and fine-tune it.
    FinetuneHead {
        #[command(flatten)]
        run: RunArgs,
        /// Headless checkpoint (defaults to the config's init_from).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on its held-out split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics to compute; repeatable (default: all the checkpoint supports).
        #[arg(long, value_enum)]
        metric: Vec<Metric>,
        /// Score a headless checkpoint through the tied embedding transpose.
        #[arg(long)]
        naive_readout: bool,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        /// Also write the report into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the loss forward+backward of both objectives over a vocabulary grid.
    Bench {
        /// Vocabulary sizes.
        #[arg(long, value_delimiter = ',', default_value = "1000,5000,20000,50000")]
        vocab: Vec<usize>,
        /// Supervised positions per batch.
        #[arg(long, value_delimiter = ',', default_value = "256")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        d: usize,
        /// Output rows (0: equal to K).
        #[arg(long, default_value_t = 0)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Skip points whose estimated footprint exceeds this.
        #[arg(long, default_value_t = 4096)]
        budget_mb: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write the report into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity of synonym pairs in the input embeddings.
    ProbeSynonyms {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint; reports the mean shift relative to the first.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// `word_a<TAB>word_b` lines.
        #[arg(long, default_value = "data/synonyms.tsv")]
        pairs: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: Format,
        /// Also write the report into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a tokenizer file, from a checkpoint or trained on the config's corpus.
    ExportTokenizer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tokenizer file to write
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

fn exit_code(e: &HlmError) -> u8 {
    match e {
        HlmError::Config(_) | HlmError::Contract(_) => 3,
        HlmError::Data(_) | HlmError::Io(_) | HlmError::Format(_) => 4,
        HlmError::Numeric(_) => 5,
        _ => 1,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> HlmError {
    HlmError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

impl RunArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()
    }
}

fn header(cfg: &TrainConfig, stage: Stage) -> Header {
    let stage = serde_json::to_value(stage).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    Header {
        header: true,
        seed: cfg.seed,
        objective: cfg.objective.to_string(),
        task: cfg.task.to_string(),
        stage,
        config_digest: cfg.digest(),
    }
}

fn tokenizer_of(ckpt: &Checkpoint<f32>, cfg: &TrainConfig) -> Result<Tokenizer> {
    match &ckpt.tokenizer {
        Some(text) => Tokenizer::from_text(text),
        None if !cfg.tokenizer.is_empty() => Tokenizer::load(Path::new(&cfg.tokenizer)),
        None => Err(HlmError::Data("checkpoint carries no tokenizer and the config names none".into())),
    }
}

/// Runs `trainer` to completion and writes the run's artifacts into `out`.
fn drive(mut trainer: Trainer, out: &Path) -> Result<()> {
    write_file(&out.join("config.txt"), &trainer.cfg.to_text())?;
    trainer.data().tokenizer.save(&out.join("tokenizer.txt"))?;
    let mut log = MetricsLog::create(&out.join("metrics.jsonl"), &header(&trainer.cfg, trainer.stage))?;
    trainer.run(&mut log, Some(out))?;
    trainer.checkpoint()?.save(&out.join("final.hlm"))?;
    if let Some(r) = log.records.last() {
        eprintln!("step {}: loss {:.4}, aux_acc {:.4}", r.step, r.loss, r.aux_acc);
    }
    Ok(())
}

fn train(run: &RunArgs, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::default();
    run.apply(&mut cfg)?;
    create_dir(out)?;
    let trainer = if cfg.init_from.is_empty() {
        let data = Arc::new(RunData::prepare(&cfg, None)?);
        Trainer::new(cfg, data)?
    } else {
        let ckpt = Checkpoint::<f32>::load(Path::new(&cfg.init_from))?;
        let data = Arc::new(RunData::prepare(&cfg, Some(tokenizer_of(&ckpt, &cfg)?))?);
        Trainer::resume(ckpt, cfg, data)?
    };
    drive(trainer, out)
}

fn finetune_head(run: &RunArgs, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut probe = TrainConfig::default();
    run.apply(&mut probe)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None if !probe.init_from.is_empty() => PathBuf::from(&probe.init_from),
        None => return Err(HlmError::Config("finetune-head needs --checkpoint or init_from".into())),
    };
    let ckpt = Checkpoint::<f32>::load(&path)?;
    let mut cfg = TrainConfig::parse(&ckpt.config)?;
    head_recovery_defaults(&mut cfg);
    run.apply(&mut cfg)?;
    cfg.init_from = path.display().to_string();
    create_dir(out)?;
    let data = Arc::new(RunData::prepare(&cfg, Some(tokenizer_of(&ckpt, &cfg)?))?);
    drive(Trainer::finetune_head(ckpt, cfg, data)?, out)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn emit(lines: &str, out: Option<&Path>, name: &str) -> Result<()> {
    print!("{lines}");
    std::io::stdout().flush()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(name), lines)?;
    }
    Ok(())
}

fn eval(
    run: &RunArgs,
    checkpoint: &Path,
    metrics: &[Metric],
    naive: bool,
    format: Format,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let mut cfg = TrainConfig::parse(&ckpt.config)?;
    run.apply(&mut cfg)?;
    let tok = tokenizer_of(&ckpt, &cfg)?;
    let data = RunData::prepare(&cfg, Some(tok))?;
    let model = &ckpt.model;
    let can_score = naive || model.has_head() || ckpt.stage != Stage::PretrainedHeadless;
    let metrics: Vec<Metric> = if metrics.is_empty() {
        let mut m = vec![Metric::RetrievalInBatch, Metric::RetrievalFullVocab];
        if can_score {
            m.splice(0..0, [Metric::Perplexity, Metric::Cloze]);
        }
        m
    } else {
        metrics.to_vec()
    };
    let seq_len = cfg.seq_len.min(model.config.max_len);
    let opts = EvalOptions {
        task: if model.config.causal { Task::Clm } else { Task::Mlm },
        batch_size: cfg.batch_size,
        seq_len,
        mask_rate: cfg.mask_rate,
        mask_vocab: data.tokenizer.vocab_size(),
        seed: cfg.seed,
        exclude_specials: true,
    };
    let heldout = &data.corpus.heldout;
    let digest = file_digest(checkpoint)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for m in metrics {
        let mut r = match m {
            Metric::Perplexity => perplexity(&ModelScorer::new(model, ckpt.stage, naive)?, heldout, &opts)?,
            Metric::Cloze => {
                let passages = cloze_passages(&data.corpus.heldout_docs, seq_len);
                cloze_accuracy(&ModelScorer::new(model, ckpt.stage, naive)?, &passages, cfg.batch_size)?
            }
            Metric::RetrievalInBatch | Metric::RetrievalFullVocab => {
                let scope = if m == Metric::RetrievalInBatch { RetrievalScope::InBatch } else { RetrievalScope::FullVocab };
                retrieval_accuracy(model, &eval_batches(heldout, &opts)?, scope)?
            }
        };
        if naive && matches!(m, Metric::Perplexity | Metric::Cloze) {
            r.metric.push_str("_naive");
        }
        r.checkpoint_digest = digest.clone();
        reports.push(r);
    }
    let text = match format {
        Format::Jsonl => reports.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect(),
        Format::Csv => {
            let mut s = String::from("metric,value,n_examples,half_width,checkpoint_digest\n");
            for r in &reports {
                s.push_str(&format!("{},{},{},{},{}\n", r.metric, r.value, r.n_examples, r.half_width, r.checkpoint_digest));
            }
            s
        }
    };
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("config.txt"), &cfg.to_text())?;
    }
    emit(&text, out, if matches!(format, Format::Csv) { "eval.csv" } else { "eval.jsonl" })
}

fn probe_synonyms(checkpoint: &Path, compare: Option<&Path>, pairs: &Path, format: Format, out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in std::iter::once(checkpoint).chain(compare) {
        let ckpt = Checkpoint::<f32>::load(path)?;
        let cfg = TrainConfig::parse(&ckpt.config)?;
        let tok = tokenizer_of(&ckpt, &cfg)?;
        let set = SynonymPairs::load(pairs, &tok)?;
        if set.pairs.is_empty() {
            return Err(HlmError::Data(format!("no pair in {} maps to single tokens", pairs.display())));
        }
        let s = synonym_cosine(&ckpt.model.params.tok_emb, &set.pairs)?;
        if s.n_zero_norm > 0 {
            eprintln!("warning: {} pairs excluded for zero-norm embeddings", s.n_zero_norm);
        }
        rows.push((path.display().to_string(), s, set.skipped));
    }
    let text = match format {
        Format::Jsonl => {
            let mut t: String = rows
                .iter()
                .map(|(p, s, skipped)| {
                    json!({
                        "checkpoint": p,
                        "mean": s.mean,
                        "n_pairs": s.n_pairs,
                        "skipped": skipped,
                        "n_zero_norm": s.n_zero_norm,
                        "histogram": s.histogram,
                    })
                    .to_string()
                        + "\n"
                })
                .collect();
            if rows.len() == 2 {
                t.push_str(&(json!({ "mean_shift": rows[1].1.mean - rows[0].1.mean }).to_string() + "\n"));
            }
            t
        }
        Format::Csv => {
            let mut t = String::from("checkpoint,mean,n_pairs,skipped,n_zero_norm,histogram\n");
            for (p, s, skipped) in &rows {
                let h: Vec<String> = s.histogram.iter().map(u64::to_string).collect();
                t.push_str(&format!("{p},{},{},{skipped},{},{}\n", s.mean, s.n_pairs, s.n_zero_norm, h.join(";")));
            }
            t
        }
    };
    emit(&text, out, if matches!(format, Format::Csv) { "synonyms.csv" } else { "synonyms.jsonl" })
}

fn export_tokenizer(run: &RunArgs, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = TrainConfig::default();
    run.apply(&mut cfg)?;
    let tok = match checkpoint {
        Some(p) => tokenizer_of(&Checkpoint::<f32>::load(p)?, &cfg)?,
        None => RunData::prepare(&cfg, None)?.tokenizer,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    tok.save(out)?;
    eprintln!("{} entries, {} merges -> {}", tok.vocab_size(), tok.merges().len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, out } => train(&run, &out),
        Command::FinetuneHead { run, checkpoint, out } => finetune_head(&run, checkpoint.as_deref(), &out),
        Command::Eval { run, checkpoint, metric, naive_readout, format, out } => {
            eval(&run, &checkpoint, &metric, naive_readout, format, out.as_deref())
        }
        Command::Bench { vocab, k, d, n, reps, warmup, budget_mb, seed, format, out } => {
            let cfg = BenchConfig {
                vocab_sizes: vocab,
                ks: k,
                d,
                n_rows: n,
                reps,
                warmup,
                budget_bytes: budget_mb << 20,
                seed,
                objectives: vec![Objective::VanillaCe, Objective::HeadlessCwt],
            };
            let report = bench_loss_scaling::<f32>(&cfg)?;
            match format {
                Format::Csv => emit(&report.to_csv(), out.as_deref(), "bench.csv"),
                Format::Jsonl => emit(&report.to_jsonl(), out.as_deref(), "bench.jsonl"),
            }
        }
        Command::ProbeSynonyms { checkpoint, compare, pairs, format, out } => {
            probe_synonyms(&checkpoint, compare.as_deref(), &pairs, format, out.as_deref())
        }
        Command::ExportTokenizer { run, checkpoint, out } => export_tokenizer(&run, checkpoint.as_deref(), &out),
    }
}

fn config_keys_help() -> String {
    let defaults = TrainConfig::default().to_text();
    let mut s = String::from("Config keys (default in brackets):\n");
    for ((key, doc), line) in TrainConfig::KEYS.iter().zip(defaults.lines()) {
        let value = line.split_once(" = ").map_or("", |(_, v)| v);
        s.push_str(&format!("  {key:<17} {doc} [{value}]\n"));
    }
    s
}

fn main() -> ExitCode {
    let keys = config_keys_help();
    let matches = Cli::command()
        .mut_subcommand("train", |c| c.after_help(keys.clone()))
        .mut_subcommand("finetune-head", |c| c.after_help(keys.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads as usize).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
