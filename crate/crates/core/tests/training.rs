use std::path::PathBuf;
use std::sync::Arc;

use hlm_core::model::{forward_backbone, tied_logits};
use hlm_core::tensor::Tape;
use hlm_core::training::metrics::read_log;
use hlm_core::training::{Checkpoint, Header, MetricsLog, Objective, RunData, Stage, Task, Trainer, TrainConfig};
use hlm_core::HlmError;

fn corpus_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus/alice29.txt");
    let text = std::fs::read_to_string(root).unwrap();
    let cut = text.char_indices().map(|(i, _)| i).find(|&i| i >= 100_000).unwrap();
    std::fs::write(dir.path().join("alice.txt"), &text[..cut]).unwrap();
    dir
}

fn small_config(dir: &tempfile::TempDir, objective: Objective, task: Task) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.corpus = dir.path().display().to_string();
    cfg.objective = objective;
    cfg.task = task;
    cfg.vocab_size = 300;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.seq_len = 16;
    cfg.batch_size = 4;
    cfg.total_steps = 50;
    cfg.warmup_steps = 5;
    cfg.eval_every = 10;
    cfg.log_timing = false;
    cfg
}

fn run(cfg: &TrainConfig, data: &Arc<RunData>) -> (Trainer, MetricsLog) {
    let mut t = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut log = MetricsLog::in_memory();
    t.run(&mut log, None).unwrap();
    (t, log)
}

#[test]
fn smoke_run_then_checkpoint_loads() {
    let dir = corpus_dir();
    for (objective, task) in [
        (Objective::HeadlessCwt, Task::Mlm),
        (Objective::VanillaCe, Task::Mlm),
        (Objective::HeadlessCwt, Task::Clm),
        (Objective::VanillaCe, Task::Clm),
    ] {
        let cfg = small_config(&dir, objective, task);
        let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
        let (t, log) = run(&cfg, &data);
        assert_eq!(log.records.len(), 5);
        assert!(log.records.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
        assert!(log.records.iter().all(|r| r.mem_bytes > 0 && r.tok_per_s.is_none()));
        let path = dir.path().join("final.hlm");
        t.checkpoint().unwrap().save(&path).unwrap();
        let back = Checkpoint::<f32>::load(&path).unwrap();
        assert_eq!(back.step, 50);
        assert_eq!(back.model.has_head(), false);
        let expect = if objective == Objective::HeadlessCwt { Stage::PretrainedHeadless } else { Stage::PretrainedVanilla };
        assert_eq!(back.stage, expect);
        std::fs::remove_file(path).unwrap();
    }
}

#[test]
fn same_seed_same_losses() {
    let dir = corpus_dir();
    let cfg = small_config(&dir, Objective::HeadlessCwt, Task::Mlm);
    let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
    let (a, la) = run(&cfg, &data);
    let (b, lb) = run(&cfg, &data);
    assert_eq!(la.records, lb.records);
    assert_eq!(a.checkpoint().unwrap().to_bytes().unwrap(), b.checkpoint().unwrap().to_bytes().unwrap());
    let mut other = cfg.clone();
    other.seed = 1;
    let (_, lc) = run(&other, &data);
    assert_ne!(la.records[0].loss, lc.records[0].loss);
}

#[test]
fn loss_goes_down_on_a_short_run() {
    let dir = corpus_dir();
    let mut cfg = small_config(&dir, Objective::VanillaCe, Task::Clm);
    cfg.total_steps = 300;
    cfg.eval_every = 50;
    cfg.lr = 3e-3;
    let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
    let (_, log) = run(&cfg, &data);
    let first = log.records.first().unwrap().loss;
    let last = log.records.last().unwrap().loss;
    assert!(last < first * 0.9, "{first} -> {last}");
}

#[test]
fn resume_matches_uninterrupted() {
    let dir = corpus_dir();
    let mut cfg = small_config(&dir, Objective::HeadlessCwt, Task::Mlm);
    cfg.grad_accum = 2;
    cfg.total_steps = 20;
    cfg.eval_every = 1;
    let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
    let mut a = Trainer::new(cfg.clone(), data.clone()).unwrap();
    let mut la = MetricsLog::in_memory();
    a.run_until(10, &mut la, None).unwrap();
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    a.run_until(20, &mut la, None).unwrap();

    let ckpt = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
    let mut b = Trainer::resume(ckpt, cfg, data).unwrap();
    let mut lb = MetricsLog::in_memory();
    b.run_until(20, &mut lb, None).unwrap();
    assert_eq!(lb.records.len(), 10);
    for (x, y) in la.records[10..].iter().zip(&lb.records) {
        assert_eq!(x.step, y.step);
        assert!((x.loss - y.loss).abs() < 1e-6, "{} vs {}", x.loss, y.loss);
    }
}

#[test]
fn head_recovery_starts_from_tied_readout() {
    let dir = corpus_dir();
    let cfg = small_config(&dir, Objective::HeadlessCwt, Task::Clm);
    let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
    let (t, _) = run(&cfg, &data);
    let ckpt = t.checkpoint().unwrap();

    let mut ft_cfg = cfg.clone();
    ft_cfg.total_steps = 20;
    let ft = Trainer::finetune_head(ckpt.clone(), ft_cfg.clone(), data.clone()).unwrap();
    assert_eq!(ft.stage, Stage::HeadRecovered);
    assert!(ft.model.has_head());
    let batch = ft.batch(0).unwrap();
    let tape = Tape::new();
    let w = ft.model.bind(&tape);
    let o = forward_backbone(&tape, &ft.model.config, &w, &batch.x_tilde, batch.n, batch.len).unwrap();
    let head = tape.matmul_nt(o, w.head.unwrap()).unwrap();
    let tied = tied_logits(&tape, &w, o).unwrap();
    assert!(tape.value(head).bitwise_eq(&tape.value(tied)));

    let mut ft = ft;
    let mut log = MetricsLog::in_memory();
    ft.run(&mut log, None).unwrap();
    let after = ft.checkpoint().unwrap();
    assert_eq!(after.stage, Stage::HeadRecovered);
    let back = Checkpoint::<f32>::from_bytes(&after.to_bytes().unwrap()).unwrap();
    assert!(back.model.params.head.unwrap().bitwise_eq(after.model.params.head.as_ref().unwrap()));

    let mut frozen = ft_cfg.clone();
    frozen.freeze_backbone = true;
    let mut fz = Trainer::finetune_head(ckpt.clone(), frozen, data.clone()).unwrap();
    fz.run(&mut MetricsLog::in_memory(), None).unwrap();
    assert!(fz.model.params.tok_emb.bitwise_eq(&ckpt.model.params.tok_emb));
    assert!(!fz.model.params.head.as_ref().unwrap().bitwise_eq(&ckpt.model.params.tok_emb));

    let err = Trainer::finetune_head(after, ft_cfg, data).unwrap_err();
    assert!(matches!(err, HlmError::Contract(_)));
}

#[test]
fn non_finite_loss_aborts_with_a_record() {
    let dir = corpus_dir();
    let mut cfg = small_config(&dir, Objective::VanillaCe, Task::Mlm);
    cfg.lr = 1e36;
    cfg.warmup_steps = 0;
    cfg.clip_norm = 0.0;
    let data = Arc::new(RunData::prepare(&cfg, None).unwrap());
    let path = dir.path().join("metrics.jsonl");
    let header = Header {
        header: true,
        seed: 0,
        objective: "vanilla_ce".into(),
        task: "mlm".into(),
        stage: "pretrained_vanilla".into(),
        config_digest: cfg.digest(),
    };
    let mut log = MetricsLog::create(&path, &header).unwrap();
    let mut t = Trainer::new(cfg, data).unwrap();
    let err = t.run(&mut log, None).unwrap_err();
    assert!(matches!(err, HlmError::Numeric(_)), "{err}");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.lines().last().unwrap().contains("\"error\""));
    assert_eq!(read_log(&path).unwrap().0.unwrap().seed, 0);
}
