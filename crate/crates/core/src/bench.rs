//! Loss-only timing and allocation benchmark over a (V, K, D, N) grid.
//!
//! Each point times one forward+backward of the loss on fixed random
//! outputs `O [N, D]` and embeddings `e [V, D]`, with K of the N rows
//! supervised. The backbone is not involved.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{bail, Result};
use crate::objectives::{ce_tied_from_outputs, cwt_loss};
use crate::rng;
use crate::tensor::{AllocProbe, Element, Tape, Tensor};
use crate::training::Objective;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub vocab_sizes: Vec<usize>,
    pub ks: Vec<usize>,
    pub d: usize,
    /// Rows of `O`; 0 means one row per supervised position.
    pub n_rows: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Points whose estimated loss-step footprint exceeds this are skipped.
    pub budget_bytes: u64,
    pub seed: u64,
    pub objectives: Vec<Objective>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            vocab_sizes: vec![1000, 5000, 20000, 50000],
            ks: vec![256],
            d: 128,
            n_rows: 0,
            reps: 20,
            warmup: 5,
            budget_bytes: 4 << 30,
            seed: 0,
            objectives: vec![Objective::VanillaCe, Objective::HeadlessCwt],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub objective: String,
    pub v: usize,
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub reps: usize,
    /// Seconds per loss forward+backward.
    pub median_s: f64,
    pub iqr_s: f64,
    /// Peak engine bytes while computing the loss value.
    pub peak_loss_bytes: u64,
    /// Peak engine bytes over forward and backward.
    pub peak_step_bytes: u64,
    /// Whether any buffer had V as a dimension.
    pub v_dim_seen: bool,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
}

pub const CSV_HEADER: &str = "objective,v,k,d,n,reps,median_s,iqr_s,peak_loss_bytes,peak_step_bytes,v_dim_seen,skipped";

impl BenchReport {
    pub fn find(&self, objective: Objective, v: usize, k: usize) -> Option<&BenchPoint> {
        let name = objective.to_string();
        self.points.iter().find(|p| p.objective == name && p.v == v && p.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.9},{:.9},{},{},{},{}\n",
                p.objective, p.v, p.k, p.d, p.n, p.reps, p.median_s, p.iqr_s, p.peak_loss_bytes, p.peak_step_bytes, p.v_dim_seen, p.skipped
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.points.iter().map(|p| serde_json::to_string(p).expect("plain struct") + "\n").collect()
    }
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Rough upper bound on the bytes one loss step holds at once.
pub fn estimate_bytes(objective: Objective, v: usize, k: usize, d: usize, elem: usize) -> u64 {
    let n = match objective {
        Objective::VanillaCe => 4 * k * v + v * d + 2 * k * d,
        Objective::HeadlessCwt => 4 * k * k + 4 * k * d,
    };
    (n * elem) as u64
}

/// Fixed inputs for one grid point.
pub struct LossInputs<T: Element> {
    pub o: Tensor<T>,
    pub e: Tensor<T>,
    pub batch: Batch,
}

impl<T: Element> LossInputs<T> {
    pub fn random(v: usize, k: usize, d: usize, n: usize, seed: u64) -> Result<Self> {
        if k == 0 || k > n {
            bail!(Config, "need 0 < K <= N, got K={k}, N={n}");
        }
        let mut r = rng::stream(seed, "bench", (v * 131 + k) as u64);
        let scale = 1.0 / (d as f64).sqrt();
        let mut normal = |len: usize| -> Vec<T> {
            (0..len).map(|_| T::from_f64(r.sample::<f64, _>(StandardNormal) * scale)).collect()
        };
        let o = Tensor::new(&[n, d], normal(n * d))?;
        let e = Tensor::new(&[v, d], normal(v * d))?;
        let positions: Vec<(usize, usize)> = (0..k).map(|i| (0, i * n / k)).collect();
        let targets: Vec<u32> = (0..k).map(|_| r.gen_range(0..v as u32)).collect();
        let batch = Batch { n: 1, len: n, x: Vec::new(), x_tilde: Vec::new(), positions, targets };
        Ok(LossInputs { o, e, batch })
    }

    /// One loss forward+backward. Returns the loss value and the peak
    /// bytes of the forward part.
    pub fn step(&self, objective: Objective) -> Result<(f64, u64)> {
        let tape = Tape::new();
        let o = tape.param(&self.o);
        let e = tape.param(&self.e);
        let fwd = AllocProbe::start();
        let out = match objective {
            Objective::HeadlessCwt => cwt_loss(&tape, o, e, &self.batch)?,
            Objective::VanillaCe => ce_tied_from_outputs(&tape, o, e, &self.batch)?,
        };
        let peak = fwd.finish().peak_bytes;
        let g = tape.backward(out.loss)?;
        drop(g);
        Ok((out.value, peak))
    }
}

fn run_point<T: Element>(cfg: &BenchConfig, objective: Objective, v: usize, k: usize) -> Result<BenchPoint> {
    let n = if cfg.n_rows == 0 { k } else { cfg.n_rows.max(k) };
    let mut point = BenchPoint {
        objective: objective.to_string(),
        v,
        k,
        d: cfg.d,
        n,
        reps: cfg.reps,
        median_s: 0.0,
        iqr_s: 0.0,
        peak_loss_bytes: 0,
        peak_step_bytes: 0,
        v_dim_seen: false,
        skipped: false,
    };
    if estimate_bytes(objective, v, k, cfg.d, T::DTYPE.size()) > cfg.budget_bytes {
        point.skipped = true;
        return Ok(point);
    }
    let inputs = LossInputs::<T>::random(v, k, cfg.d, n, cfg.seed)?;
    for _ in 0..cfg.warmup {
        inputs.step(objective)?;
    }
    let mut times = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t0 = Instant::now();
        inputs.step(objective)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let probe = AllocProbe::start();
    let (_, loss_peak) = inputs.step(objective)?;
    let report = probe.finish();
    times.sort_by(f64::total_cmp);
    point.median_s = quantile(&times, 0.5);
    point.iqr_s = quantile(&times, 0.75) - quantile(&times, 0.25);
    point.peak_loss_bytes = loss_peak;
    point.peak_step_bytes = report.peak_bytes;
    point.v_dim_seen = report.saw_dim(v);
    Ok(point)
}

/// Runs every (objective, V, K) point of the grid on the calling thread.
pub fn bench_loss_scaling<T: Element>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 20 {
        bail!(Config, "benchmark needs at least 20 repetitions, got {}", cfg.reps);
    }
    if cfg.vocab_sizes.is_empty() || cfg.ks.is_empty() || cfg.objectives.is_empty() {
        bail!(Config, "benchmark grid is empty");
    }
    let mut report = BenchReport::default();
    for &objective in &cfg.objectives {
        for &k in &cfg.ks {
            for &v in &cfg.vocab_sizes {
                if report.find(objective, v, k).is_some() {
                    continue;
                }
                report.points.push(run_point::<T>(cfg, objective, v, k)?);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn small_grid_reports_every_point() {
        let cfg = BenchConfig { vocab_sizes: vec![300, 600], ks: vec![16], d: 8, ..Default::default() };
        let r = bench_loss_scaling::<f32>(&cfg).unwrap();
        assert_eq!(r.points.len(), 4);
        assert!(r.points.iter().all(|p| p.median_s > 0.0 && !p.skipped));
        let cwt = r.find(Objective::HeadlessCwt, 600, 16).unwrap();
        assert!(!cwt.v_dim_seen);
        assert!(r.find(Objective::VanillaCe, 600, 16).unwrap().v_dim_seen);
        assert_eq!(r.to_csv().lines().count(), 5);
        assert_eq!(r.to_jsonl().lines().count(), 4);
    }

    #[test]
    fn budget_skips_instead_of_failing() {
        let cfg = BenchConfig { vocab_sizes: vec![5000], ks: vec![64], d: 16, budget_bytes: 100_000, ..Default::default() };
        let r = bench_loss_scaling::<f32>(&cfg).unwrap();
        assert!(r.find(Objective::VanillaCe, 5000, 64).unwrap().skipped);
        assert!(!r.find(Objective::HeadlessCwt, 5000, 64).unwrap().skipped);
    }

    #[test]
    fn too_few_reps_is_a_config_error() {
        let cfg = BenchConfig { reps: 5, ..Default::default() };
        assert!(matches!(bench_loss_scaling::<f32>(&cfg), Err(crate::HlmError::Config(_))));
    }
}
