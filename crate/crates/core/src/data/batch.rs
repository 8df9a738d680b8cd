//! MLM and CLM batch construction.

use rand::Rng;

use super::bpe::{MASK, N_SPECIAL};
use crate::error::{bail, Result};
use crate::rng;

/// A batch of `n` sequences of length `len`, stored row-major.
///
/// `positions` is the supervised set S as (sequence, position) pairs in
/// row-major order; `targets[t]` is the token to predict at `positions[t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub n: usize,
    pub len: usize,
    pub x: Vec<u32>,
    pub x_tilde: Vec<u32>,
    pub positions: Vec<(usize, usize)>,
    pub targets: Vec<u32>,
}

impl Batch {
    /// S as flat row indices `i * len + j`.
    pub fn flat_positions(&self) -> Vec<usize> {
        self.positions.iter().map(|&(i, j)| i * self.len + j).collect()
    }

    pub fn n_supervised(&self) -> usize {
        self.positions.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.n * self.len
    }
}

/// How a selected MLM position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub mask_rate: f64,
    /// Random replacements are drawn uniformly from `[N_SPECIAL, vocab_size)`.
    pub vocab_size: usize,
}

/// MLM batch from the first `n * len` tokens of `tokens`.
///
/// Each position is selected independently with probability `mask_rate`;
/// selected positions become MASK (80%), a random non-special token (10%)
/// or stay unchanged (10%). Targets are always the original tokens.
pub fn make_mlm_batch(tokens: &[u32], n: usize, len: usize, cfg: &MaskConfig, seed: u64) -> Result<Batch> {
    Ok(make_mlm_batch_traced(tokens, n, len, cfg, seed)?.0)
}

/// Like [`make_mlm_batch`], also returning the corruption applied at each position of S.
pub fn make_mlm_batch_traced(
    tokens: &[u32],
    n: usize,
    len: usize,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<(Batch, Vec<Corruption>)> {
    if !(0.0..1.0).contains(&cfg.mask_rate) {
        bail!(Config, "mask_rate must be in [0, 1), got {}", cfg.mask_rate);
    }
    if cfg.vocab_size <= N_SPECIAL as usize {
        bail!(Config, "vocab_size {} leaves no non-special tokens", cfg.vocab_size);
    }
    if n == 0 || len == 0 {
        bail!(Config, "batch dimensions must be positive, got {n}x{len}");
    }
    if tokens.len() < n * len {
        bail!(Data, "need {} tokens for a {n}x{len} batch, stream has {}", n * len, tokens.len());
    }
    let x = tokens[..n * len].to_vec();
    let mut x_tilde = x.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let mut kinds = Vec::new();
    let mut rng = rng::stream(seed, "mlm", 0);
    for (t, &tok) in x.iter().enumerate() {
        if rng.gen::<f64>() >= cfg.mask_rate {
            continue;
        }
        let u: f64 = rng.gen();
        let kind = if u < 0.8 {
            x_tilde[t] = MASK;
            Corruption::Mask
        } else if u < 0.9 {
            x_tilde[t] = rng.gen_range(N_SPECIAL..cfg.vocab_size as u32);
            Corruption::Random
        } else {
            Corruption::Keep
        };
        positions.push((t / len, t % len));
        targets.push(tok);
        kinds.push(kind);
    }
    Ok((Batch { n, len, x, x_tilde, positions, targets }, kinds))
}

/// CLM batch: sequence `i` reads `tokens[i*(len+1) ..][..len]` and predicts the
/// token after each position. S covers every position.
pub fn make_clm_batch(tokens: &[u32], n: usize, len: usize) -> Result<Batch> {
    if n == 0 || len == 0 {
        bail!(Config, "batch dimensions must be positive, got {n}x{len}");
    }
    let stride = len + 1;
    if tokens.len() < n * stride {
        bail!(Data, "need {} tokens for a {n}x{len} causal batch, stream has {}", n * stride, tokens.len());
    }
    let mut x = Vec::with_capacity(n * len);
    let mut targets = Vec::with_capacity(n * len);
    for i in 0..n {
        let w = &tokens[i * stride..(i + 1) * stride];
        x.extend_from_slice(&w[..len]);
        targets.extend_from_slice(&w[1..]);
    }
    let positions = (0..n).flat_map(|i| (0..len).map(move |j| (i, j))).collect();
    Ok(Batch { n, len, x_tilde: x.clone(), x, positions, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: usize) -> Vec<u32> {
        (0..n as u32).map(|i| N_SPECIAL + i % 50).collect()
    }

    const CFG: MaskConfig = MaskConfig { mask_rate: 0.15, vocab_size: 54 };

    #[test]
    fn zero_rate_leaves_input_untouched() {
        let toks = stream(64);
        let b = make_mlm_batch(&toks, 4, 16, &MaskConfig { mask_rate: 0.0, ..CFG }, 3).unwrap();
        assert_eq!(b.x, b.x_tilde);
        assert!(b.positions.is_empty());
    }

    #[test]
    fn mlm_batch_is_deterministic_and_consistent() {
        let toks = stream(512);
        let a = make_mlm_batch(&toks, 8, 64, &CFG, 42).unwrap();
        assert_eq!(a, make_mlm_batch(&toks, 8, 64, &CFG, 42).unwrap());
        assert_ne!(a, make_mlm_batch(&toks, 8, 64, &CFG, 43).unwrap());
        let mut seen = std::collections::HashSet::new();
        for (t, &(i, j)) in a.positions.iter().enumerate() {
            assert!(i < 8 && j < 64 && seen.insert((i, j)));
            assert_eq!(a.targets[t], a.x[i * 64 + j]);
        }
        for k in 0..a.x.len() {
            if !seen.contains(&(k / 64, k % 64)) {
                assert_eq!(a.x[k], a.x_tilde[k]);
                assert_ne!(a.x_tilde[k], MASK);
            }
        }
    }

    #[test]
    fn mlm_rejects_bad_inputs() {
        let toks = stream(10);
        assert!(matches!(make_mlm_batch(&toks, 2, 8, &CFG, 0), Err(crate::HlmError::Data(_))));
        assert!(matches!(make_mlm_batch(&toks, 1, 8, &MaskConfig { mask_rate: 1.0, ..CFG }, 0), Err(crate::HlmError::Config(_))));
    }

    #[test]
    fn clm_shift_by_one() {
        let toks: Vec<u32> = (10..15).collect();
        let b = make_clm_batch(&toks, 1, 4).unwrap();
        assert_eq!(b.x, vec![10, 11, 12, 13]);
        assert_eq!(b.targets, vec![11, 12, 13, 14]);
        assert_eq!(b.x, b.x_tilde);
        assert_eq!(b.n_supervised(), 4);
    }

    #[test]
    fn clm_covers_grid_and_matches_sliding_window_oracle() {
        let toks = stream(10_000);
        let (n, l) = (37, 64);
        let b = make_clm_batch(&toks, n, l).unwrap();
        assert_eq!(b.n_supervised(), n * l);
        for i in 0..n {
            for j in 0..l {
                let t = i * (l + 1) + j;
                assert_eq!(b.x[i * l + j], toks[t]);
                assert_eq!(b.targets[i * l + j], toks[t + 1]);
                assert_eq!(b.positions[i * l + j], (i, j));
            }
        }
        assert!(matches!(make_clm_batch(&toks[..64 * 2], 2, 64), Err(crate::HlmError::Data(_))));
    }
}
