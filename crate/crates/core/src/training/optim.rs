//! AdamW with decoupled weight decay and global-norm clipping.

use crate::error::{bail, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Moments mirror the parameter shapes; `step` counts applied updates.
#[derive(Debug, Clone)]
pub struct AdamW<T: Element> {
    pub hp: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Element>(grads: &mut [Vec<T>], max_norm: f64) -> (f64, bool) {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let coef = T::from_f64(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x = *x * coef);
        }
        return (norm, true);
    }
    (norm, false)
}

pub fn global_norm<T: Element>(grads: &[Vec<T>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

impl<T: Element> AdamW<T> {
    pub fn new(hp: AdamWConfig, params: &[&Tensor<T>]) -> Result<Self> {
        let zeros = |t: &&Tensor<T>| Tensor::zeros(t.shape());
        Ok(AdamW {
            hp,
            step: 0,
            m: params.iter().map(zeros).collect::<Result<_>>()?,
            v: params.iter().map(zeros).collect::<Result<_>>()?,
        })
    }

    /// One update. `decay[i]` selects which parameters receive weight decay.
    ///
    /// Non-finite gradients abort before anything changes.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &mut [Vec<T>], decay: &[bool], lr: f64) -> Result<StepInfo> {
        if params.len() != self.m.len() || grads.len() != params.len() || decay.len() != params.len() {
            bail!(Shape, "optimizer holds {} tensors, got {} params / {} grads", self.m.len(), params.len(), grads.len());
        }
        for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
            if p.numel() != g.len() || p.shape() != self.m[i].shape() {
                bail!(Shape, "parameter {i}: shape {:?} with {} gradient entries", p.shape(), g.len());
            }
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            bail!(Numeric, "non-finite gradient in parameter {i}; step {} not applied", self.step);
        }
        let (grad_norm, clipped) = clip_global_norm(grads, self.hp.clip_norm);
        self.step += 1;
        let AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay: wd, .. } = self.hp;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (i, p) in params.iter_mut().enumerate() {
            let shrink = if decay[i] { 1.0 - lr * wd } else { 1.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i][j].to_f64();
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let theta = pd[j].to_f64() * shrink;
                pd[j] = T::from_f64(theta - lr * (mj / bc1) / ((vj / bc2).sqrt() + eps));
            }
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![x]).unwrap()
    }

    #[test]
    fn decay_only_path() {
        let hp = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = AdamW::new(hp, &[&p]).unwrap();
        let mut g = vec![vec![0.0; 3]];
        opt.update(&mut [&mut p], &mut g, &[true], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 * (1.0 - 0.001), -2.0 * (1.0 - 0.001), 0.5 * (1.0 - 0.001)]);
        assert!(opt.m[0].data().iter().chain(opt.v[0].data()).all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g0 in [3.7, -0.02, 1e3] {
            let mut p = one(1.0);
            let mut opt = AdamW::new(AdamWConfig::default(), &[&p]).unwrap();
            opt.update(&mut [&mut p], &mut [vec![g0]], &[false], 0.01).unwrap();
            assert!((p.data()[0] - (1.0 - 0.01 * f64::signum(g0))).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let hp = AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, clip_norm: 0.0 };
        let mut p = one(0.8);
        let mut opt = AdamW::new(hp, &[&p]).unwrap();
        let (mut theta, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        let mut max_diff = 0.0f64;
        for t in 1..=100 {
            let g = (t as f64 * 0.37).sin() + 0.3 * theta;
            let lr = 0.01 * (1.0 + (t % 7) as f64) / 7.0;
            opt.update(&mut [&mut p], &mut [vec![g]], &[true], lr).unwrap();
            theta -= lr * 0.1 * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            max_diff = max_diff.max((theta - p.data()[0]).abs());
        }
        assert!(max_diff < 1e-12, "{max_diff}");
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f64, 4.0], vec![12.0]];
        let (norm, clipped) = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 13.0);
        assert!(clipped);
        assert!(global_norm(&g) <= 1.0 + 1e-6);
        let mut small = vec![vec![0.1f64]];
        assert!(!clip_global_norm(&mut small, 1.0).1);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]).unwrap();
        let err = opt.update(&mut [&mut p], &mut [vec![f64::NAN]], &[true], 0.1).unwrap_err();
        assert!(matches!(err, crate::HlmError::Numeric(_)));
        assert_eq!(opt.step, 0);
        assert_eq!(p.data(), &[1.0]);
    }
}
