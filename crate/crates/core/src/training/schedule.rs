use std::f64::consts::PI;

use super::config::Schedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: Schedule,
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// Learning rate for update `step` (0-based): linear warmup from 0 to
    /// `peak`, then the chosen decay, reaching 0 at `total_steps` for
    /// triangular and cosine.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        let progress = if span == 0 { 1.0 } else { ((step - self.warmup_steps) as f64 / span as f64).min(1.0) };
        match self.kind {
            Schedule::Constant => self.peak,
            Schedule::Triangular => self.peak * (1.0 - progress),
            Schedule::Cosine => self.peak * 0.5 * (1.0 + (PI * progress).cos()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(kind: Schedule) -> LrSchedule {
        LrSchedule { kind, peak: 1e-3, warmup_steps: 100, total_steps: 1100 }
    }

    #[test]
    fn endpoints() {
        for kind in [Schedule::Triangular, Schedule::Cosine, Schedule::Constant] {
            let s = sched(kind);
            assert_eq!(s.lr_at(0), 0.0);
            assert_eq!(s.lr_at(100), 1e-3);
            assert!((s.lr_at(50) - 5e-4).abs() < 1e-18);
        }
        assert_eq!(sched(Schedule::Triangular).lr_at(1100), 0.0);
        assert!(sched(Schedule::Cosine).lr_at(1100).abs() < 1e-18);
        assert_eq!(sched(Schedule::Constant).lr_at(1100), 1e-3);
    }

    #[test]
    fn cosine_midpoint_is_half_peak() {
        assert!((sched(Schedule::Cosine).lr_at(600) - 5e-4).abs() < 1e-12);
        assert!((sched(Schedule::Triangular).lr_at(600) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let s = LrSchedule { kind: Schedule::Triangular, peak: 2.0, warmup_steps: 0, total_steps: 4 };
        assert_eq!(s.lr_at(0), 2.0);
        assert_eq!(s.lr_at(2), 1.0);
        let s = LrSchedule { warmup_steps: 4, ..s };
        assert_eq!(s.lr_at(4), 0.0);
    }
}
