//! Learning-rate and weight-decay schedules as pure functions of the step.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PostWarmup {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub policy: PostWarmup,
}

/// Linear ramp from 0 to `base_lr` over the warmup steps, then the
/// post-warmup policy. Cosine decays to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, cfg: &LrSchedule) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.policy {
        PostWarmup::Constant => cfg.base_lr,
        PostWarmup::Cosine => {
            let span = total_steps.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let t = (step - cfg.warmup_steps) as f64 / span;
            cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        }
    }
}

/// Linear interpolation from `start` at step 0 to `end` at step
/// `total_steps − 1`.
pub fn wd_schedule(step: u64, total_steps: u64, start: f64, end: f64) -> f64 {
    if total_steps <= 1 || start == end {
        return start;
    }
    let t = (step.min(total_steps - 1)) as f64 / (total_steps - 1) as f64;
    start * (1.0 - t) + end * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_boundaries() {
        let cfg = LrSchedule {
            base_lr: 0.1,
            warmup_steps: 10,
            policy: PostWarmup::Constant,
        };
        assert_eq!(lr_schedule(0, 100, &cfg), 0.0);
        assert_eq!(lr_schedule(5, 100, &cfg), 0.05);
        assert_eq!(lr_schedule(10, 100, &cfg), 0.1);
        assert_eq!(lr_schedule(99, 100, &cfg), 0.1);
        let cos = LrSchedule {
            policy: PostWarmup::Cosine,
            ..cfg
        };
        assert_eq!(lr_schedule(10, 100, &cos), 0.1);
        assert!(lr_schedule(99, 100, &cos) < 1e-3);
    }

    #[test]
    fn wd_boundaries() {
        assert_eq!(wd_schedule(0, 1000, 1e-7, 1e-6), 1e-7);
        assert_eq!(wd_schedule(999, 1000, 1e-7, 1e-6), 1e-6);
        assert_eq!(wd_schedule(7, 20, 3e-4, 3e-4), 3e-4);
        assert!((wd_schedule(1, 3, 1e-7, 1e-6) - 5.5e-7).abs() < 1e-20);
    }
}
