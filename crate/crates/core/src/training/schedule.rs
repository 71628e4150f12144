use crate::error::{bail, Result};

/// Linear warmup to `peak_lr`, then cosine decay to `floor_lr` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl ScheduleConfig {
    /// Warmup covering `warmup_fraction` of the run (rounded down).
    pub fn with_warmup_fraction(total_steps: u64, warmup_fraction: f64, peak_lr: f64, floor_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_fraction) {
            bail!(Config, "warmup fraction must lie in [0, 1), got {warmup_fraction}");
        }
        let warmup_steps = libm::floor(total_steps as f64 * warmup_fraction) as u64;
        let cfg = Self { warmup_steps, total_steps, peak_lr, floor_lr };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            bail!(Config, "warmup ({}) must be shorter than the run ({})", self.warmup_steps, self.total_steps);
        }
        if !(self.floor_lr >= 0.0) || !(self.floor_lr <= self.peak_lr) || !self.peak_lr.is_finite() {
            bail!(Config, "need 0 <= floor_lr <= peak_lr, got {} / {}", self.floor_lr, self.peak_lr);
        }
        Ok(())
    }
}

/// Learning rate at `step` in `0..=total_steps`.
pub fn lr_at_step(sched: &ScheduleConfig, step: u64) -> Result<f64> {
    sched.validate()?;
    if step > sched.total_steps {
        bail!(Contract, "step {step} beyond schedule end {}", sched.total_steps);
    }
    let ScheduleConfig { warmup_steps, total_steps, peak_lr, floor_lr } = *sched;
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if step == warmup_steps {
        return Ok(peak_lr);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    let cosine = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
    Ok(floor_lr + (peak_lr - floor_lr) * cosine)
}
