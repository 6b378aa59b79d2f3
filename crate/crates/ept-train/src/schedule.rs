//! Linear warmup / linear decay learning-rate schedule.

use crate::error::{Result, TrainError};

/// Ramp 0 -> peak over `warmup` steps, then decay peak -> 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Result<Self> {
        if !(peak > 0.0) {
            return Err(TrainError::Config(format!("schedule: peak must be > 0, got {peak}")));
        }
        if total == 0 || warmup >= total {
            return Err(TrainError::Config(format!(
                "schedule: need warmup < total, got warmup={warmup} total={total}"
            )));
        }
        Ok(LrSchedule { peak, warmup, total })
    }
}

/// Learning rate at a step in `0..=total`.
pub fn lr_at(step: u64, schedule: &LrSchedule) -> Result<f64> {
    if step > schedule.total {
        return Err(TrainError::Config(format!(
            "lr_at: step {step} beyond total {}",
            schedule.total
        )));
    }
    if schedule.warmup > 0 && step <= schedule.warmup {
        Ok(schedule.peak * step as f64 / schedule.warmup as f64)
    } else {
        let remaining = (schedule.total - step) as f64;
        let span = (schedule.total - schedule.warmup) as f64;
        Ok(schedule.peak * remaining / span)
    }
}
