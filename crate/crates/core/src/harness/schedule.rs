use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Linear warmup to the peak learning rate, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            warmup_steps: 100,
            total_steps: 1000,
            peak_lr: 1e-3,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("schedule.total_steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "schedule.warmup_steps {} exceeds schedule.total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::config("schedule.peak_lr must be positive"));
        }
        Ok(())
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr(&self, t: u64) -> Result<f64> {
        Ok(self.peak_lr * lr_multiplier(t, self)?)
    }
}

/// Schedule multiplier `λₜ ∈ [0, 1]` for 1-based step `t`.
///
/// ```
/// use outlierlab::harness::{lr_multiplier, Schedule};
/// let s = Schedule { warmup_steps: 10, total_steps: 110, peak_lr: 1e-3 };
/// assert_eq!(lr_multiplier(5, &s).unwrap(), 0.5);
/// assert_eq!(lr_multiplier(10, &s).unwrap(), 1.0);
/// assert!((lr_multiplier(60, &s).unwrap() - 0.5).abs() < 1e-15);
/// assert!(lr_multiplier(110, &s).unwrap() < 1e-15);
/// assert!(lr_multiplier(0, &s).is_err());
/// ```
pub fn lr_multiplier(t: u64, schedule: &Schedule) -> Result<f64> {
    let Schedule {
        warmup_steps: w,
        total_steps: n,
        ..
    } = *schedule;
    if t == 0 || t > n {
        return Err(Error::config(format!("step {t} outside 1..={n}")));
    }
    if t <= w {
        return Ok(t as f64 / w as f64);
    }
    let progress = (t - w) as f64 / (n - w) as f64;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_monotone_around_the_peak() {
        let s = Schedule {
            warmup_steps: 20,
            total_steps: 200,
            peak_lr: 1.0,
        };
        let lam: Vec<f64> = (1..=200).map(|t| lr_multiplier(t, &s).unwrap()).collect();
        assert!(lam[..20].windows(2).all(|w| w[0] <= w[1]));
        assert!(lam[19..].windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(lam[19], 1.0);
        // continuity at the peak: the first decay step is within one cosine increment
        assert!(1.0 - lam[20] < 1e-3);
        assert!(lam[199].abs() < 1e-15);
    }

    #[test]
    fn no_warmup() {
        let s = Schedule {
            warmup_steps: 0,
            total_steps: 4,
            peak_lr: 1.0,
        };
        assert!((lr_multiplier(2, &s).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let s = Schedule {
            warmup_steps: 5,
            total_steps: 4,
            peak_lr: 1.0,
        };
        assert!(s.validate().is_err());
        assert!(lr_multiplier(5, &Schedule::default()).is_ok());
        assert!(lr_multiplier(1001, &Schedule::default()).is_err());
    }
}
