use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature and scale of the tanh-shaped straight-through estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteParams {
    pub t: f64,
    pub alpha: f64,
}

impl SteParams {
    pub fn new(t: f64, alpha: f64) -> Result<Self> {
        let p = Self { t, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) || !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "STE parameters must be finite and positive, got t={}, alpha={}",
                self.t, self.alpha
            )));
        }
        Ok(())
    }
}

impl Default for SteParams {
    fn default() -> Self {
        Self { t: 1.0, alpha: 1.0 }
    }
}

/// `alpha * (1 - tanh^2(w t))` inside `|w| <= 1`, zero outside.
pub fn ste_grad_factor(w: f64, p: SteParams) -> f64 {
    if w.abs() <= 1.0 {
        let th = (w * p.t).tanh();
        p.alpha * (1.0 - th * th)
    } else {
        0.0
    }
}

/// Linear temperature annealing from `t_start` to `t_end` over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteSchedule {
    pub alpha: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for SteSchedule {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            t_start: 1.0,
            t_end: 10.0,
        }
    }
}

impl SteSchedule {
    /// Parameters at training progress `p` in `[0, 1]`.
    pub fn at(&self, progress: f64) -> SteParams {
        let p = progress.clamp(0.0, 1.0);
        SteParams {
            t: self.t_start + (self.t_end - self.t_start) * p,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SteParams::new(self.t_start, self.alpha)?;
        SteParams::new(self.t_end, self.alpha)?;
        Ok(())
    }
}
