use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest admissible `a_max - a_min`; range updates never collapse below it.
pub const MIN_RANGE_SPAN: f64 = 1e-6;

/// Largest supported activation bitwidth.
pub const MAX_ACT_BITS: u32 = 16;

/// Running range and resolution of one activation quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantState {
    pub a_min: f64,
    pub a_max: f64,
    pub b: u32,
    pub ema_momentum: f64,
}

impl ActQuantState {
    pub fn new(a_min: f64, a_max: f64, b: u32, ema_momentum: f64) -> Result<Self> {
        let s = Self {
            a_min,
            a_max,
            b,
            ema_momentum,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a_min.is_finite() || !self.a_max.is_finite() || self.a_max <= self.a_min {
            return Err(Error::InvalidArgument(format!(
                "activation range must satisfy a_min < a_max, got [{}, {}]",
                self.a_min, self.a_max
            )));
        }
        if !(1..=MAX_ACT_BITS).contains(&self.b) {
            return Err(Error::InvalidArgument(format!(
                "activation bitwidth {} outside 1..={MAX_ACT_BITS}",
                self.b
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidArgument(format!(
                "EMA momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        Ok(())
    }

    /// Number of intervals, `2^b - 1`; also the largest integer code.
    pub fn max_code(&self) -> u32 {
        (1u32 << self.b) - 1
    }

    pub fn delta(&self) -> f64 {
        (self.a_max - self.a_min) / self.max_code() as f64
    }

    /// Grid level `j`; the top level is pinned to `a_max` exactly.
    pub fn level(&self, code: u32) -> f64 {
        if code >= self.max_code() {
            self.a_max
        } else {
            self.a_min + code as f64 * self.delta()
        }
    }

    /// Integer code of the nearest grid level, ties rounded away from zero.
    pub fn code(&self, a: f64) -> u32 {
        let clamped = a.clamp(self.a_min, self.a_max);
        let u = (clamped - self.a_min) / self.delta();
        (u.round() as u32).min(self.max_code())
    }

    /// Same range, different resolution.
    pub fn with_bits(&self, b: u32) -> Result<Self> {
        Self::new(self.a_min, self.a_max, b, self.ema_momentum)
    }

    pub fn soft_params(&self) -> SoftQuantParams {
        SoftQuantParams::from_state(self)
    }

    /// EMA range tracking: `a_min <- m a_min + (1 - m) min(batch)`, same for `a_max`.
    pub fn update_range(&self, batch: &Tensor) -> Result<Self> {
        if batch.numel() == 0 {
            return Err(Error::InvalidArgument("empty activation batch".into()));
        }
        let m = self.ema_momentum;
        let mut next = *self;
        next.a_min = m * self.a_min + (1.0 - m) * batch.min();
        next.a_max = m * self.a_max + (1.0 - m) * batch.max();
        if !next.a_min.is_finite() || !next.a_max.is_finite() {
            return Err(Error::NonFinite("activation range update".into()));
        }
        if next.a_max < next.a_min + MIN_RANGE_SPAN {
            next.a_max = next.a_min + MIN_RANGE_SPAN;
        }
        Ok(next)
    }
}

/// Derived thresholds and scales of the soft multi-bit quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQuantParams {
    /// Transition centres `a_min + (k - 1/2) δ`, `k = 1 ..= 2^b - 1`.
    pub thresholds: Vec<f64>,
    /// Vertical scale of each shifted step, `δ / 2`.
    pub step_scale: f64,
    /// Horizontal half-width of each transition, `δ / 2`.
    pub half_width: f64,
}

impl SoftQuantParams {
    pub fn from_state(s: &ActQuantState) -> Self {
        let delta = s.delta();
        let thresholds = (1..=s.max_code())
            .map(|k| s.a_min + (k as f64 - 0.5) * delta)
            .collect();
        Self {
            thresholds,
            step_scale: 0.5 * delta,
            half_width: 0.5 * delta,
        }
    }
}

/// Piecewise-quadratic stand-in for the Dirac pulse: `-2a² + 5/3` on `|a| <= 1`.
pub fn dirac_approx(a: f64) -> f64 {
    if a.abs() <= 1.0 {
        5.0 / 3.0 - 2.0 * a * a
    } else {
        0.0
    }
}

/// Antiderivative of [`dirac_approx`], a smooth stand-in for `sign`.
pub fn sign_approx(a: f64) -> f64 {
    if a >= 1.0 {
        1.0
    } else if a <= -1.0 {
        -1.0
    } else {
        // odd in `a` bit for bit: `a * a` is sign-free
        a * (5.0 / 3.0 - (2.0 / 3.0) * (a * a))
    }
}

pub fn uniform_quantize(a: f64, s: &ActQuantState) -> f64 {
    s.level(s.code(a))
}

/// Scaled and shifted sum of [`sign_approx`] over every threshold.
///
/// Adjacent transitions abut at grid levels, so at most one term is
/// unsaturated at any point and the result equals the hard quantizer exactly
/// on the grid.
pub fn soft_quantize(a: f64, s: &ActQuantState) -> f64 {
    if a <= s.a_min {
        return s.a_min;
    }
    if a >= s.a_max {
        return s.a_max;
    }
    // grid levels map to themselves exactly, whatever rounding `u` picks up
    let nearest = s.level(s.code(a));
    if nearest == a {
        return a;
    }
    let u = (a - s.a_min) / s.delta();
    let whole = u.floor();
    let frac = u - whole;
    let code = whole as u32;
    if frac == 0.0 {
        return s.level(code);
    }
    let partial = 0.5 * (sign_approx(2.0 * frac - 1.0) + 1.0);
    s.a_min + (whole + partial) * s.delta()
}

/// Exact derivative of [`soft_quantize`] over the transition region: `Σ_k g((a - t_k) / h)`.
pub fn soft_quantize_grad(a: f64, s: &ActQuantState) -> f64 {
    let p = s.soft_params();
    let h = p.half_width;
    let u = (a - s.a_min) / s.delta();
    let n = s.max_code() as i64;
    // only thresholds within one half-width can contribute
    let lo = ((u - 0.5).floor() as i64).max(1);
    let hi = ((u + 1.5).ceil() as i64).min(n);
    let mut g = 0.0;
    for k in lo..=hi {
        g += dirac_approx((a - p.thresholds[(k - 1) as usize]) / h);
    }
    g
}
