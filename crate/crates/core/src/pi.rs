//! Log-domain PI/PID control of λ.
//!
//! The loop works on `log λ`: a rate overshoot of 20% and an undershoot of
//! 20% produce errors of equal magnitude regardless of the operating point,
//! and the update `λ ← λ·exp(Δ)` is additive in the log domain.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PiGains {
    fn default() -> Self {
        Self {
            kp: 0.9,
            ki: 0.05,
            kd: 0.0,
        }
    }
}

impl PiGains {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.kp == 0.0 && self.ki == 0.0 && self.kd == 0.0 {
            return Err(invalid("kp", "at least one gain must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Integral clip (anti-windup).
    pub i_max: f64,
    /// Per-frame bound on the log-domain update.
    pub delta_max: f64,
}

impl Default for PiBounds {
    fn default() -> Self {
        Self {
            lambda_min: 32.0,
            lambda_max: 4096.0,
            i_max: 10.0,
            delta_max: 0.30,
        }
    }
}

impl PiBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max && self.lambda_max.is_finite()) {
            return Err(invalid(
                "lambda_min",
                format!(
                    "need 0 < lambda_min < lambda_max, got [{}, {}]",
                    self.lambda_min, self.lambda_max
                ),
            ));
        }
        if !(self.i_max > 0.0 && self.i_max.is_finite()) {
            return Err(invalid("i_max", format!("must be finite and > 0, got {}", self.i_max)));
        }
        if !(self.delta_max > 0.0 && self.delta_max.is_finite()) {
            return Err(invalid(
                "delta_max",
                format!("must be finite and > 0, got {}", self.delta_max),
            ));
        }
        Ok(())
    }

    pub fn clamp_lambda(&self, lambda: f64) -> f64 {
        lambda.clamp(self.lambda_min, self.lambda_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiState {
    pub lambda_base: f64,
    pub integral: f64,
    pub prev_error: f64,
}

impl PiState {
    /// Sequence-start state: `I = 0`, `e = 0`.
    pub fn new(lambda_init: f64, bounds: &PiBounds) -> Self {
        Self {
            lambda_base: bounds.clamp_lambda(lambda_init),
            integral: 0.0,
            prev_error: 0.0,
        }
    }
}

/// `log(rate_actual / rate_target)`.
pub fn log_error(rate_actual: f64, rate_target: f64) -> Result<f64> {
    if !(rate_actual > 0.0 && rate_target > 0.0) {
        return Err(Error::Contract(format!(
            "log_error needs positive rates, got actual={rate_actual} target={rate_target}"
        )));
    }
    Ok((rate_actual / rate_target).ln())
}

/// One controller update. Returns the new state and the clipped log-domain
/// increment that was applied to `lambda_base`.
///
/// Clip order: integral, then increment, then λ. A λ clip does not feed
/// back into the integral.
pub fn pi_step(state: &PiState, gains: &PiGains, bounds: &PiBounds, error: f64) -> (PiState, f64) {
    let integral = (state.integral + error).clamp(-bounds.i_max, bounds.i_max);
    let derivative = error - state.prev_error;
    let raw = -(gains.kp * error + gains.ki * integral + gains.kd * derivative);
    let delta = raw.clamp(-bounds.delta_max, bounds.delta_max);
    let lambda_base = bounds.clamp_lambda(state.lambda_base * delta.exp());
    (
        PiState {
            lambda_base,
            integral,
            prev_error: error,
        },
        delta,
    )
}
