//! Transmittance activation, its gradient estimator, and the clip-threshold
//! annealing schedule.

use serde::{Deserialize, Serialize};

/// How the pre-activation transmittance maps to log-transmittance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlphaActivation {
    /// `log(alpha) = min(0, a)` with the one-sided pass-through estimator.
    #[default]
    ClampedExp,
    /// `log(alpha) = min(0, a)` with the plain subgradient.
    ClampedExpNoEstimator,
    /// `log(alpha) = a`; alpha is unbounded above.
    Unconstrained,
}

/// Which backward rule to apply to `min(0, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaGradRule {
    /// Follow the activation's configured rule.
    Configured,
    /// The exact subgradient of the forward function, for finite-difference
    /// comparisons.
    Exact,
}

/// Forward transmittance: `exp(min(0, a))`.
pub fn transmittance_activation(pre_alpha: f64) -> f64 {
    pre_alpha.min(0.0).exp()
}

/// Backward rule for `min(0, a)` given the incoming gradient `g`.
///
/// * `a <= 0`: pass `g`.
/// * `a > 0`, `g >= 0`: descent pushes `a` down toward the active region; pass `g`.
/// * `a > 0`, `g < 0`: descent would push `a` further up; emit 0.
pub fn clamp_min_backward(pre_alpha: f64, upstream: f64) -> f64 {
    if pre_alpha <= 0.0 || upstream >= 0.0 {
        upstream
    } else {
        0.0
    }
}

impl AlphaActivation {
    pub fn log_alpha(self, pre_alpha: f64) -> f64 {
        match self {
            AlphaActivation::ClampedExp | AlphaActivation::ClampedExpNoEstimator => {
                pre_alpha.min(0.0)
            }
            AlphaActivation::Unconstrained => pre_alpha,
        }
    }

    /// Gradient with respect to the pre-activation given the gradient with
    /// respect to `log(alpha)`.
    pub fn backward(self, pre_alpha: f64, upstream: f64, rule: AlphaGradRule) -> f64 {
        match (self, rule) {
            (AlphaActivation::Unconstrained, _) => upstream,
            (AlphaActivation::ClampedExp, AlphaGradRule::Configured) => {
                clamp_min_backward(pre_alpha, upstream)
            }
            _ => {
                if pre_alpha < 0.0 {
                    upstream
                } else {
                    0.0
                }
            }
        }
    }
}

/// Piecewise-linear clip threshold: -1 at step 0, 0 at step 100, 0.05 from
/// step 600 on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnealSchedule {
    pub start_value: f64,
    pub mid_value: f64,
    pub mid_step: u64,
    pub end_value: f64,
    pub end_step: u64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            start_value: -1.0,
            mid_value: 0.0,
            mid_step: 100,
            end_value: 0.05,
            end_step: 600,
        }
    }
}

impl AnnealSchedule {
    /// A schedule that never clips.
    pub fn disabled() -> Self {
        Self {
            start_value: f64::NEG_INFINITY,
            mid_value: f64::NEG_INFINITY,
            mid_step: 0,
            end_value: f64::NEG_INFINITY,
            end_step: 0,
        }
    }

    pub fn threshold(&self, step: u64) -> f64 {
        if step >= self.end_step {
            self.end_value
        } else if step >= self.mid_step {
            let t = (step - self.mid_step) as f64 / (self.end_step - self.mid_step) as f64;
            self.mid_value + t * (self.end_value - self.mid_value)
        } else {
            let t = step as f64 / self.mid_step as f64;
            self.start_value + t * (self.mid_value - self.start_value)
        }
    }
}
