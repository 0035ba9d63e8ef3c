//! Reward models: intermediate running rewards `r_t(x)` with unbiased noisy
//! observation, exact terminal rewards `y(x)`, and the policy-preserving
//! rescaling onto the normalized bounds `R in [-r_max - 1, -1]`, `|y| <= 1`.

use crate::diffusion::{hex_prefix, DiffusionSpec};
use crate::fnclass::ValueModel;
use crate::{Error, Result};
use nalgebra::DVector;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::sync::Arc;

/// Mean intermediate reward `r_t(x)`.
#[derive(Clone)]
pub enum IntermediateReward {
    Constant { value: f64 },
    /// `r(x) = slope . x + intercept` (time-independent).
    Affine { slope: Vec<f64>, intercept: f64 },
    /// Reverse-engineered from a positive reference solution:
    /// `r = -(dt f + A f) / (alpha f)`, so `f` solves the linear PDE exactly.
    Manufactured {
        fstar: Arc<ValueModel>,
        diff: Arc<DiffusionSpec>,
        alpha: f64,
    },
    /// `scale * r + shift` of a base reward (rescaling support).
    Transformed {
        base: Box<IntermediateReward>,
        scale: f64,
        shift: f64,
    },
}

impl IntermediateReward {
    pub fn mean(&self, t: f64, x: &[f64]) -> Result<f64> {
        match self {
            IntermediateReward::Constant { value } => Ok(*value),
            IntermediateReward::Affine { slope, intercept } => {
                Ok(slope.iter().zip(x).map(|(s, xi)| s * xi).sum::<f64>() + intercept)
            }
            IntermediateReward::Manufactured { fstar, diff, alpha } => {
                let f = fstar.eval(t, x);
                if !(f > 0.0) {
                    return Err(Error::NonPositiveValue {
                        t,
                        x: x.to_vec(),
                        value: f,
                    });
                }
                let dt = fstar.dt(t, x);
                let grad = fstar.grad_x(t, x);
                let hess = fstar.hess_x(t, x);
                let af = diff.generator_apply(t, &DVector::from_column_slice(x), &grad, &hess)?;
                Ok(-(dt + af) / (alpha * f))
            }
            IntermediateReward::Transformed { base, scale, shift } => {
                Ok(scale * base.mean(t, x)? + shift)
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            IntermediateReward::Constant { value } => format!("const({value:e})"),
            IntermediateReward::Affine { slope, intercept } => {
                format!("affine({slope:?},{intercept:e})")
            }
            IntermediateReward::Manufactured { fstar, alpha, .. } => {
                format!("manufactured(f={},alpha={alpha:e})", fstar.digest())
            }
            IntermediateReward::Transformed { base, scale, shift } => {
                format!("transformed({},{scale:e},{shift:e})", base.describe())
            }
        }
    }
}

/// Terminal reward `y(x)`, observed exactly.
#[derive(Clone)]
pub enum TerminalReward {
    /// `y(x) = c . x`.
    Linear { c: Vec<f64> },
    /// `y(x) = alpha * log f(T, x)` (manufactured problems).
    LogModel { fstar: Arc<ValueModel>, alpha: f64 },
    /// `scale * y` of a base reward.
    Scaled { base: Box<TerminalReward>, scale: f64 },
}

impl TerminalReward {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        match self {
            TerminalReward::Linear { c } => {
                Ok(c.iter().zip(x).map(|(ci, xi)| ci * xi).sum())
            }
            TerminalReward::LogModel { fstar, alpha } => {
                let t = fstar.basis.horizon;
                let f = fstar.eval(t, x);
                if !(f > 0.0) {
                    return Err(Error::NonPositiveValue {
                        t,
                        x: x.to_vec(),
                        value: f,
                    });
                }
                Ok(alpha * f.ln())
            }
            TerminalReward::Scaled { base, scale } => Ok(scale * base.eval(x)?),
        }
    }

    fn describe(&self) -> String {
        match self {
            TerminalReward::Linear { c } => format!("linear({c:?})"),
            TerminalReward::LogModel { fstar, alpha } => {
                format!("logmodel(f={},alpha={alpha:e})", fstar.digest())
            }
            TerminalReward::Scaled { base, scale } => {
                format!("scaled({},{scale:e})", base.describe())
            }
        }
    }
}

/// Mean-preserving observation noise for intermediate rewards.
#[derive(Clone, Debug)]
pub enum NoiseModel {
    None,
    /// `R = r + Unif[-half_width, half_width]`.
    BoundedUniform { half_width: f64 },
    /// `R = r ± spread` with probability 1/2 each.
    TwoPoint { spread: f64 },
}

impl NoiseModel {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseModel::None => 0.0,
            NoiseModel::BoundedUniform { half_width } => rng.gen_range(-half_width..=*half_width),
            NoiseModel::TwoPoint { spread } => {
                if rng.gen::<bool>() {
                    *spread
                } else {
                    -spread
                }
            }
        }
    }

    fn scaled(&self, scale: f64) -> NoiseModel {
        match self {
            NoiseModel::None => NoiseModel::None,
            NoiseModel::BoundedUniform { half_width } => NoiseModel::BoundedUniform {
                half_width: half_width * scale,
            },
            NoiseModel::TwoPoint { spread } => NoiseModel::TwoPoint {
                spread: spread * scale,
            },
        }
    }

    fn describe(&self) -> String {
        match self {
            NoiseModel::None => "none".to_string(),
            NoiseModel::BoundedUniform { half_width } => format!("uniform({half_width:e})"),
            NoiseModel::TwoPoint { spread } => format!("twopoint({spread:e})"),
        }
    }
}

/// Intermediate + terminal reward models with observation noise and bound
/// bookkeeping.
#[derive(Clone)]
pub struct RewardSpec {
    pub intermediate: IntermediateReward,
    pub terminal: TerminalReward,
    pub noise: NoiseModel,
    /// Bound parameter of the normalized contract `R in [-r_max - 1, -1]`.
    pub r_max: f64,
    /// Bound on raw reward observations and `|y|` before rescaling.
    pub bound_b: f64,
    /// Sampled rewards are certified to satisfy the normalized bounds.
    pub normalized: bool,
    /// Manufactured mode: `r` may fall outside the normalized bounds; the
    /// bound check is bypassed and this flag is surfaced in reports.
    pub manufactured: bool,
}

impl RewardSpec {
    /// Draws one unbiased observation `R` of `r_t(x)`.
    ///
    /// In normalized mode any draw outside `[-r_max - 1, -1]` is a data
    /// contract breach and errors out.
    pub fn sample_intermediate(&self, t: f64, x: &[f64], rng: &mut impl Rng) -> Result<f64> {
        let r = self.intermediate.mean(t, x)? + self.noise.sample(rng);
        if self.normalized && !self.manufactured {
            let (lo, hi) = (-self.r_max - 1.0, -1.0);
            if r < lo - 1e-12 || r > hi + 1e-12 {
                return Err(Error::RewardBoundViolation {
                    value: r,
                    t,
                    lo,
                    hi,
                });
            }
        }
        Ok(r)
    }

    /// Evaluates the exact terminal reward `y(x)`.
    pub fn terminal_eval(&self, x: &[f64]) -> Result<f64> {
        self.terminal.eval(x)
    }

    /// Policy-preserving normalization: with raw bounds `|R|, |y| <= B`,
    /// returns the rescaled problem
    /// `r~ = r/(2B) - 3/2`, `y~ = y/(2B)`, `alpha~ = alpha/(2B)`
    /// with `r_max = 1` and the normalized flag set. The transformed value
    /// function is a scaled copy of the original up to a deterministic shift
    /// in `t`, so the optimal policy is unchanged.
    pub fn rescale_problem(&self, alpha: f64) -> Result<(RewardSpec, f64)> {
        if !(self.bound_b > 0.0) {
            return Err(Error::InvalidParameter(
                "rescale_problem requires a positive raw bound B".into(),
            ));
        }
        let scale = 1.0 / (2.0 * self.bound_b);
        let spec = RewardSpec {
            intermediate: IntermediateReward::Transformed {
                base: Box::new(self.intermediate.clone()),
                scale,
                shift: -1.5,
            },
            terminal: TerminalReward::Scaled {
                base: Box::new(self.terminal.clone()),
                scale,
            },
            noise: self.noise.scaled(scale),
            r_max: 1.0,
            bound_b: 0.5,
            normalized: true,
            manufactured: self.manufactured,
        };
        Ok((spec, alpha * scale))
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "rewards:r={};y={};noise={};r_max={:e};B={:e};norm={};manu={}",
            self.intermediate.describe(),
            self.terminal.describe(),
            self.noise.describe(),
            self.r_max,
            self.bound_b,
            self.normalized,
            self.manufactured
        ));
        hex_prefix(&h.finalize())
    }
}

/// Convenience constructor: constant `r`, linear `y`, optional noise.
pub fn simple_reward(
    r_value: f64,
    y_slope: Vec<f64>,
    noise: NoiseModel,
    r_max: f64,
    normalized: bool,
) -> RewardSpec {
    RewardSpec {
        intermediate: IntermediateReward::Constant { value: r_value },
        terminal: TerminalReward::Linear { c: y_slope },
        noise,
        r_max,
        bound_b: 1.0,
        normalized,
        manufactured: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    #[test]
    fn constant_reward_without_noise() {
        let spec = simple_reward(-1.0, vec![0.0], NoiseModel::None, 1.0, true);
        let mut r = rng::stream(1, rng::tag::REWARD_NOISE, 0);
        for _ in 0..10 {
            assert_eq!(spec.sample_intermediate(0.3, &[1.0], &mut r).unwrap(), -1.0);
        }
    }

    #[test]
    fn two_point_noise_mean_and_support() {
        let spec = RewardSpec {
            intermediate: IntermediateReward::Constant { value: -1.5 },
            noise: NoiseModel::TwoPoint { spread: 0.5 },
            ..simple_reward(-1.5, vec![0.0], NoiseModel::None, 1.0, true)
        };
        let mut r = rng::stream(2, rng::tag::REWARD_NOISE, 0);
        let n = 40_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let v = spec.sample_intermediate(0.1, &[0.0], &mut r).unwrap();
            assert!(v == -2.0 || v == -1.0);
            sum += v;
        }
        let mean = sum / n as f64;
        // Var of a two-point ±0.5 draw is 0.25, stderr = 0.5/sqrt(n).
        assert!((mean + 1.5).abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn normalized_bound_is_enforced() {
        let spec = simple_reward(-1.0, vec![0.0], NoiseModel::None, 1.0, true);
        let mut r = rng::stream(3, rng::tag::REWARD_NOISE, 0);
        for _ in 0..10_000 {
            let v = spec.sample_intermediate(0.2, &[0.0], &mut r).unwrap();
            assert!((-2.0..=-1.0).contains(&v));
        }
        // A mean outside the band is a hard error.
        let bad = simple_reward(0.5, vec![0.0], NoiseModel::None, 1.0, true);
        assert!(matches!(
            bad.sample_intermediate(0.0, &[0.0], &mut r),
            Err(Error::RewardBoundViolation { .. })
        ));
    }

    #[test]
    fn terminal_linear_examples() {
        let spec = simple_reward(-1.0, vec![0.0], NoiseModel::None, 1.0, true);
        assert_eq!(spec.terminal_eval(&[3.0]).unwrap(), 0.0);
        let spec = simple_reward(-1.0, vec![0.5], NoiseModel::None, 1.0, true);
        assert_relative_eq!(spec.terminal_eval(&[1.0]).unwrap(), 0.5);
    }

    #[test]
    fn rescale_formulas() {
        // B = 1, r = 0, y = x/2, alpha = 1 -> r~ = -1.5, y~ = x/4, alpha~ = 0.5.
        let raw = RewardSpec {
            bound_b: 1.0,
            normalized: false,
            ..simple_reward(0.0, vec![0.5], NoiseModel::None, 1.0, false)
        };
        let (scaled, alpha_new) = raw.rescale_problem(1.0).unwrap();
        assert_relative_eq!(alpha_new, 0.5);
        assert_relative_eq!(scaled.intermediate.mean(0.3, &[2.0]).unwrap(), -1.5);
        assert_relative_eq!(scaled.terminal_eval(&[1.0]).unwrap(), 0.25);
        assert!(scaled.normalized);
        assert_relative_eq!(scaled.r_max, 1.0);

        // alpha~/alpha = y~/y for y != 0 (both are 1/(2B)).
        let ratio = scaled.terminal_eval(&[1.0]).unwrap() / raw.terminal_eval(&[1.0]).unwrap();
        assert_relative_eq!(alpha_new / 1.0, ratio);
    }

    #[test]
    fn rescaled_band_by_interval_arithmetic() {
        // r in [-B, B] maps into [-2, -1].
        let b = 3.7;
        for r_val in [-b, -1.0, 0.0, 2.5, b] {
            let raw = RewardSpec {
                bound_b: b,
                normalized: false,
                ..simple_reward(r_val, vec![0.0], NoiseModel::None, 1.0, false)
            };
            let (scaled, _) = raw.rescale_problem(1.0).unwrap();
            let v = scaled.intermediate.mean(0.0, &[0.0]).unwrap();
            assert!((-2.0..=-1.0).contains(&v), "r={r_val} -> {v}");
        }
    }

    #[test]
    fn grouped_mean_unbiasedness() {
        // z-test at 4 sigma over 20 probe cells for the uniform noise model.
        let spec = RewardSpec {
            noise: NoiseModel::BoundedUniform { half_width: 0.4 },
            ..simple_reward(-1.5, vec![0.0], NoiseModel::None, 1.0, true)
        };
        let per_cell = 4000;
        let sd = 0.4 / (3.0f64).sqrt();
        for cell in 0..20u64 {
            let mut r = rng::stream(17, rng::tag::REWARD_NOISE, cell);
            let t = cell as f64 / 20.0;
            let x = [cell as f64 * 0.1 - 1.0];
            let mean: f64 = (0..per_cell)
                .map(|_| spec.sample_intermediate(t, &x, &mut r).unwrap())
                .sum::<f64>()
                / per_cell as f64;
            let z = (mean + 1.5) / (sd / (per_cell as f64).sqrt());
            assert!(z.abs() < 4.0, "cell {cell}: z={z}");
        }
    }
}
