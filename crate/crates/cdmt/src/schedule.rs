//! Diffusion noise schedules.
//!
//! A schedule fixes `beta[t]` (per-step uniform-noise probability) for
//! `t = 1..=T` and carries the derived `alpha[t] = 1 - beta[t]` and
//! `alpha_bar[t] = prod_{tau<=t} alpha[tau]`. `alpha_bar` is stored as the
//! running product of the stored alphas, so the recurrence
//! `alpha_bar[t] = alpha_bar[t-1] * alpha[t]` holds exactly.

use crate::error::{Error, Result};

/// Largest admissible per-step noise probability for generated schedules.
/// Keeps `alpha_bar` strictly positive so the posterior stays well-defined.
pub const BETA_CLIP: f64 = 0.999;

/// Offset in the cosine alpha-bar curve.
pub const COSINE_S: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `alpha_bar(t) = f(t)/f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
    /// betas clipped to `(0, BETA_CLIP]`.
    Cosine,
    /// Beta interpolated linearly from `beta_start` to `beta_end` over `t = 1..=T`.
    LinearBeta { beta_start: f64, beta_end: f64 },
}

impl ScheduleKind {
    /// Parse a config string. `linear` scales the classic 1e-4..0.02 endpoints
    /// (tuned for T=1000) by `1000/T` so that `alpha_bar[T]` stays near zero
    /// for any T.
    pub fn parse(s: &str, t_steps: usize) -> Result<ScheduleKind> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => {
                let scale = 1000.0 / t_steps.max(1) as f64;
                Ok(ScheduleKind::LinearBeta {
                    beta_start: (1e-4 * scale).min(BETA_CLIP),
                    beta_end: (0.02 * scale).min(BETA_CLIP),
                })
            }
            other => Err(Error::UnknownScheduleKind(other.to_string())),
        }
    }
}

/// Precomputed `beta`, `alpha`, `alpha_bar` for `t = 1..=T`.
///
/// Immutable after construction. Indexing is 1-based through the accessors;
/// `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build a schedule of the given kind with `t_steps >= 1` steps.
    pub fn build(kind: ScheduleKind, t_steps: usize) -> Result<NoiseSchedule> {
        if t_steps == 0 {
            return Err(Error::InvalidArg("schedule needs T >= 1".into()));
        }
        let betas = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = ((t / t_steps as f64 + COSINE_S) / (1.0 + COSINE_S))
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_steps)
                    .map(|t| {
                        let bar = f(t as f64) / f0;
                        let beta = (1.0 - bar / prev).clamp(f64::MIN_POSITIVE, BETA_CLIP);
                        prev *= 1.0 - beta;
                        beta
                    })
                    .collect()
            }
            ScheduleKind::LinearBeta {
                beta_start,
                beta_end,
            } => {
                if !(0.0..=1.0).contains(&beta_start) || !(0.0..=1.0).contains(&beta_end) {
                    return Err(Error::InvalidArg(format!(
                        "linear beta endpoints must lie in [0,1], got {beta_start}..{beta_end}"
                    )));
                }
                if t_steps == 1 {
                    vec![beta_start]
                } else {
                    let step = (beta_end - beta_start) / (t_steps - 1) as f64;
                    (0..t_steps).map(|i| beta_start + step * i as f64).collect()
                }
            }
        };
        Self::from_betas(betas)
    }

    /// Build directly from explicit per-step betas (each in `[0, 1]`).
    pub fn from_betas(beta: Vec<f64>) -> Result<NoiseSchedule> {
        if beta.is_empty() {
            return Err(Error::InvalidArg("schedule needs T >= 1".into()));
        }
        if beta.iter().any(|b| !(0.0..=1.0).contains(b) || !b.is_finite()) {
            return Err(Error::InvalidArg("betas must lie in [0, 1]".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_steps(),
            });
        }
        Ok(())
    }

    /// `beta[t]`, `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    /// `alpha[t] = 1 - beta[t]`, `t` in `1..=T`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `alpha_bar[t]`, `t` in `0..=T`, with `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_linear_schedule_keeps_alpha_bar_at_one() {
        let s = NoiseSchedule::build(
            ScheduleKind::LinearBeta {
                beta_start: 0.0,
                beta_end: 0.0,
            },
            5,
        )
        .unwrap();
        for t in 1..=5 {
            assert_eq!(s.alpha_bar(t).unwrap(), 1.0);
        }
    }

    #[test]
    fn single_fully_noising_step() {
        let s = NoiseSchedule::from_betas(vec![1.0]).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_independent_formula_evaluation() {
        // Oracle: evaluate the cosine alpha-bar curve directly and apply the
        // same clipping rule, organized differently from the implementation
        // (full f vector up front, then a separate clip/cumprod pass).
        let t_steps = 100;
        let s = NoiseSchedule::build(ScheduleKind::Cosine, t_steps).unwrap();

        let f: Vec<f64> = (0..=t_steps)
            .map(|t| {
                ((t as f64 / t_steps as f64 + 0.008) / 1.008 * std::f64::consts::PI / 2.0)
                    .cos()
                    .powi(2)
            })
            .collect();
        let mut bar_prev = 1.0;
        for t in 1..=t_steps {
            let raw_beta = 1.0 - (f[t] / f[0]) / bar_prev;
            let beta = raw_beta.clamp(f64::MIN_POSITIVE, 0.999);
            let bar = bar_prev * (1.0 - beta);
            assert!(
                (s.beta(t).unwrap() - beta).abs() <= 1e-12,
                "beta mismatch at t={t}"
            );
            assert!(
                (s.alpha_bar(t).unwrap() - bar).abs() <= 1e-12,
                "alpha_bar mismatch at t={t}"
            );
            bar_prev = bar;
        }

        assert!(s.alpha_bar(t_steps).unwrap() <= 1e-2);
        for t in 1..t_steps {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
    }

    #[test]
    fn recurrence_is_exact() {
        for kind in [
            ScheduleKind::Cosine,
            ScheduleKind::LinearBeta {
                beta_start: 0.001,
                beta_end: 0.2,
            },
        ] {
            let s = NoiseSchedule::build(kind, 64).unwrap();
            for t in 1..=64 {
                let lhs = s.alpha_bar(t).unwrap();
                let rhs = s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_t_zero_and_unknown_kind() {
        assert!(NoiseSchedule::build(ScheduleKind::Cosine, 0).is_err());
        assert!(matches!(
            ScheduleKind::parse("quadratic", 10),
            Err(Error::UnknownScheduleKind(_))
        ));
    }

    #[test]
    fn linear_parse_scales_to_t() {
        let kind = ScheduleKind::parse("linear", 100).unwrap();
        let s = NoiseSchedule::build(kind, 100).unwrap();
        assert!(s.alpha_bar(100).unwrap() <= 1e-2);
        let kind = ScheduleKind::parse("linear", 1000).unwrap();
        let s = NoiseSchedule::build(kind, 1000).unwrap();
        assert!(s.alpha_bar(1000).unwrap() <= 1e-2);
    }

    #[test]
    fn step_accessors_enforce_range() {
        let s = NoiseSchedule::build(ScheduleKind::Cosine, 10).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
        assert!(s.alpha_bar(0).is_ok());
        assert!(s.alpha_bar(11).is_err());
    }
}
