use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Start and end of the linear variance (beta) ramp.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Smallest signal coefficient; keeps the final step strictly inside (0, 1].
pub const MIN_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Variance-preserving noise schedule: signal coefficients `alpha_t` and
/// noise coefficients `sigma_t` with `alpha_t^2 + sigma_t^2 = 1`, indexed by
/// timestep `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(timesteps: usize, kind: ScheduleKind) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        let alphas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let mut alpha_bar = 1.0;
                (0..timesteps)
                    .map(|i| {
                        let beta = if timesteps == 1 {
                            LINEAR_BETA_START
                        } else {
                            LINEAR_BETA_START
                                + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64
                                    / (timesteps - 1) as f64
                        };
                        alpha_bar *= 1.0 - beta;
                        alpha_bar.sqrt()
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2).cos();
                let f0 = f(0.0);
                (1..=timesteps)
                    .map(|t| (f(t as f64 / timesteps as f64) / f0).clamp(MIN_ALPHA, 1.0))
                    .collect()
            }
        };
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self {
            kind,
            alphas,
            sigmas,
        })
    }

    /// Builds a schedule from explicit signal coefficients; noise
    /// coefficients follow from variance preservation.
    pub fn from_alphas(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::invalid("signal coefficients must lie in (0, 1]"));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::invalid("signal coefficients must be non-increasing"));
        }
        let sigmas = alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Ok(Self {
            kind,
            alphas,
            sigmas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.alphas.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.alphas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.check(t)?])
    }

    /// `(alpha_t, sigma_t)` for a 1-based timestep.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.check(t)?;
        Ok((self.alphas[i], self.sigmas[i]))
    }
}

pub fn make_schedule(timesteps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(timesteps, kind)
}
