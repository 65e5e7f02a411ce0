use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Parameters that fully determine a linear schedule; this is what
/// checkpoints store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

/// Linear β schedule with precomputed `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s`.
/// Timesteps are 1-based: `t ∈ 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_spec(ScheduleSpec {
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            beta_start,
            beta_end,
        } = spec;
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start ≤ beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|i| beta_start + span * i as f64).collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            spec,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Precondition(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vector> {
        self.check_step(t)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape {
                context: "forward_noise eps",
                expected: x0.len(),
                found: eps.len(),
            });
        }
        Ok(noise_with(self.alpha_bar(t), x0, eps))
    }
}

#[inline]
pub(crate) fn noise_with(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Vector {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}
