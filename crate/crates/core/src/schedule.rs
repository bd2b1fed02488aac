//! Noise schedules for the forward and reverse diffusion processes.
//!
//! A schedule stores `alpha[t]` and the running product `alpha_bar[t]` for
//! `t` in `0..=T`, with `alpha[0] = alpha_bar[0] = 1` as a sentinel so that
//! step indices line up with the math. All arithmetic is `f64`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on any single-step beta.
pub const MAX_BETA: f64 = 0.999;
/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Below this `1 - alpha_bar` the SNR is reported as saturated.
pub const SNR_SATURATION_GAP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        }
    }

    pub(crate) fn to_tag(self) -> u8 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }

    /// The other supported kind; used for the scheduler-mismatch experiment.
    pub fn other(self) -> Self {
        match self {
            ScheduleKind::Linear => ScheduleKind::Cosine,
            ScheduleKind::Cosine => ScheduleKind::Linear,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Coefficients of the Gaussian posterior `q(x_{t-1} | x_t, x_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoefficients {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub variance: f64,
}

/// Signal-to-noise ratio at a step. `saturated` is set when `1 - alpha_bar`
/// is too small to divide by and `value` is a large finite stand-in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Snr {
    pub value: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with `steps` diffusion steps.
    ///
    /// Linear: betas evenly spaced on `[1e-4, 0.02] * (1000 / T)`.
    /// Cosine: `alpha_bar(t) = g(t) / g(0)` with
    /// `g(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`, `s = 0.008`.
    /// Both kinds clip single-step betas at [`MAX_BETA`].
    pub fn build(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("a schedule needs at least 2 steps, got {steps}")));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        for (i, beta) in betas.into_iter().enumerate() {
            let alpha = 1.0 - beta;
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::ScheduleConstruction(format!(
                    "alpha[{}] = {alpha} outside (0, 1]",
                    i + 1
                )));
            }
            alphas.push(alpha);
        }
        Self::from_alphas(kind, alphas)
    }

    /// Rebuilds a schedule from its `alpha` table (index 0 must be the
    /// sentinel 1.0). Used when loading checkpoints and by tests that need
    /// hand-made schedules.
    pub fn from_alphas(kind: ScheduleKind, alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::invalid("alpha table needs at least one step"));
        }
        if alphas[0] != 1.0 {
            return Err(Error::invalid("alpha[0] must be the sentinel 1.0"));
        }
        if let Some((t, a)) = alphas.iter().enumerate().find(|(_, a)| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::ScheduleConstruction(format!("alpha[{t}] = {a} outside (0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for &a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        Ok(Self { kind, alphas, alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alphas[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("step {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn snr(&self, t: usize) -> Result<Snr> {
        self.check_step(t)?;
        let ab = self.alpha_bars[t];
        let gap = 1.0 - ab;
        if gap < SNR_SATURATION_GAP {
            return Ok(Snr { value: ab / SNR_SATURATION_GAP, saturated: true });
        }
        Ok(Snr { value: ab / gap, saturated: false })
    }

    pub fn posterior_coefficients(&self, t: usize) -> Result<PosteriorCoefficients> {
        self.check_step(t)?;
        let alpha = self.alphas[t];
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        let denom = 1.0 - ab;
        if denom <= 0.0 {
            return Err(Error::NumericallyDegenerate(format!("1 - alpha_bar[{t}] is zero")));
        }
        Ok(PosteriorCoefficients {
            coef_xt: alpha.sqrt() * (1.0 - ab_prev) / denom,
            coef_x0: ab_prev.sqrt() * (1.0 - alpha) / denom,
            variance: ((1.0 - alpha) * (1.0 - ab_prev) / denom).max(0.0),
        })
    }
}

fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let start = 1e-4 * scale;
    let end = 0.02 * scale;
    (0..steps)
        .map(|i| {
            let frac = i as f64 / (steps - 1) as f64;
            (start + (end - start) * frac).min(MAX_BETA)
        })
        .collect()
}

pub(crate) fn cosine_g(t: f64, steps: usize) -> f64 {
    let arg = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
    arg.cos().powi(2)
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    (1..=steps)
        .map(|t| {
            let ratio = cosine_g(t as f64, steps) / cosine_g((t - 1) as f64, steps);
            (1.0 - ratio).clamp(0.0, MAX_BETA)
        })
        .collect()
}
