//! Forward noising, reverse-step Gaussians, per-step VLB terms, loss
//! trajectories and ancestral sampling.
//!
//! Trajectory indices follow the VLB decomposition: index 0 holds the
//! reconstruction term `L_0` (evaluated at step 1), index `k` for
//! `1 <= k < T` holds the KL term `L_k` (evaluated at step `k + 1`), and
//! index `T` holds the prior term `L_T`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::rng::{rng_for, stream};
use crate::schedule::NoiseSchedule;

/// Reconstructions are clamped to `[-X0_CLAMP, X0_CLAMP]` (standardized data).
pub const X0_CLAMP: f64 = 3.0;
/// Variance used in place of an exactly-zero reverse variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Smallest `alpha_bar` for which the noise-to-x0 inversion is attempted.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The network predicts the injected noise.
    Epsilon,
    /// The network predicts the clean sample.
    X0,
}

impl Parameterization {
    pub(crate) fn to_tag(self) -> u8 {
        match self {
            Parameterization::Epsilon => 0,
            Parameterization::X0 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Parameterization::Epsilon),
            1 => Some(Parameterization::X0),
            _ => None,
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Parameterization::Epsilon => "epsilon",
            Parameterization::X0 => "x0",
        })
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" => Ok(Parameterization::Epsilon),
            "x0" => Ok(Parameterization::X0),
            other => Err(Error::invalid(format!("unknown parameterization {other:?}"))),
        }
    }
}

/// Anything that can play the role of `eps_theta` / `x0_theta`: trained
/// networks, and exact oracles in tests.
pub trait Denoiser: Sync {
    fn schedule(&self) -> &NoiseSchedule;
    fn parameterization(&self) -> Parameterization;
    fn data_dim(&self) -> usize;
    /// Raw network output for a batch of rows of `xs` at steps `ts`.
    fn raw_output(&self, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>>;
}

/// A trained (or freshly initialized) denoising diffusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    net: DenseNet<f32>,
    schedule: NoiseSchedule,
    parameterization: Parameterization,
}

impl DiffusionModel {
    pub fn new(
        net: DenseNet<f32>,
        schedule: NoiseSchedule,
        parameterization: Parameterization,
    ) -> Result<Self> {
        let d = net.data_dim();
        let dims = net.layer_dims();
        if dims[0] != d + net.time_embedding().dim() {
            return Err(Error::invalid("network input does not match data dim + embedding"));
        }
        Ok(Self { net, schedule, parameterization })
    }

    pub fn net(&self) -> &DenseNet<f32> {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut DenseNet<f32> {
        &mut self.net
    }
}

impl Denoiser for DiffusionModel {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    fn data_dim(&self) -> usize {
        self.net.data_dim()
    }

    fn raw_output(&self, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        self.net.forward_batch(xs, ts, self.schedule.steps())
    }
}

/// Isotropic Gaussian `N(mean, variance * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// True VLB terms, white-box.
    Exact,
    /// Reconstruction errors from intermediate outputs, gray-box.
    Estimated,
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrajectoryKind::Exact => "exact",
            TrajectoryKind::Estimated => "estimated",
        })
    }
}

/// Per-step loss values of one query sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrajectory {
    pub sample_id: u64,
    pub kind: TrajectoryKind,
    /// Total diffusion steps `T` of the model the values came from.
    pub steps: usize,
    pub values: BTreeMap<usize, f64>,
    pub noise_draws: usize,
    pub mask: Option<BTreeSet<usize>>,
}

impl LossTrajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values in ascending step order.
    pub fn value_list(&self) -> Vec<f64> {
        self.values.values().copied().collect()
    }
}

/// Identifies the noise stream of one query sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub sample_id: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, sample_id: u64) -> Self {
        Self { seed, sample_id }
    }

    /// Noise vector for (step, draw); a pure function of the key.
    pub fn draw(&self, tag: u64, t: usize, k: usize, dim: usize) -> Vec<f64> {
        let mut rng = rng_for(self.seed, &[tag, self.sample_id, t as u64, k as u64]);
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

fn check_len(what: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::invalid(format!("{what} has {} entries, expected {dim}", v.len())));
    }
    Ok(())
}

fn check_step(schedule: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} outside [1, {}]", schedule.steps())));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`. Step 0 is the
/// identity sentinel.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(Error::invalid(format!("step {t} beyond T = {}", schedule.steps())));
    }
    check_len("noise", eps, x0.len())?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Converts raw network outputs into clamped `x0` predictions, row by row.
fn outputs_to_x0<D: Denoiser + ?Sized>(
    model: &D,
    xs: &[f64],
    ts: &[usize],
    raw: Vec<f64>,
) -> Result<Vec<f64>> {
    let d = model.data_dim();
    let mut out = raw;
    if model.parameterization() == Parameterization::Epsilon {
        for ((row, x), &t) in out.chunks_exact_mut(d).zip(xs.chunks_exact(d)).zip(ts) {
            let ab = model.schedule().alpha_bar(t);
            if ab < MIN_ALPHA_BAR {
                return Err(Error::NumericallyDegenerate(format!(
                    "alpha_bar[{t}] = {ab:e} is too small to invert"
                )));
            }
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (o, xv) in row.iter_mut().zip(x) {
                *o = (xv - sn * *o) / sa;
            }
        }
    }
    for o in &mut out {
        *o = o.clamp(-X0_CLAMP, X0_CLAMP);
    }
    Ok(out)
}

/// Batched [`predict_x0`]: `xs` holds one row per entry of `ts`.
pub fn predict_x0_batch<D: Denoiser + ?Sized>(model: &D, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
    for &t in ts {
        check_step(model.schedule(), t)?;
    }
    let raw = model.raw_output(xs, ts)?;
    outputs_to_x0(model, xs, ts, raw)
}

pub fn predict_x0<D: Denoiser + ?Sized>(model: &D, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
    check_len("x_t", x_t, model.data_dim())?;
    predict_x0_batch(model, x_t, &[t])
}

/// `q(x_{t-1} | x_t, x0)`.
pub fn posterior_q(schedule: &NoiseSchedule, x_t: &[f64], x0: &[f64], t: usize) -> Result<Gaussian> {
    check_len("x0", x0, x_t.len())?;
    let c = schedule.posterior_coefficients(t)?;
    Ok(Gaussian {
        mean: x_t.iter().zip(x0).map(|(xt, x0)| c.coef_xt * xt + c.coef_x0 * x0).collect(),
        variance: c.variance,
    })
}

/// `p_theta(x_{t-1} | x_t)`: posterior mean at the predicted `x0`, variance
/// fixed to the true posterior variance.
pub fn p_theta<D: Denoiser + ?Sized>(model: &D, x_t: &[f64], t: usize) -> Result<Gaussian> {
    let x0_hat = predict_x0(model, x_t, t)?;
    posterior_q(model.schedule(), x_t, &x0_hat, t)
}

/// KL divergence between isotropic Gaussians, in nats.
///
/// When both variances are zero the KL of the means is taken under
/// [`VARIANCE_FLOOR`].
pub fn kl_gaussian(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    check_len("p mean", &p.mean, q.mean.len())?;
    if q.variance < 0.0 || p.variance < 0.0 {
        return Err(Error::invalid("negative variance"));
    }
    let sq_dist: f64 = q.mean.iter().zip(&p.mean).map(|(a, b)| (a - b).powi(2)).sum();
    if p.variance == 0.0 {
        if q.variance != 0.0 {
            return Err(Error::invalid("KL against a point mass is infinite"));
        }
        return Ok(0.5 * sq_dist / VARIANCE_FLOOR);
    }
    let d = q.mean.len() as f64;
    let ratio = q.variance / p.variance;
    let log_term = if ratio == 0.0 {
        // q is a point mass; only the mean term and -ln(0) remain.
        return Err(Error::invalid("KL from a point mass to a Gaussian is infinite"));
    } else {
        ratio.ln()
    };
    let kl = 0.5 * (d * (ratio - 1.0 - log_term) + sq_dist / p.variance);
    Ok(kl.max(0.0))
}

/// Closed-form prior term `KL(q(x_T | x0) || N(0, I))`.
pub fn prior_term(schedule: &NoiseSchedule, x0: &[f64]) -> f64 {
    let ab = schedule.alpha_bar(schedule.steps());
    let var = 1.0 - ab;
    let d = x0.len() as f64;
    let sq: f64 = x0.iter().map(|v| v * v).sum();
    0.5 * (d * (var - 1.0 - var.ln()) + ab * sq)
}

/// Shifted Gaussian NLL of `x0` under `N(mean, variance)`: the `ln(2 pi var)`
/// part is the minimum over `x0` and is dropped, leaving a nonnegative value.
fn reconstruction_term(x0: &[f64], p: &Gaussian) -> f64 {
    let var = if p.variance > 0.0 { p.variance } else { VARIANCE_FLOOR };
    let sq: f64 = x0.iter().zip(&p.mean).map(|(a, b)| (a - b).powi(2)).sum();
    0.5 * sq / var
}

/// Step at which the term stored under `index` is evaluated, if any.
fn step_for_index(index: usize, steps: usize) -> Option<usize> {
    if index == 0 {
        Some(1)
    } else if index < steps {
        Some(index + 1)
    } else {
        None
    }
}

/// Combines one reverse-step evaluation into the VLB term stored at `index`.
fn term_from_prediction(
    schedule: &NoiseSchedule,
    index: usize,
    x0: &[f64],
    x_t: &[f64],
    x0_hat: &[f64],
) -> Result<f64> {
    let t = step_for_index(index, schedule.steps()).expect("model-dependent index");
    let p = posterior_q(schedule, x_t, x0_hat, t)?;
    if index == 0 {
        return Ok(reconstruction_term(x0, &p));
    }
    let q = posterior_q(schedule, x_t, x0, t)?;
    kl_gaussian(&q, &p)
}

/// The VLB term stored at trajectory `index`, averaged over `draws` noise
/// draws from `key`.
pub fn loss_term<D: Denoiser + ?Sized>(
    model: &D,
    x0: &[f64],
    index: usize,
    draws: usize,
    key: NoiseKey,
) -> Result<f64> {
    let schedule = model.schedule();
    let steps = schedule.steps();
    check_len("x0", x0, model.data_dim())?;
    if draws == 0 {
        return Err(Error::invalid("noise draws must be at least 1"));
    }
    if index > steps {
        return Err(Error::invalid(format!("term index {index} beyond T = {steps}")));
    }
    let Some(t) = step_for_index(index, steps) else {
        return Ok(prior_term(schedule, x0));
    };
    let mut total = 0.0;
    for k in 0..draws {
        let eps = key.draw(stream::LOSS_NOISE, t, k, x0.len());
        let x_t = forward_sample(schedule, x0, t, &eps)?;
        let x0_hat = predict_x0(model, &x_t, t)?;
        total += term_from_prediction(schedule, index, x0, &x_t, &x0_hat)?;
    }
    Ok(total / draws as f64)
}

/// All VLB terms `L_0 ..= L_T` of one sample, evaluated with one batched
/// network call.
pub fn exact_trajectory<D: Denoiser + ?Sized>(
    model: &D,
    sample_id: u64,
    x0: &[f64],
    noise_seed: u64,
    draws: usize,
) -> Result<LossTrajectory> {
    let schedule = model.schedule();
    let steps = schedule.steps();
    let d = model.data_dim();
    check_len("x0", x0, d)?;
    if draws == 0 {
        return Err(Error::invalid("noise draws must be at least 1"));
    }
    let key = NoiseKey::new(noise_seed, sample_id);
    let mut xs = Vec::with_capacity(steps * draws * d);
    let mut ts = Vec::with_capacity(steps * draws);
    for index in 0..steps {
        let t = step_for_index(index, steps).unwrap();
        for k in 0..draws {
            let eps = key.draw(stream::LOSS_NOISE, t, k, d);
            xs.extend(forward_sample(schedule, x0, t, &eps)?);
            ts.push(t);
        }
    }
    let x0_hats = predict_x0_batch(model, &xs, &ts)?;
    let mut values = BTreeMap::new();
    let mut rows = xs.chunks_exact(d).zip(x0_hats.chunks_exact(d));
    for index in 0..steps {
        let mut total = 0.0;
        for _ in 0..draws {
            let (x_t, x0_hat) = rows.next().unwrap();
            total += term_from_prediction(schedule, index, x0, x_t, x0_hat)?;
        }
        values.insert(index, total / draws as f64);
    }
    values.insert(steps, prior_term(schedule, x0));
    if let Some((t, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {t} = {v}")));
    }
    Ok(LossTrajectory {
        sample_id,
        kind: TrajectoryKind::Exact,
        steps,
        values,
        noise_draws: draws,
        mask: None,
    })
}

/// The full negative VLB, accumulated term by term in one pass with the same
/// noise draws as [`exact_trajectory`].
pub fn vlb<D: Denoiser + ?Sized>(
    model: &D,
    sample_id: u64,
    x0: &[f64],
    noise_seed: u64,
    draws: usize,
) -> Result<f64> {
    let key = NoiseKey::new(noise_seed, sample_id);
    let mut total = 0.0;
    for index in 0..=model.schedule().steps() {
        total += loss_term(model, x0, index, draws, key)?;
    }
    Ok(total)
}

/// What a gray-box attacker can see: reconstructions `x0_hat(x_t, t)` and the
/// publicly advertised step count and scheduler. Exact loss terms are not
/// reachable through this interface.
pub trait Reconstructor: Sync {
    fn data_dim(&self) -> usize;
    fn steps(&self) -> usize;
    /// The scheduler the service advertises (what a correct guess recovers).
    fn advertised_schedule(&self) -> NoiseSchedule;
    fn reconstruct_batch(&self, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>>;
}

/// Restricts a model to its reconstruction interface.
pub struct GrayBoxView<'a, D: Denoiser + ?Sized>(pub &'a D);

impl<D: Denoiser + ?Sized> Reconstructor for GrayBoxView<'_, D> {
    fn data_dim(&self) -> usize {
        self.0.data_dim()
    }

    fn steps(&self) -> usize {
        self.0.schedule().steps()
    }

    fn advertised_schedule(&self) -> NoiseSchedule {
        self.0.schedule().clone()
    }

    fn reconstruct_batch(&self, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
        predict_x0_batch(self.0, xs, ts)
    }
}

/// Reconstruction errors `||x0_hat(x_t, t) - x0||^2` at each retained step,
/// with `x_t` noised under the attacker's `guessed` schedule.
pub fn estimated_trajectory<R: Reconstructor + ?Sized>(
    recon: &R,
    sample_id: u64,
    x0: &[f64],
    guessed: &NoiseSchedule,
    mask: Option<&BTreeSet<usize>>,
    noise_seed: u64,
) -> Result<LossTrajectory> {
    let steps = recon.steps();
    let d = recon.data_dim();
    check_len("x0", x0, d)?;
    if guessed.steps() != steps {
        return Err(Error::invalid(format!(
            "guessed schedule has {} steps but the model advertises {steps}",
            guessed.steps()
        )));
    }
    let retained: Vec<usize> = match mask {
        Some(m) => {
            if m.is_empty() {
                return Err(Error::invalid("empty step mask"));
            }
            if let Some(bad) = m.iter().find(|t| **t == 0 || **t > steps) {
                return Err(Error::invalid(format!("mask step {bad} outside [1, {steps}]")));
            }
            m.iter().copied().collect()
        }
        None => (1..=steps).collect(),
    };
    let key = NoiseKey::new(noise_seed, sample_id);
    let mut xs = Vec::with_capacity(retained.len() * d);
    for &t in &retained {
        let eps = key.draw(stream::RECON_NOISE, t, 0, d);
        xs.extend(forward_sample(guessed, x0, t, &eps)?);
    }
    let recons = recon.reconstruct_batch(&xs, &retained)?;
    let values = retained
        .iter()
        .zip(recons.chunks_exact(d))
        .map(|(&t, r)| {
            let err: f64 = r.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum();
            (t, err)
        })
        .collect();
    Ok(LossTrajectory {
        sample_id,
        kind: TrajectoryKind::Estimated,
        steps,
        values,
        noise_draws: 1,
        mask: mask.cloned(),
    })
}

/// Draws `count` samples by running the reverse chain from pure noise. Each
/// sample uses its own noise stream, so sample `i` does not depend on `count`.
pub fn ancestral_sample<D: Denoiser + ?Sized>(model: &D, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let schedule = model.schedule();
    let d = model.data_dim();
    let mut rngs: Vec<_> = (0..count).map(|i| rng_for(seed, &[stream::SAMPLE, i as u64])).collect();
    let mut xs: Vec<f64> = rngs
        .iter_mut()
        .flat_map(|r| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; count];
        let x0_hat = predict_x0_batch(model, &xs, &ts)?;
        let c = schedule.posterior_coefficients(t)?;
        let sigma = c.variance.sqrt();
        for ((row, pred), rng) in xs.chunks_exact_mut(d).zip(x0_hat.chunks_exact(d)).zip(rngs.iter_mut()) {
            for (x, p) in row.iter_mut().zip(pred) {
                let mean = c.coef_xt * *x + c.coef_x0 * p;
                *x = if t > 1 { mean + sigma * rng.sample::<f64, _>(StandardNormal) } else { mean };
            }
        }
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ancestral sample".into()));
    }
    Ok(xs.chunks_exact(d).map(<[f64]>::to_vec).collect())
}
