//! Training target and shadow models on the simple denoising objective.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ancestral_sample, forward_sample, Denoiser, DiffusionModel, Parameterization};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamState, DenseNet};
use crate::rng::{rng_for, stream};
use crate::schedule::{NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub parameterization: Parameterization,
    pub schedule: ScheduleKind,
    /// Number of diffusion steps `T`.
    pub diffusion_steps: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            parameterization: Parameterization::Epsilon,
            schedule: ScheduleKind::Cosine,
            diffusion_steps: 100,
            hidden: vec![128, 128],
            time_embed_dim: 16,
            activation: Activation::Silu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if dataset_len == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::invalid(format!(
                "batch size {} must be in [1, {dataset_len}] (training-set size)",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    /// Fresh model with this config's architecture and schedule.
    pub fn init_model(&self, data_dim: usize) -> Result<DiffusionModel> {
        let schedule = NoiseSchedule::build(self.schedule, self.diffusion_steps)?;
        let mut rng = rng_for(self.seed, &[stream::INIT]);
        let net = DenseNet::new(data_dim, &self.hidden, self.time_embed_dim, self.activation, &mut rng)?;
        DiffusionModel::new(net, schedule, self.parameterization)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DiffusionModel,
    /// `(step, mean simple loss of that step's batch)`.
    pub loss_log: Vec<(usize, f64)>,
}

/// Cycles through shuffled epochs of the training set.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::BATCH]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize, out: &mut Vec<usize>) {
        out.clear();
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Minimizes the simple objective: mean over the batch of `||eps - eps_hat||^2`
/// (epsilon models) or `||x0 - x0_hat||^2` (x0 models), with `t` uniform on
/// `[1, T]` per element.
pub fn train_model(dataset: &[Vec<f64>], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate(dataset.len())?;
    let dim = dataset[0].len();
    if dataset.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("training points have inconsistent dimensions"));
    }
    let mut model = config.init_model(dim)?;
    let schedule = model.schedule().clone();
    let steps_t = schedule.steps();
    let parameterization = model.parameterization();
    let mut adam = AdamState::new(model.net(), config.learning_rate);
    let mut sampler = BatchSampler::new(dataset.len(), config.seed);
    let mut noise_rng = rng_for(config.seed, &[stream::TRAIN_NOISE]);

    let b = config.batch_size;
    let mut batch = Vec::with_capacity(b);
    let mut xs = Vec::with_capacity(b * dim);
    let mut ts = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b * dim);
    let mut loss_log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        sampler.next_batch(b, &mut batch);
        xs.clear();
        ts.clear();
        targets.clear();
        for &i in &batch {
            let t = noise_rng.random_range(1..=steps_t);
            let eps: Vec<f64> = (0..dim).map(|_| noise_rng.sample(StandardNormal)).collect();
            xs.extend(forward_sample(&schedule, &dataset[i], t, &eps)?);
            ts.push(t);
            match parameterization {
                Parameterization::Epsilon => targets.extend(eps),
                Parameterization::X0 => targets.extend_from_slice(&dataset[i]),
            }
        }
        let net = model.net();
        let input = net.build_input(&xs, &ts, steps_t)?;
        let trace = net.forward_traced(input, b);
        let scale = 2.0 / b as f64;
        let mut loss = 0.0;
        let upstream: Vec<f32> = trace
            .output()
            .iter()
            .zip(&targets)
            .map(|(o, y)| {
                let r = *o as f64 - y;
                loss += r * r;
                (scale * r) as f32
            })
            .collect();
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step} (seed {}, lr {})",
                config.seed, config.learning_rate
            )));
        }
        loss_log.push((step, loss));
        let grads = net.backward(&trace, &upstream);
        adam.step(model.net_mut(), &grads).map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
    }
    Ok(TrainOutcome { model, loss_log })
}

/// Trains a shadow model on `synthetic_count` ancestral samples of `target`.
/// The shadow architecture and `T` come from `config` and may differ from the
/// target's.
pub fn train_shadow<D: Denoiser + ?Sized>(
    target: &D,
    synthetic_count: usize,
    config: &TrainConfig,
    sample_seed: u64,
) -> Result<TrainOutcome> {
    if synthetic_count == 0 {
        return Err(Error::invalid("shadow training needs at least one synthetic sample"));
    }
    config.validate(synthetic_count)?;
    let samples = ancestral_sample(target, synthetic_count, sample_seed)?;
    train_model(&samples, config)
}

/// Exponential moving average of a loss log.
pub fn ema(log: &[(usize, f64)], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(log.len());
    let mut acc = None;
    for &(_, v) in log {
        let next = match acc {
            None => v,
            Some(a) => decay * a + (1.0 - decay) * v,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}
