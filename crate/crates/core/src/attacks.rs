//! Membership scores under the white-box, gray-box and black-box threat
//! models. Every scenario emits lower-is-member scores.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QuerySet;
use crate::diffusion::{estimated_trajectory, exact_trajectory, Denoiser, LossTrajectory, Reconstructor};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng::{rng_for, stream};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::train::{train_shadow, TrainConfig};

macro_rules! tagged_enum {
    ($name:ident { $($variant:ident => $tag:literal),+ $(,)? }) => {
        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $tag),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tag => Ok($name::$variant),)+
                    _ => Err(Error::invalid(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($name),
                        [$($tag),+].join(", ")
                    ))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WhiteBox,
    GrayBox,
    BlackBoxSpecific,
    BlackBoxAgnostic,
}

tagged_enum!(Scenario {
    WhiteBox => "white_box",
    GrayBox => "gray_box",
    BlackBoxSpecific => "black_box_specific",
    BlackBoxAgnostic => "black_box_agnostic",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Sum,
    Median,
    Min,
    Max,
}

tagged_enum!(Statistic {
    Sum => "sum",
    Median => "median",
    Min => "min",
    Max => "max",
});

/// Where suppression sits relative to truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressionOrder {
    #[default]
    TruncateFirst,
    SuppressFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FeatureMap {
    #[default]
    Identity,
    /// Fixed Gaussian map `R^d -> R^out_dim`.
    RandomProjection { out_dim: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub scenario: Scenario,
    /// `None` picks the scenario default.
    pub statistic: Option<Statistic>,
    pub truncation_fraction: f64,
    pub suppression_keep: Option<f64>,
    pub suppression_order: SuppressionOrder,
    /// `None` uses the scheduler the model advertises.
    pub scheduler_guess: Option<ScheduleKind>,
    pub feature_map: FeatureMap,
    /// Synthetic samples drawn from the target (black-box scenarios).
    pub synthetic_count: usize,
    pub noise_draws: usize,
    pub noise_seed: u64,
    pub sample_seed: u64,
    /// Score the shadow model with exact terms instead of reconstructions.
    pub shadow_white_box: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::WhiteBox,
            statistic: None,
            truncation_fraction: 0.75,
            suppression_keep: None,
            suppression_order: SuppressionOrder::default(),
            scheduler_guess: None,
            feature_map: FeatureMap::Identity,
            synthetic_count: 512,
            noise_draws: 1,
            noise_seed: 0,
            sample_seed: 0,
            shadow_white_box: false,
        }
    }
}

impl AttackConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.truncation_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("truncation fraction {f} outside (0, 1]")));
        }
        if let Some(k) = self.suppression_keep {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::invalid(format!("suppression keep {k} outside (0, 1]")));
            }
        }
        if self.noise_draws == 0 {
            return Err(Error::invalid("noise draws must be at least 1"));
        }
        if let FeatureMap::RandomProjection { out_dim: 0, .. } = self.feature_map {
            return Err(Error::invalid("projection dimension must be positive"));
        }
        Ok(())
    }

    /// Statistic actually applied. The agnostic attack always takes the
    /// nearest neighbour, i.e. `Min`.
    pub fn effective_statistic(&self) -> Statistic {
        match (self.scenario, self.statistic) {
            (Scenario::BlackBoxAgnostic, _) => Statistic::Min,
            (_, Some(s)) => s,
            (Scenario::WhiteBox, None) => Statistic::Max,
            (_, None) => Statistic::Median,
        }
    }

    /// `T_trun = round(fraction * T)`.
    pub fn truncation_step(&self, steps: usize) -> usize {
        (self.truncation_fraction * steps as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: u64,
    pub score: f64,
    pub is_member: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipScores {
    pub scenario: Scenario,
    pub statistic: Statistic,
    pub truncation_fraction: f64,
    pub entries: Vec<ScoreEntry>,
}

impl MembershipScores {
    fn new(config: &AttackConfig, query: &QuerySet, scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "score of sample {} is {}",
                query.samples[i].id, scores[i]
            )));
        }
        let entries = query
            .samples
            .iter()
            .zip(scores)
            .map(|(q, score)| ScoreEntry { sample_id: q.id, score, is_member: q.is_member })
            .collect();
        Ok(Self {
            scenario: config.scenario,
            statistic: config.effective_statistic(),
            truncation_fraction: config.truncation_fraction,
            entries,
        })
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.is_member).collect()
    }

    pub fn report(&self, seed: u64) -> Result<(metrics::AttackReport, metrics::RocCurve)> {
        self.report_at(seed, &metrics::REPORT_FPRS)
    }

    pub fn report_at(
        &self,
        seed: u64,
        fpr_targets: &[f64],
    ) -> Result<(metrics::AttackReport, metrics::RocCurve)> {
        metrics::AttackReport::from_scores(
            &self.scores(),
            &self.labels(),
            self.scenario.as_str(),
            self.statistic.as_str(),
            self.truncation_fraction,
            seed,
            fpr_targets,
        )
    }
}

/// Keeps the entries with step index `<= t_trun`.
pub fn truncate_trajectory(traj: &LossTrajectory, t_trun: usize) -> Result<LossTrajectory> {
    if t_trun > traj.steps {
        return Err(Error::invalid(format!("truncation step {t_trun} beyond T = {}", traj.steps)));
    }
    let mut out = traj.clone();
    out.values.retain(|t, _| *t <= t_trun);
    if out.values.is_empty() {
        return Err(Error::EmptyTrajectory("no entries at or below the truncation step"));
    }
    Ok(out)
}

pub fn apply_statistic(values: &[f64], f: Statistic) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("statistic of an empty list"));
    }
    Ok(match f {
        Statistic::Sum => values.iter().sum(),
        Statistic::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Statistic::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Statistic::Median => metrics::median(values)?,
    })
}

/// `ceil(keep * (reference + 1))` positions, evenly spread over `candidates`
/// (both ends included), capped at the number of candidates.
pub fn suppression_mask(candidates: &[usize], keep: f64, reference: usize) -> Result<BTreeSet<usize>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::invalid(format!("suppression keep {keep} outside (0, 1]")));
    }
    let n = candidates.len();
    if n == 0 {
        return Err(Error::EmptyTrajectory("nothing left to suppress"));
    }
    let m = ((keep * (reference + 1) as f64).ceil() as usize).clamp(1, n);
    if m == 1 {
        return Ok(BTreeSet::from([candidates[0]]));
    }
    Ok((0..m)
        .map(|i| {
            let pos = (i as f64 * (n - 1) as f64 / (m - 1) as f64).round() as usize;
            candidates[pos]
        })
        .collect())
}

/// Steps a gray-box attacker queries after truncation and suppression.
pub fn graybox_steps(config: &AttackConfig, steps: usize) -> Result<BTreeSet<usize>> {
    let t_trun = config.truncation_step(steps);
    let truncated: Vec<usize> = (1..=t_trun.min(steps)).collect();
    let kept = match (config.suppression_keep, config.suppression_order) {
        (None, _) => truncated.into_iter().collect(),
        (Some(keep), SuppressionOrder::TruncateFirst) => {
            if truncated.is_empty() {
                BTreeSet::new()
            } else {
                suppression_mask(&truncated, keep, t_trun)?
            }
        }
        (Some(keep), SuppressionOrder::SuppressFirst) => {
            let all: Vec<usize> = (1..=steps).collect();
            let mut m = suppression_mask(&all, keep, steps)?;
            m.retain(|t| *t <= t_trun);
            m
        }
    };
    if kept.is_empty() {
        return Err(Error::EmptyTrajectory("no reconstruction steps survive truncation and suppression"));
    }
    Ok(kept)
}

fn par_scores<F>(query: &QuerySet, f: F) -> Result<Vec<f64>>
where
    F: Fn(u64, &[f64]) -> Result<f64> + Sync,
{
    query.samples.par_iter().map(|q| f(q.id, &q.x)).collect()
}

pub fn exact_trajectories<D: Denoiser + ?Sized>(
    model: &D,
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<Vec<LossTrajectory>> {
    query
        .samples
        .par_iter()
        .map(|q| exact_trajectory(model, q.id, &q.x, config.noise_seed, config.noise_draws))
        .collect()
}

/// Trajectories of exact VLB terms, truncated and summarized.
pub fn whitebox_scores<D: Denoiser + ?Sized>(
    model: &D,
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<MembershipScores> {
    config.validate()?;
    let t_trun = config.truncation_step(model.schedule().steps());
    let f = config.effective_statistic();
    let scores = par_scores(query, |id, x| {
        let traj = exact_trajectory(model, id, x, config.noise_seed, config.noise_draws)?;
        apply_statistic(&truncate_trajectory(&traj, t_trun)?.value_list(), f)
    })?;
    MembershipScores::new(config, query, scores)
}

fn guessed_schedule<R: Reconstructor + ?Sized>(recon: &R, config: &AttackConfig) -> Result<NoiseSchedule> {
    match config.scheduler_guess {
        Some(kind) => NoiseSchedule::build(kind, recon.steps()),
        None => Ok(recon.advertised_schedule()),
    }
}

pub fn estimated_trajectories<R: Reconstructor + ?Sized>(
    recon: &R,
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<Vec<LossTrajectory>> {
    let guessed = guessed_schedule(recon, config)?;
    let mask = graybox_steps(config, recon.steps())?;
    query
        .samples
        .par_iter()
        .map(|q| estimated_trajectory(recon, q.id, &q.x, &guessed, Some(&mask), config.noise_seed))
        .collect()
}

/// Reconstruction-error trajectories at the retained steps, summarized.
/// Only the reconstruction interface of the model is used.
pub fn graybox_scores<R: Reconstructor + ?Sized>(
    recon: &R,
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<MembershipScores> {
    config.validate()?;
    let guessed = guessed_schedule(recon, config)?;
    let mask = graybox_steps(config, recon.steps())?;
    let f = config.effective_statistic();
    let scores = par_scores(query, |id, x| {
        let traj = estimated_trajectory(recon, id, x, &guessed, Some(&mask), config.noise_seed)?;
        apply_statistic(&traj.value_list(), f)
    })?;
    MembershipScores::new(config, query, scores)
}

/// Scores the query set against an already trained shadow model.
pub fn shadow_scores<D: Denoiser + ?Sized>(
    shadow: &D,
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<MembershipScores> {
    let mut scores = if config.shadow_white_box {
        whitebox_scores(shadow, query, config)?
    } else {
        graybox_scores(&crate::diffusion::GrayBoxView(shadow), query, config)?
    };
    scores.scenario = config.scenario;
    Ok(scores)
}

/// Trains a shadow on `synthetic_count` samples of the target and attacks the
/// shadow. Only ancestral samples of the target are consumed.
pub fn blackbox_specific_scores<D: Denoiser + ?Sized>(
    target: &D,
    query: &QuerySet,
    shadow_config: &TrainConfig,
    config: &AttackConfig,
) -> Result<MembershipScores> {
    config.validate()?;
    let shadow = train_shadow(target, config.synthetic_count, shadow_config, config.sample_seed)?;
    shadow_scores(&shadow.model, query, config)
}

/// Applies a feature map to a batch of vectors.
pub fn features(map: &FeatureMap, points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match *map {
        FeatureMap::Identity => Ok(points.to_vec()),
        FeatureMap::RandomProjection { out_dim, seed } => {
            if out_dim == 0 {
                return Err(Error::invalid("projection dimension must be positive"));
            }
            let Some(d) = points.first().map(Vec::len) else {
                return Ok(Vec::new());
            };
            let mut rng = rng_for(seed, &[stream::PROJECTION, d as u64, out_dim as u64]);
            let scale = 1.0 / (out_dim as f64).sqrt();
            let matrix: Vec<f64> =
                (0..d * out_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            points
                .iter()
                .map(|p| {
                    if p.len() != d {
                        return Err(Error::invalid("points have inconsistent dimensions"));
                    }
                    Ok(matrix
                        .chunks_exact(d)
                        .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
                        .collect())
                })
                .collect()
        }
    }
}

/// `1 - <u, v> / (|u| |v|)`, or 1 when either vector is zero.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (nu * nv)).clamp(0.0, 2.0)
}

/// Distance from each query to its nearest synthetic sample in feature space.
pub fn blackbox_agnostic_scores(
    synthetic: &[Vec<f64>],
    query: &QuerySet,
    config: &AttackConfig,
) -> Result<MembershipScores> {
    config.validate()?;
    if synthetic.is_empty() {
        return Err(Error::invalid("synthetic set is empty"));
    }
    let d = synthetic[0].len();
    if synthetic.iter().chain(query.samples.iter().map(|q| &q.x)).any(|p| p.len() != d) {
        return Err(Error::invalid("synthetic and query points differ in dimension"));
    }
    let synth = features(&config.feature_map, synthetic)?;
    let queries: Vec<Vec<f64>> = query.samples.iter().map(|q| q.x.clone()).collect();
    let qf = features(&config.feature_map, &queries)?;
    let scores = qf
        .par_iter()
        .map(|u| synth.iter().map(|s| cosine_distance(u, s)).fold(f64::INFINITY, f64::min))
        .collect();
    MembershipScores::new(config, query, scores)
}

/// `score < threshold` marks a member.
pub fn decide(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s < threshold).collect()
}

pub fn median_threshold(scores: &[f64]) -> Result<f64> {
    metrics::median(scores)
}

pub fn write_scores(scores: &MembershipScores, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["sample_id", "score", "is_member", "scenario", "statistic", "truncation_fraction"])?;
    for e in &scores.entries {
        w.write_record([
            e.sample_id.to_string(),
            e.score.to_string(),
            u8::from(e.is_member).to_string(),
            scores.scenario.to_string(),
            scores.statistic.to_string(),
            scores.truncation_fraction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_trajectories(trajs: &[LossTrajectory], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["sample_id", "kind", "t", "value", "noise_draws"])?;
    for traj in trajs {
        for (t, v) in &traj.values {
            w.write_record([
                traj.sample_id.to_string(),
                traj.kind.to_string(),
                t.to_string(),
                v.to_string(),
                traj.noise_draws.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::QuerySample;
    use crate::diffusion::testing::Oracle;
    use crate::diffusion::{vlb, DiffusionModel, GrayBoxView, Parameterization, TrajectoryKind};
    use crate::metrics::roc_curve;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn gaussian_query(n_each: usize, dim: usize, seed: u64) -> QuerySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QuerySet {
            samples: (0..2 * n_each)
                .map(|i| QuerySample {
                    id: i as u64,
                    x: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal).clamp(-2.5, 2.5)).collect(),
                    is_member: i < n_each,
                })
                .collect(),
        }
    }

    fn small_model(steps: usize) -> DiffusionModel {
        let cfg = TrainConfig {
            steps: 0,
            hidden: vec![16, 16],
            time_embed_dim: 4,
            diffusion_steps: steps,
            ..TrainConfig::default()
        };
        let mut m = cfg.init_model(3).unwrap();
        // Nonzero output layer so predictions depend on the input.
        let params = m.net().flat_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (i, p) in params.into_iter().enumerate() {
            let v = p + 0.05 * rng.sample::<f32, _>(StandardNormal);
            m.net_mut().set_flat_param(i, v);
        }
        m
    }

    fn trajectory(values: &[(usize, f64)], steps: usize) -> LossTrajectory {
        LossTrajectory {
            sample_id: 0,
            kind: TrajectoryKind::Exact,
            steps,
            values: values.iter().copied().collect::<BTreeMap<_, _>>(),
            noise_draws: 1,
            mask: None,
        }
    }

    fn oracle_for(x0: &[f64], steps: usize) -> Oracle {
        Oracle {
            schedule: NoiseSchedule::build(ScheduleKind::Cosine, steps).unwrap(),
            x0: x0.to_vec(),
            parameterization: Parameterization::X0,
        }
    }

    #[test]
    fn truncation_key_sets() {
        let steps = 40;
        let full = trajectory(&(0..=steps).map(|t| (t, t as f64)).collect::<Vec<_>>(), steps);
        assert_eq!(truncate_trajectory(&full, steps).unwrap(), full);
        let zero = truncate_trajectory(&full, 0).unwrap();
        assert_eq!(zero.values.keys().copied().collect::<Vec<_>>(), vec![0]);
        let cfg = AttackConfig::default();
        let t_trun = cfg.truncation_step(steps);
        let kept = truncate_trajectory(&full, t_trun).unwrap();
        let expected: Vec<usize> = (0..=steps).filter(|&t| 4 * t <= 3 * steps).collect();
        assert_eq!(kept.values.keys().copied().collect::<Vec<_>>(), expected);
        assert!(truncate_trajectory(&full, steps + 1).is_err());
        let sparse = trajectory(&[(5, 1.0)], steps);
        assert!(matches!(truncate_trajectory(&sparse, 4), Err(Error::EmptyTrajectory(_))));
    }

    #[test]
    fn statistics() {
        assert_eq!(apply_statistic(&[1.0, 3.0, 2.0], Statistic::Median).unwrap(), 2.0);
        assert_eq!(apply_statistic(&[1.0, 2.0, 3.0, 4.0], Statistic::Median).unwrap(), 2.5);
        assert_eq!(apply_statistic(&[1.0, 2.0, 3.0, 4.0], Statistic::Sum).unwrap(), 10.0);
        assert_eq!(apply_statistic(&[1.0, -2.0, 3.0], Statistic::Min).unwrap(), -2.0);
        assert_eq!(apply_statistic(&[1.0, -2.0, 3.0], Statistic::Max).unwrap(), 3.0);
        for f in Statistic::ALL {
            assert_eq!(apply_statistic(&[0.37], *f).unwrap(), 0.37);
            assert!(apply_statistic(&[], *f).is_err());
        }
    }

    #[test]
    fn tags_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), *s);
        }
        for s in Statistic::ALL {
            assert_eq!(s.as_str().parse::<Statistic>().unwrap(), *s);
        }
        assert!("grey_box".parse::<Scenario>().is_err());
    }

    #[test]
    fn defaults_per_scenario() {
        assert_eq!(AttackConfig::new(Scenario::WhiteBox).effective_statistic(), Statistic::Max);
        assert_eq!(AttackConfig::new(Scenario::GrayBox).effective_statistic(), Statistic::Median);
        assert_eq!(AttackConfig::default().truncation_fraction, 0.75);
        let bad = AttackConfig { truncation_fraction: 0.0, ..AttackConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AttackConfig { suppression_keep: Some(1.5), ..AttackConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sum_of_full_trajectory_is_vlb() {
        let m = small_model(12);
        let q = gaussian_query(3, 3, 1);
        let cfg = AttackConfig {
            statistic: Some(Statistic::Sum),
            truncation_fraction: 1.0,
            noise_seed: 4,
            ..AttackConfig::default()
        };
        let scores = whitebox_scores(&m, &q, &cfg).unwrap();
        for (e, s) in scores.entries.iter().zip(&q.samples) {
            assert_eq!(e.score, vlb(&m, s.id, &s.x, 4, 1).unwrap());
        }
    }

    #[test]
    fn whitebox_oracle_gives_no_signal() {
        let q = gaussian_query(300, 2, 2);
        let cfg = AttackConfig::default();
        let scores: Vec<f64> = q
            .samples
            .iter()
            .map(|s| {
                let one = QuerySet { samples: vec![s.clone()] };
                whitebox_scores(&oracle_for(&s.x, 20), &one, &cfg).unwrap().entries[0].score
            })
            .collect();
        assert!(scores.iter().all(|&s| s == 0.0));
        assert_eq!(roc_curve(&scores, &q.labels()).unwrap().auc, 0.5);

        // Untruncated, only the prior term remains; it carries no membership.
        let full = AttackConfig { truncation_fraction: 1.0, ..cfg };
        let scores: Vec<f64> = q
            .samples
            .iter()
            .map(|s| {
                let one = QuerySet { samples: vec![s.clone()] };
                whitebox_scores(&oracle_for(&s.x, 20), &one, &full).unwrap().entries[0].score
            })
            .collect();
        let auc = roc_curve(&scores, &q.labels()).unwrap().auc;
        assert!((auc - 0.5).abs() <= 0.05, "{auc}");
    }

    #[test]
    fn graybox_oracle_scores_are_zero() {
        let q = gaussian_query(20, 2, 3);
        let scores: Vec<f64> = q
            .samples
            .iter()
            .map(|s| {
                let one = QuerySet { samples: vec![s.clone()] };
                let o = oracle_for(&s.x, 20);
                graybox_scores(&GrayBoxView(&o), &one, &AttackConfig::new(Scenario::GrayBox)).unwrap().entries
                    [0]
                .score
            })
            .collect();
        assert!(scores.iter().all(|&s| s == 0.0));
        assert_eq!(roc_curve(&scores, &q.labels()).unwrap().auc, 0.5);
    }

    /// Reconstruction-only service: it has no `Denoiser` impl, so exact terms
    /// cannot be computed from it.
    struct Service {
        model: DiffusionModel,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl Reconstructor for Service {
        fn data_dim(&self) -> usize {
            self.model.data_dim()
        }
        fn steps(&self) -> usize {
            self.model.schedule().steps()
        }
        fn advertised_schedule(&self) -> NoiseSchedule {
            self.model.schedule().clone()
        }
        fn reconstruct_batch(&self, xs: &[f64], ts: &[usize]) -> Result<Vec<f64>> {
            self.calls.fetch_add(ts.len(), std::sync::atomic::Ordering::Relaxed);
            crate::diffusion::predict_x0_batch(&self.model, xs, ts)
        }
    }

    #[test]
    fn graybox_runs_on_reconstruction_facade() {
        let model = small_model(20);
        let q = gaussian_query(4, 3, 5);
        let cfg = AttackConfig::new(Scenario::GrayBox);
        let direct = graybox_scores(&GrayBoxView(&model), &q, &cfg).unwrap();
        let service = Service { model, calls: Default::default() };
        let via = graybox_scores(&service, &q, &cfg).unwrap();
        assert_eq!(direct, via);
        let per_sample = graybox_steps(&cfg, 20).unwrap().len();
        assert_eq!(service.calls.into_inner(), per_sample * q.len());
    }

    #[test]
    fn scheduler_guess() {
        let model = small_model(20);
        let q = gaussian_query(4, 3, 6);
        let view = GrayBoxView(&model);
        let base = graybox_scores(&view, &q, &AttackConfig::new(Scenario::GrayBox)).unwrap();
        let right = AttackConfig {
            scheduler_guess: Some(ScheduleKind::Cosine),
            ..AttackConfig::new(Scenario::GrayBox)
        };
        assert_eq!(graybox_scores(&view, &q, &right).unwrap(), base);
        let wrong = AttackConfig { scheduler_guess: Some(ScheduleKind::Linear), ..right };
        assert_ne!(graybox_scores(&view, &q, &wrong).unwrap(), base);
    }

    #[test]
    fn suppression_counts_and_spacing() {
        for steps in [8usize, 20, 100, 101] {
            for fraction in [1.0, 0.75, 0.5] {
                for keep in [0.25, 0.5, 0.75] {
                    let cfg = AttackConfig {
                        truncation_fraction: fraction,
                        suppression_keep: Some(keep),
                        ..AttackConfig::new(Scenario::GrayBox)
                    };
                    let t_trun = cfg.truncation_step(steps);
                    let kept: Vec<usize> = graybox_steps(&cfg, steps).unwrap().into_iter().collect();
                    let expected = ((keep * (t_trun + 1) as f64).ceil() as usize).min(t_trun);
                    assert_eq!(kept.len(), expected, "T {steps} f {fraction} keep {keep}");
                    assert!(kept.iter().all(|&t| (1..=t_trun).contains(&t)));
                    assert_eq!((kept[0], *kept.last().unwrap()), (1, t_trun));
                    let gaps: Vec<usize> = kept.windows(2).map(|w| w[1] - w[0]).collect();
                    let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
                    assert!(hi - lo <= 1, "{gaps:?}");
                }
            }
        }
        let full = AttackConfig { suppression_keep: Some(1.0), ..AttackConfig::new(Scenario::GrayBox) };
        assert_eq!(graybox_steps(&full, 100).unwrap().len(), 75);
    }

    #[test]
    fn suppression_order_and_empty_results() {
        let first = AttackConfig {
            suppression_keep: Some(0.25),
            suppression_order: SuppressionOrder::SuppressFirst,
            ..AttackConfig::new(Scenario::GrayBox)
        };
        let kept = graybox_steps(&first, 100).unwrap();
        let all: Vec<usize> = (1..=100).collect();
        let mask = suppression_mask(&all, 0.25, 100).unwrap();
        assert_eq!(kept, mask.into_iter().filter(|&t| t <= 75).collect());

        let tiny = AttackConfig { truncation_fraction: 0.01, ..AttackConfig::new(Scenario::GrayBox) };
        assert!(matches!(graybox_steps(&tiny, 20), Err(Error::EmptyTrajectory(_))));
        let model = small_model(20);
        let q = gaussian_query(1, 3, 0);
        assert!(graybox_scores(&GrayBoxView(&model), &q, &tiny).is_err());
    }

    #[test]
    fn shadow_identity_matches_graybox() {
        let model = small_model(20);
        let q = gaussian_query(5, 3, 7);
        let cfg = AttackConfig::new(Scenario::BlackBoxSpecific);
        let via_shadow = shadow_scores(&model, &q, &cfg).unwrap();
        let direct = graybox_scores(&GrayBoxView(&model), &q, &cfg).unwrap();
        assert_eq!(via_shadow.scores(), direct.scores());
        assert_eq!(via_shadow.scenario, Scenario::BlackBoxSpecific);
        let wb = AttackConfig { shadow_white_box: true, ..cfg };
        assert_eq!(
            shadow_scores(&model, &q, &wb).unwrap().scores(),
            whitebox_scores(&model, &q, &wb).unwrap().scores()
        );
    }

    #[test]
    fn shadow_needs_enough_samples() {
        let model = small_model(20);
        let q = gaussian_query(2, 3, 8);
        let shadow_cfg = TrainConfig { steps: 1, batch_size: 16, ..TrainConfig::default() };
        let cfg = AttackConfig { synthetic_count: 8, ..AttackConfig::new(Scenario::BlackBoxSpecific) };
        assert!(matches!(
            blackbox_specific_scores(&model, &q, &shadow_cfg, &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn query_of(points: &[&[f64]]) -> QuerySet {
        QuerySet {
            samples: points
                .iter()
                .enumerate()
                .map(|(i, p)| QuerySample { id: i as u64, x: p.to_vec(), is_member: i % 2 == 0 })
                .collect(),
        }
    }

    #[test]
    fn agnostic_nearest_neighbour_table() {
        let cfg = AttackConfig::new(Scenario::BlackBoxAgnostic);
        let synth = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, -1.0]];
        let q = query_of(&[&[1.0, 0.0], &[-3.0, 0.0], &[1.0, 1.0], &[0.0, 0.0], &[0.0, -1.0]]);
        let got = blackbox_agnostic_scores(&synth, &q, &cfg).unwrap().scores();
        let h = 1.0 - 1.0 / 2f64.sqrt();
        // Columns: (1,0), (0,2), (-1,-1).
        let table =
            [[0.0, 1.0, 1.0 + 1.0 / 2f64.sqrt()], [2.0, 1.0, h], [h, h, 2.0], [1.0, 1.0, 1.0], [1.0, 2.0, h]];
        for (g, row) in got.iter().zip(table) {
            let want = row.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((g - want).abs() < 1e-12, "{g} vs {want}");
        }
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert!((cosine_distance(&[1.0, 2.0], &[-1.0, -2.0]) - 2.0).abs() < 1e-12);
        assert!(blackbox_agnostic_scores(&[], &q, &cfg).is_err());
    }

    #[test]
    fn random_projection_is_fixed_and_linear() {
        let map = FeatureMap::RandomProjection { out_dim: 5, seed: 3 };
        let pts = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]];
        let a = features(&map, &pts).unwrap();
        assert_eq!(a, features(&map, &pts).unwrap());
        assert_eq!(a[0].len(), 5);
        for (x, y) in a[0].iter().zip(&a[1]) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let cfg = AttackConfig { feature_map: map, ..AttackConfig::new(Scenario::BlackBoxAgnostic) };
        let q = query_of(&[&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]]);
        let s = blackbox_agnostic_scores(&pts, &q, &cfg).unwrap().scores();
        assert!(s[0].abs() < 1e-12);
    }

    #[test]
    fn decisions() {
        assert_eq!(decide(&[0.1, 0.2, 0.9, 1.0], 0.5), vec![true, true, false, false]);
        assert!(decide(&[0.1, -5.0], f64::NEG_INFINITY).iter().all(|b| !b));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..40).map(|_| rng.random()).collect();
        let bits = decide(&scores, median_threshold(&scores).unwrap());
        assert_eq!(bits.iter().filter(|b| **b).count(), 20);
    }

    #[test]
    fn csv_writers() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(10);
        let q = gaussian_query(2, 3, 1);
        let cfg = AttackConfig::default();
        let scores = whitebox_scores(&model, &q, &cfg).unwrap();
        let path = dir.path().join("scores.csv");
        write_scores(&scores, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,score,is_member,scenario,statistic,truncation_fraction\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().ends_with(",1,white_box,max,0.75"));

        let trajs = exact_trajectories(&model, &q, &cfg).unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectories(&trajs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 * 11);
    }

    fn trajectories() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
        (4usize..30, 1usize..12).prop_flat_map(|(n, len)| {
            (
                proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, len), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(|(v, mut l)| {
                    l[0] = true;
                    l[1] = false;
                    (v, l)
                })
        })
    }

    proptest! {
        #[test]
        fn constant_shift_preserves_auc((trajs, labels) in trajectories(), c in -4.0f64..4.0) {
            for f in Statistic::ALL {
                let base: Vec<f64> = trajs.iter().map(|t| apply_statistic(t, *f).unwrap()).collect();
                let shifted: Vec<f64> = trajs
                    .iter()
                    .map(|t| apply_statistic(&t.iter().map(|v| v + c).collect::<Vec<_>>(), *f).unwrap())
                    .collect();
                let len = trajs[0].len() as f64;
                let shift = if *f == Statistic::Sum { c * len } else { c };
                for (b, s) in base.iter().zip(&shifted) {
                    prop_assert!((s - b - shift).abs() < 1e-9);
                }
                // Compare after rounding away the float noise of the shift.
                let round = |v: &[f64]| v.iter().map(|x| (x * 1e6).round()).collect::<Vec<_>>();
                let a = roc_curve(&round(&base), &labels).unwrap().auc;
                let b = roc_curve(&round(&shifted.iter().map(|s| s - shift).collect::<Vec<_>>()), &labels).unwrap().auc;
                prop_assert_eq!(a, b);
            }
        }
    }
}
