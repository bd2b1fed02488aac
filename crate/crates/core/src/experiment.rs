//! Experiment configuration files and the train/attack pipeline the CLI and
//! sweeps run on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    blackbox_agnostic_scores, graybox_scores, shadow_scores, whitebox_scores, AttackConfig, MembershipScores,
    Scenario, Statistic,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{make_gaussian_mixture, read_dataset, split, Dataset, QuerySet, SplitSpec};
use crate::diffusion::{ancestral_sample, DiffusionModel, GrayBoxView};
use crate::error::{Error, Result};
use crate::metrics::{AttackReport, RocCurve, REPORT_FPRS};
use crate::rng::derive_seed;
use crate::schedule::ScheduleKind;
use crate::train::{train_model, train_shadow, TrainConfig, TrainOutcome};

pub const CONFIG_VERSION: u32 = 1;

/// Salts that separate the seeds derived from the global seed.
mod salt {
    pub const DATA: u64 = 101;
    pub const SPLIT: u64 = 102;
    pub const TRAIN: u64 = 103;
    pub const SHADOW: u64 = 104;
    pub const NOISE: u64 = 105;
    pub const SAMPLE: u64 = 106;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub components: usize,
    pub dim: usize,
    pub separation: f64,
    pub member_count: usize,
    /// Size of the non-member pool; defaults to `member_count`, at least 64.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonmember_count: Option<usize>,
    /// Balanced query size; defaults to `2 * min(member_count, 64)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_size: Option<usize>,
    /// Load points from a dataset CSV (with its `.meta.json` sidecar)
    /// instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Salt mixed into the global seed.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            components: 4,
            dim: 8,
            separation: 3.0,
            member_count: 64,
            nonmember_count: None,
            query_size: None,
            path: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn query_size(&self) -> usize {
        self.query_size.unwrap_or(2 * self.member_count.min(64))
    }

    pub fn nonmember_count(&self) -> usize {
        self.nonmember_count.unwrap_or_else(|| self.member_count.max(self.query_size() / 2).max(64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricTargets {
    pub fpr_targets: Vec<f64>,
}

impl Default for MetricTargets {
    fn default() -> Self {
        Self { fpr_targets: REPORT_FPRS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Artifacts {
    /// Target checkpoint; defaults to `<out_dir>/model.ckpt`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Pre-generated synthetic samples for the agnostic attack.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<PathBuf>,
}

/// Axes of a sweep. Unset axes take the base configuration's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Vec<Scenario>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<Vec<Statistic>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation_fraction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_count: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suppression_keep: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheduler_guess: Option<Vec<ScheduleKind>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Shadow-model training for the model-specific black-box attack;
    /// defaults to `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: MetricTargets,
    #[serde(default)]
    pub artifacts: Artifacts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: default_out_dir(),
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            shadow: None,
            metrics: MetricTargets::default(),
            artifacts: Artifacts::default(),
            sweep: None,
            attacks: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Checks values and that every referenced input path exists.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        let d = &self.dataset;
        if d.dim == 0 || d.components == 0 || d.member_count == 0 {
            return Err(Error::Config("dataset dim, components and member_count must be positive".into()));
        }
        if d.path.is_none() && !(d.separation > 0.0 && d.separation.is_finite()) {
            return Err(Error::Config("dataset separation must be positive".into()));
        }
        let q = d.query_size();
        if q == 0 || !q.is_multiple_of(2) || q / 2 > d.member_count || q / 2 > d.nonmember_count() {
            return Err(Error::Config(format!(
                "query size {q} must be even and fit both pools ({} members, {} non-members)",
                d.member_count,
                d.nonmember_count()
            )));
        }
        self.train.validate(d.member_count).map_err(cfg_err)?;
        if let Some(s) = &self.shadow {
            if s.learning_rate.is_nan() || s.learning_rate <= 0.0 || s.batch_size == 0 {
                return Err(Error::Config(
                    "shadow config needs positive batch size and learning rate".into(),
                ));
            }
        }
        for a in &self.attacks {
            a.validate().map_err(cfg_err)?;
        }
        if let Some(f) = self.metrics.fpr_targets.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("FPR target {f} outside [0, 1]")));
        }
        for p in [&d.path, &self.artifacts.synthetic].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.artifacts.checkpoint {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.artifacts.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// Training config with its seed derived from the global seed.
    pub fn target_train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, &[salt::TRAIN, self.train.seed]), ..self.train.clone() }
    }

    pub fn shadow_train_config(&self) -> TrainConfig {
        let base = self.shadow.as_ref().unwrap_or(&self.train);
        TrainConfig { seed: derive_seed(self.seed, &[salt::SHADOW, base.seed]), ..base.clone() }
    }

    /// Seed for `sample` runs.
    pub fn sampling_seed(&self) -> u64 {
        derive_seed(self.seed, &[salt::SAMPLE, u64::MAX])
    }

    /// Attack config with noise and sampling seeds derived from the global seed.
    pub fn resolved_attack(&self, attack: &AttackConfig) -> AttackConfig {
        AttackConfig {
            noise_seed: derive_seed(self.seed, &[salt::NOISE, attack.noise_seed]),
            sample_seed: derive_seed(self.seed, &[salt::SAMPLE, attack.sample_seed]),
            ..attack.clone()
        }
    }
}

/// Short content hash of any serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Dataset standardized on its member pool, the split and the query set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: SplitSpec,
    pub query: QuerySet,
}

impl Prepared {
    pub fn members(&self) -> Vec<Vec<f64>> {
        self.dataset.select(&self.split.member_ids)
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let d = &cfg.dataset;
    let mut dataset = match &d.path {
        Some(p) => read_dataset(p)?,
        None => make_gaussian_mixture(
            d.member_count + d.nonmember_count(),
            d.components,
            d.dim,
            d.separation,
            derive_seed(cfg.seed, &[salt::DATA, d.seed]),
        )?,
    };
    let split =
        split(dataset.len(), d.member_count, d.query_size(), derive_seed(cfg.seed, &[salt::SPLIT, d.seed]))?;
    dataset.standardize_on(&split.member_ids)?;
    let query = QuerySet::from_split(&dataset, &split);
    Ok(Prepared { dataset, split, query })
}

pub fn train_target(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<TrainOutcome> {
    train_model(&prepared.members(), &cfg.target_train_config())
}

/// Where a model-specific attack gets its shadow from.
pub enum ShadowSource<'a> {
    /// Train one from samples of the target.
    Train,
    /// Use this model (a cached shadow, or the target itself for testing).
    Given(&'a DiffusionModel),
}

/// Runs one attack against `target`. `synthetic` supplies agnostic-attack
/// samples; when absent they are drawn from the target.
pub fn run_attack(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    target: &DiffusionModel,
    query: &QuerySet,
    synthetic: Option<&[Vec<f64>]>,
    shadow: ShadowSource<'_>,
) -> Result<MembershipScores> {
    let a = cfg.resolved_attack(attack);
    match a.scenario {
        Scenario::WhiteBox => whitebox_scores(target, query, &a),
        Scenario::GrayBox => graybox_scores(&GrayBoxView(target), query, &a),
        Scenario::BlackBoxSpecific => match shadow {
            ShadowSource::Given(m) => shadow_scores(m, query, &a),
            ShadowSource::Train => {
                let trained =
                    train_shadow(target, a.synthetic_count, &cfg.shadow_train_config(), a.sample_seed)?;
                shadow_scores(&trained.model, query, &a)
            }
        },
        Scenario::BlackBoxAgnostic => match synthetic {
            Some(s) => blackbox_agnostic_scores(s, query, &a),
            None => {
                let s = ancestral_sample(target, a.synthetic_count, a.sample_seed)?;
                blackbox_agnostic_scores(&s, query, &a)
            }
        },
    }
}

/// Trains (or loads from `cache_dir`) the shadow model for an attack.
pub fn cached_shadow(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    target: &DiffusionModel,
    target_key: &str,
    cache_dir: &Path,
) -> Result<DiffusionModel> {
    let a = cfg.resolved_attack(attack);
    let shadow_cfg = cfg.shadow_train_config();
    let key = config_hash(&(target_key, &shadow_cfg, a.synthetic_count, a.sample_seed))?;
    let path = cache_dir.join(format!("shadow-{key}.ckpt"));
    if let Ok(m) = load_checkpoint(&path) {
        return Ok(m);
    }
    let trained = train_shadow(target, a.synthetic_count, &shadow_cfg, a.sample_seed)?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    save_checkpoint(&trained.model, &path)?;
    Ok(trained.model)
}

/// One line of a consolidated report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config_hash: String,
    pub scenario: Scenario,
    pub statistic: Statistic,
    pub truncation_fraction: f64,
    pub suppression_keep: Option<f64>,
    pub scheduler_guess: Option<ScheduleKind>,
    pub member_count: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub tpr_at: BTreeMap<String, f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn new(cfg: &ExperimentConfig, attack: &AttackConfig, hash: String) -> Self {
        Self {
            config_hash: hash,
            scenario: attack.scenario,
            statistic: attack.effective_statistic(),
            truncation_fraction: attack.truncation_fraction,
            suppression_keep: attack.suppression_keep,
            scheduler_guess: attack.scheduler_guess,
            member_count: cfg.dataset.member_count,
            seed: cfg.seed,
            auc: None,
            tpr_at: BTreeMap::new(),
            accuracy: None,
            f1: None,
            error: None,
        }
    }

    pub fn with_report(mut self, report: &AttackReport) -> Self {
        self.auc = Some(report.auc);
        self.tpr_at = report.tpr_at.clone();
        self.accuracy = Some(report.accuracy);
        self.f1 = Some(report.f1);
        self
    }

    pub fn with_error(mut self, err: &Error) -> Self {
        self.error = Some(err.to_string());
        self
    }
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_rows(rows: &[ReportRow], fpr_targets: &[f64], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = [
        "config_hash",
        "scenario",
        "statistic",
        "truncation_fraction",
        "suppression_keep",
        "scheduler_guess",
        "member_count",
        "seed",
        "auc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(fpr_targets.iter().map(|f| format!("tpr_at_fpr_{f}")));
    header.extend(["accuracy", "f1", "error"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.config_hash.clone(),
            r.scenario.to_string(),
            r.statistic.to_string(),
            r.truncation_fraction.to_string(),
            opt(&r.suppression_keep),
            opt(&r.scheduler_guess),
            r.member_count.to_string(),
            r.seed.to_string(),
            opt(&r.auc),
        ];
        rec.extend(fpr_targets.iter().map(|f| opt(&r.tpr_at.get(&f.to_string()))));
        rec.extend([opt(&r.accuracy), opt(&r.f1), opt(&r.error)]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Scores plus derived metrics for one attack.
pub struct AttackResult {
    pub scores: MembershipScores,
    pub report: AttackReport,
    pub roc: RocCurve,
}

pub fn evaluate(cfg: &ExperimentConfig, scores: MembershipScores) -> Result<AttackResult> {
    let (report, roc) = scores.report_at(cfg.seed, &cfg.metrics.fpr_targets)?;
    Ok(AttackResult { scores, report, roc })
}

/// One cell of a sweep: the base config with every swept axis fixed and a
/// single attack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub config: ExperimentConfig,
    pub attack: AttackConfig,
}

impl SweepCell {
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Key of everything the target model depends on.
    pub fn model_key(&self) -> Result<String> {
        let c = &self.config;
        config_hash(&(c.seed, &c.dataset, &c.train))
    }
}

/// Expands the Cartesian product of the sweep axes over the base config.
/// Axis order (outermost first): seed, member_count, scenario, scheduler
/// guess, suppression, statistic, truncation fraction.
pub fn expand_sweep(base: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    let axes = base.sweep.clone().unwrap_or_default();
    let attacks = if base.attacks.is_empty() { vec![AttackConfig::default()] } else { base.attacks.clone() };
    let seeds = axes.seed.clone().unwrap_or_else(|| vec![base.seed]);
    let members = axes.member_count.clone().unwrap_or_else(|| vec![base.dataset.member_count]);
    let mut cells = Vec::new();
    for &seed in &seeds {
        for &member_count in &members {
            let mut config = base.clone();
            config.seed = seed;
            config.dataset.member_count = member_count;
            config.sweep = None;
            config.attacks = Vec::new();
            for attack in &attacks {
                let scenarios = axes.scenario.clone().unwrap_or_else(|| vec![attack.scenario]);
                for &scenario in &scenarios {
                    let guesses: Vec<Option<ScheduleKind>> = match &axes.scheduler_guess {
                        Some(g) => g.iter().copied().map(Some).collect(),
                        None => vec![attack.scheduler_guess],
                    };
                    let keeps: Vec<Option<f64>> = match &axes.suppression_keep {
                        Some(k) => k.iter().copied().map(Some).collect(),
                        None => vec![attack.suppression_keep],
                    };
                    let stats: Vec<Option<Statistic>> = match &axes.statistic {
                        Some(s) => s.iter().copied().map(Some).collect(),
                        None => vec![attack.statistic],
                    };
                    let fractions =
                        axes.truncation_fraction.clone().unwrap_or_else(|| vec![attack.truncation_fraction]);
                    for &scheduler_guess in &guesses {
                        for &suppression_keep in &keeps {
                            for &statistic in &stats {
                                for &truncation_fraction in &fractions {
                                    let attack = AttackConfig {
                                        scenario,
                                        statistic,
                                        truncation_fraction,
                                        suppression_keep,
                                        scheduler_guess,
                                        ..attack.clone()
                                    };
                                    attack.validate().map_err(|e| Error::Config(e.to_string()))?;
                                    cells.push(SweepCell { config: config.clone(), attack });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec { dim: 2, member_count: 8, query_size: Some(8), ..DatasetSpec::default() },
            train: TrainConfig {
                steps: 20,
                batch_size: 4,
                hidden: vec![8],
                time_embed_dim: 4,
                diffusion_steps: 10,
                ..TrainConfig::default()
            },
            attacks: vec![
                AttackConfig::new(Scenario::WhiteBox),
                AttackConfig {
                    suppression_keep: Some(0.5),
                    scheduler_guess: Some(ScheduleKind::Linear),
                    feature_map: crate::attacks::FeatureMap::RandomProjection { out_dim: 3, seed: 2 },
                    ..AttackConfig::new(Scenario::GrayBox)
                },
            ],
            sweep: Some(SweepAxes { truncation_fraction: Some(vec![1.0, 0.5]), ..SweepAxes::default() }),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let cfg = tiny();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let minimal = ExperimentConfig::from_toml("version = 1").unwrap();
        assert_eq!(minimal, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("version = 1\nsede = 3"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("version = 1\n[train]\nstep = 3").is_err());
        assert!(ExperimentConfig::from_toml("version = 1\n[[attacks]]\nscenario = \"grey_box\"").is_err());
        assert!(ExperimentConfig::from_toml("version = 2").is_err());
        assert!(ExperimentConfig::from_toml("seed = 2").is_err());
    }

    #[test]
    fn validation_checks_paths_and_sizes() {
        let mut cfg = tiny();
        cfg.validate().unwrap();
        cfg.artifacts.checkpoint = Some(PathBuf::from("/nonexistent/x.ckpt"));
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.dataset.query_size = Some(18);
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.train.batch_size = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn prepare_is_deterministic_and_balanced() {
        let cfg = tiny();
        let a = prepare(&cfg).unwrap();
        let b = prepare(&cfg).unwrap();
        assert_eq!(a.query, b.query);
        a.split.validate().unwrap();
        assert_eq!(a.query.len(), 8);
        assert_eq!(a.query.labels().iter().filter(|m| **m).count(), 4);
        let other = prepare(&ExperimentConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.query, a.query);
    }

    #[test]
    fn sweep_expansion() {
        let cfg = tiny();
        let cells = expand_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 4);
        let mut cfg = tiny();
        cfg.attacks = vec![AttackConfig::default()];
        cfg.sweep = Some(SweepAxes {
            statistic: Some(Statistic::ALL.to_vec()),
            truncation_fraction: Some(vec![1.0, 0.975, 0.875, 0.75, 0.625, 0.5]),
            ..SweepAxes::default()
        });
        let cells = expand_sweep(&cfg).unwrap();
        assert_eq!(cells.len(), 24);
        let keys: std::collections::HashSet<_> = cells.iter().map(|c| c.model_key().unwrap()).collect();
        assert_eq!(keys.len(), 1);
        let hashes: std::collections::HashSet<_> = cells.iter().map(|c| c.hash().unwrap()).collect();
        assert_eq!(hashes.len(), 24);

        cfg.sweep = Some(SweepAxes { seed: Some(vec![1, 2, 3]), ..SweepAxes::default() });
        let cells = expand_sweep(&cfg).unwrap();
        let keys: std::collections::HashSet<_> = cells.iter().map(|c| c.model_key().unwrap()).collect();
        assert_eq!(keys.len(), 3);

        cfg.sweep = Some(SweepAxes { truncation_fraction: Some(vec![1.5]), ..SweepAxes::default() });
        assert!(expand_sweep(&cfg).is_err());
    }

    #[test]
    fn pipeline_runs_every_scenario() {
        let cfg = tiny();
        let prepared = prepare(&cfg).unwrap();
        let target = train_target(&cfg, &prepared).unwrap().model;
        for scenario in Scenario::ALL {
            let attack = AttackConfig { synthetic_count: 8, ..AttackConfig::new(*scenario) };
            let scores =
                run_attack(&cfg, &attack, &target, &prepared.query, None, ShadowSource::Train).unwrap();
            let result = evaluate(&cfg, scores).unwrap();
            assert!((0.0..=1.0).contains(&result.report.auc));
            assert_eq!(result.report.scenario, scenario.as_str());
        }
    }

    #[test]
    fn rows_csv_has_error_column() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let row = ReportRow::new(&cfg, &cfg.attacks[0], "abc".into()).with_error(&Error::invalid("boom"));
        let path = dir.path().join("rows.csv");
        write_rows(&[row], &REPORT_FPRS, &path).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.ends_with("tpr_at_fpr_0.001,tpr_at_fpr_0.01,accuracy,f1,error"));
        assert!(text.lines().nth(1).unwrap().contains("invalid argument: boom"));
    }
}
