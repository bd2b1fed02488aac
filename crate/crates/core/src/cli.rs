//! Command-line front end: `train`, `sample`, `attack`, `sweep`, `report`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attacks::{
    estimated_trajectories, exact_trajectories, write_scores, write_trajectories, AttackConfig, Scenario,
    Statistic,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{read_points, write_dataset, write_points};
use crate::diffusion::{ancestral_sample, DiffusionModel, GrayBoxView};
use crate::error::{Error, Result};
use crate::experiment::{
    cached_shadow, config_hash, evaluate, expand_sweep, prepare, run_attack, train_target, write_rows,
    ExperimentConfig, Prepared, ReportRow, ShadowSource, SweepCell,
};
use crate::metrics::{write_report, write_roc, AttackReport, REPORT_FPRS};

pub const THREADS_ENV: &str = "DIFFMIA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "diffmia", version, about = "Membership-inference attacks on small diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the target model; writes model.ckpt, loss.csv and the dataset.
    Train(Common),
    /// Draw samples from the target model into samples.csv.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 512)]
        count: usize,
    },
    /// Run the configured attacks against the target checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Run a single attack of this scenario instead of the configured list.
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Statistic for --scenario (sum, median, min, max).
        #[arg(long, requires = "scenario")]
        statistic: Option<Statistic>,
        /// Truncation fraction for --scenario.
        #[arg(long, requires = "scenario")]
        fraction: Option<f64>,
    },
    /// Run the Cartesian product of the config's sweep axes.
    Sweep(Common),
    /// Recompute reports from score files.
    Report {
        /// Experiment config; supplies the output directory and FPR targets.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory to search and write summary.csv into.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score CSVs; defaults to every scores.csv under the output directory.
        #[arg(long)]
        scores: Vec<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A second initialization in the same process (tests) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(c) => cmd_train(&load_config(&c)?),
        Command::Sample { common, count } => cmd_sample(&load_config(&common)?, count),
        Command::Attack { common, scenario, statistic, fraction } => {
            let mut cfg = load_config(&common)?;
            if let Some(scenario) = scenario {
                let mut a = AttackConfig { statistic, ..AttackConfig::new(scenario) };
                if let Some(f) = fraction {
                    a.truncation_fraction = f;
                }
                a.validate().map_err(usage)?;
                cfg.attacks = vec![a];
            }
            cmd_attack(&cfg)
        }
        Command::Sweep(c) => cmd_sweep(&load_config(&c)?),
        Command::Report { config, out, scores } => {
            let cfg = match &config {
                Some(p) => Some(ExperimentConfig::load(p).map_err(usage)?),
                None => None,
            };
            let out = out
                .or_else(|| cfg.as_ref().map(|c| c.out_dir.clone()))
                .ok_or_else(|| usage(Error::Config("report needs --out or --config".into())))?;
            let fprs = cfg.map_or_else(|| REPORT_FPRS.to_vec(), |c| c.metrics.fpr_targets);
            cmd_report(&out, scores, &fprs)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&c.config).map_err(usage)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_loss_log(log: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(["step", "loss"])?;
    for (step, loss) in log {
        w.write_record([step.to_string(), loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let prepared = prepare(cfg)?;
    write_dataset(&prepared.dataset, &out.join("dataset.csv"))?;
    write_text(
        &out.join("split.json"),
        &serde_json::to_string_pretty(&prepared.split).map_err(Error::from)?,
    )?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = train_target(cfg, &prepared)?;
    save_checkpoint(&outcome.model, &out.join("model.ckpt"))?;
    write_loss_log(&outcome.loss_log, &out.join("loss.csv"))?;
    let last = outcome.loss_log.last().map_or(f64::NAN, |l| l.1);
    eprintln!(
        "trained {} steps on {} members; last batch loss {last:.4}; wrote {}",
        cfg.train.steps,
        prepared.split.member_ids.len(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn load_target(cfg: &ExperimentConfig) -> Result<DiffusionModel, Failure> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(usage(Error::Config(format!(
            "no target checkpoint at {} (run `train` first or set artifacts.checkpoint)",
            path.display()
        ))));
    }
    Ok(load_checkpoint(&path)?)
}

fn cmd_sample(cfg: &ExperimentConfig, count: usize) -> Result<(), Failure> {
    if count == 0 {
        return Err(usage(Error::Config("--count must be positive".into())));
    }
    let model = load_target(cfg)?;
    create_dir(&cfg.out_dir)?;
    let samples = ancestral_sample(&model, count, cfg.sampling_seed())?;
    let path = cfg.out_dir.join("samples.csv");
    write_points(&samples, &path)?;
    eprintln!("wrote {count} samples to {}", path.display());
    Ok(())
}

fn default_attacks(cfg: &ExperimentConfig) -> Vec<AttackConfig> {
    if cfg.attacks.is_empty() {
        vec![AttackConfig::new(Scenario::WhiteBox), AttackConfig::new(Scenario::GrayBox)]
    } else {
        cfg.attacks.clone()
    }
}

fn load_synthetic(cfg: &ExperimentConfig) -> Result<Option<Vec<Vec<f64>>>> {
    cfg.artifacts.synthetic.as_deref().map(read_points).transpose()
}

fn print_rows(rows: &[ReportRow], fprs: &[f64]) {
    for r in rows {
        let tprs: Vec<String> = fprs
            .iter()
            .map(|f| {
                let v = r.tpr_at.get(&f.to_string()).map_or("-".to_string(), |v| format!("{v:.3}"));
                format!("tpr@{f}={v}")
            })
            .collect();
        match (&r.error, r.auc) {
            (Some(e), _) => println!("{} {} {} error: {e}", r.config_hash, r.scenario, r.statistic),
            (None, Some(auc)) => println!(
                "{} {} {} trun={} auc={auc:.4} {} acc={:.3} f1={:.3}",
                r.config_hash,
                r.scenario,
                r.statistic,
                r.truncation_fraction,
                tprs.join(" "),
                r.accuracy.unwrap_or(f64::NAN),
                r.f1.unwrap_or(f64::NAN)
            ),
            (None, None) => {}
        }
    }
}

fn write_attack_outputs(
    dir: &Path,
    result: &crate::experiment::AttackResult,
    trajectories: Option<Vec<crate::diffusion::LossTrajectory>>,
) -> Result<()> {
    create_dir(dir)?;
    write_scores(&result.scores, &dir.join("scores.csv"))?;
    write_roc(&result.roc, &dir.join("roc.csv"))?;
    write_report(&result.report, &dir.join("report.csv"))?;
    if let Some(t) = trajectories {
        write_trajectories(&t, &dir.join("trajectories.csv"))?;
    }
    Ok(())
}

fn cmd_attack(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let attacks = default_attacks(cfg);
    let synthetic = load_synthetic(cfg)?;
    let needs_model =
        attacks.iter().any(|a| !(a.scenario == Scenario::BlackBoxAgnostic && synthetic.is_some()));
    let target = if needs_model { Some(load_target(cfg)?) } else { None };
    let prepared = prepare(cfg)?;
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for (i, attack) in attacks.iter().enumerate() {
        let hash = config_hash(&(cfg, attack))?;
        let row = ReportRow::new(cfg, attack, hash);
        let scores = match target.as_ref() {
            Some(t) => {
                run_attack(cfg, attack, t, &prepared.query, synthetic.as_deref(), ShadowSource::Train)?
            }
            None => {
                let s = synthetic.as_deref().expect("agnostic attack without samples");
                crate::attacks::blackbox_agnostic_scores(s, &prepared.query, &cfg.resolved_attack(attack))?
            }
        };
        let result = evaluate(cfg, scores)?;
        let trajectories = match (attack.scenario, target.as_ref()) {
            (Scenario::WhiteBox, Some(t)) => {
                Some(exact_trajectories(t, &prepared.query, &cfg.resolved_attack(attack))?)
            }
            (Scenario::GrayBox, Some(t)) => {
                Some(estimated_trajectories(&GrayBoxView(t), &prepared.query, &cfg.resolved_attack(attack))?)
            }
            _ => None,
        };
        let dir = cfg.out_dir.join(format!("attack_{i}_{}", attack.scenario));
        write_attack_outputs(&dir, &result, trajectories)?;
        rows.push(row.with_report(&result.report));
    }
    write_rows(&rows, &cfg.metrics.fpr_targets, &cfg.out_dir.join("reports.csv"))?;
    print_rows(&rows, &cfg.metrics.fpr_targets);
    Ok(())
}

/// Per-model state shared by the sweep cells that use it.
struct ModelEntry {
    prepared: Prepared,
    model: DiffusionModel,
    synthetic: HashMap<(usize, u64), Vec<Vec<f64>>>,
}

fn model_for(cell: &SweepCell, key: &str, models_dir: &Path) -> Result<ModelEntry> {
    let cfg = &cell.config;
    let prepared = prepare(cfg)?;
    let dir = models_dir.join(key);
    let path = dir.join("model.ckpt");
    let model = match load_checkpoint(&path) {
        Ok(m) => m,
        Err(_) => {
            create_dir(&dir)?;
            let outcome = train_target(cfg, &prepared)?;
            save_checkpoint(&outcome.model, &path)?;
            write_loss_log(&outcome.loss_log, &dir.join("loss.csv"))?;
            outcome.model
        }
    };
    Ok(ModelEntry { prepared, model, synthetic: HashMap::new() })
}

fn run_cell(
    cell: &SweepCell,
    entry: &mut ModelEntry,
    key: &str,
    models_dir: &Path,
    file_synthetic: Option<&[Vec<f64>]>,
) -> Result<crate::experiment::AttackResult> {
    let cfg = &cell.config;
    let attack = &cell.attack;
    let resolved = cfg.resolved_attack(attack);
    let shadow = if attack.scenario == Scenario::BlackBoxSpecific {
        Some(cached_shadow(cfg, attack, &entry.model, key, models_dir)?)
    } else {
        None
    };
    let synthetic = match (attack.scenario, file_synthetic) {
        (Scenario::BlackBoxAgnostic, None) => {
            let k = (resolved.synthetic_count, resolved.sample_seed);
            if !entry.synthetic.contains_key(&k) {
                let s = ancestral_sample(&entry.model, k.0, k.1)?;
                entry.synthetic.insert(k, s);
            }
            entry.synthetic.get(&k).map(Vec::as_slice)
        }
        (_, s) => s,
    };
    let source = match &shadow {
        Some(m) => ShadowSource::Given(m),
        None => ShadowSource::Train,
    };
    let scores = run_attack(cfg, attack, &entry.model, &entry.prepared.query, synthetic, source)?;
    evaluate(cfg, scores)
}

/// A cell is complete when its result record parses, carries the cell's hash
/// and its score file exists.
fn completed_row(dir: &Path, hash: &str) -> Option<ReportRow> {
    let text = fs::read_to_string(dir.join("result.json")).ok()?;
    let row: ReportRow = serde_json::from_str(&text).ok()?;
    (row.config_hash == hash && row.error.is_none() && dir.join("scores.csv").exists()).then_some(row)
}

fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let cells = expand_sweep(cfg).map_err(usage)?;
    let out = &cfg.out_dir;
    let models_dir = out.join("models");
    let cells_dir = out.join("cells");
    create_dir(&cells_dir)?;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let file_synthetic = load_synthetic(cfg)?;

    let mut models: HashMap<String, ModelEntry> = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    let (mut reused, mut failed) = (0usize, 0usize);
    for (i, cell) in cells.iter().enumerate() {
        let hash = cell.hash()?;
        let dir = cells_dir.join(&hash);
        if let Some(row) = completed_row(&dir, &hash) {
            reused += 1;
            rows.push(row);
            continue;
        }
        let row = ReportRow::new(&cell.config, &cell.attack, hash.clone());
        let key = cell.model_key()?;
        let outcome = (|| -> Result<crate::experiment::AttackResult> {
            if !models.contains_key(&key) {
                let entry = model_for(cell, &key, &models_dir)?;
                models.insert(key.clone(), entry);
            }
            let entry = models.get_mut(&key).unwrap();
            run_cell(cell, entry, &key, &models_dir, file_synthetic.as_deref())
        })();
        let row = match outcome {
            Ok(result) => {
                let row = row.with_report(&result.report);
                create_dir(&dir)?;
                write_text(&dir.join("config.toml"), &cell_toml(cell)?)?;
                write_attack_outputs(&dir, &result, None)?;
                write_text(
                    &dir.join("result.json"),
                    &serde_json::to_string_pretty(&row).map_err(Error::from)?,
                )?;
                row
            }
            Err(e) => {
                failed += 1;
                eprintln!("cell {} ({hash}) failed: {e}", i + 1);
                row.with_error(&e)
            }
        };
        rows.push(row);
    }
    write_rows(&rows, &cfg.metrics.fpr_targets, &out.join("sweep.csv"))?;
    eprintln!(
        "sweep: {} cells, {reused} reused, {failed} failed; wrote {}",
        cells.len(),
        out.join("sweep.csv").display()
    );
    Ok(())
}

/// Standalone config reproducing one cell.
fn cell_toml(cell: &SweepCell) -> Result<String> {
    let mut cfg = cell.config.clone();
    cfg.attacks = vec![cell.attack.clone()];
    cfg.to_toml()
}

fn find_scores(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    let mut entries: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_scores(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "scores.csv") {
            found.push(p);
        }
    }
    Ok(())
}

/// Scores, labels, scenario, statistic and truncation fraction of one file.
type ScoreFile = (Vec<f64>, Vec<bool>, String, String, f64);

fn read_scores(path: &Path) -> Result<ScoreFile> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut scenario, mut statistic, mut fraction) = (String::new(), String::new(), f64::NAN);
    let bad = |what: &str| Error::invalid(format!("{}: bad {what}", path.display()));
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(bad("row width"));
        }
        scores.push(rec[1].parse::<f64>().map_err(|_| bad("score"))?);
        labels.push(match &rec[2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("is_member")),
        });
        scenario = rec[3].to_string();
        statistic = rec[4].to_string();
        fraction = rec[5].parse().map_err(|_| bad("truncation_fraction"))?;
    }
    Ok((scores, labels, scenario, statistic, fraction))
}

fn cmd_report(out: &Path, scores: Vec<PathBuf>, fprs: &[f64]) -> Result<(), Failure> {
    let mut files = scores;
    if files.is_empty() {
        find_scores(out, &mut files)?;
    }
    if files.is_empty() {
        return Err(usage(Error::Config(format!("no scores.csv found under {}", out.display()))));
    }
    create_dir(out)?;
    let path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let mut header = vec!["source", "scenario", "statistic", "truncation_fraction", "auc"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(fprs.iter().map(|f| format!("tpr_at_fpr_{f}")));
    header.extend(["accuracy".to_string(), "f1".to_string()]);
    w.write_record(&header).map_err(Error::from)?;
    for f in &files {
        let (s, l, scenario, statistic, fraction) = read_scores(f)?;
        let (report, roc) = AttackReport::from_scores(&s, &l, &scenario, &statistic, fraction, 0, fprs)?;
        if let Some(dir) = f.parent() {
            write_roc(&roc, &dir.join("roc.csv"))?;
        }
        let mut rec = vec![
            f.display().to_string(),
            scenario.clone(),
            statistic.clone(),
            fraction.to_string(),
            report.auc.to_string(),
        ];
        rec.extend(fprs.iter().map(|x| report.tpr(*x).unwrap_or(f64::NAN).to_string()));
        rec.extend([report.accuracy.to_string(), report.f1.to_string()]);
        w.write_record(&rec).map_err(Error::from)?;
        println!(
            "{} {scenario} {statistic} trun={fraction} auc={:.4} acc={:.3} f1={:.3}",
            f.display(),
            report.auc,
            report.accuracy,
            report.f1
        );
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
