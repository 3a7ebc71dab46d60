//! End-to-end stages behind the CLI: generate → fit → validate → control →
//! report. Each stage reads its inputs from and writes its artifacts under
//! the configured output directory:
//!
//! ```text
//! <out>/dataset/            manifest.json + binary trajectories
//! <out>/models/<sub>.json   fitted lifted models
//! <out>/validation/         errors_<sub>.csv, summary.csv, summary.json
//! <out>/control/            log.csv, summary.json
//! <out>/report.json, report.txt
//! ```
//!
//! CSV and JSON outputs depend only on the configuration, never on thread
//! count or timing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Subsystem};
use crate::dataset::{generate_dataset, Split, TrajectoryDataset};
use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::mpc::{run_closed_loop, CaptureSummary, ClosedLoopLog, Controller};
use crate::parallel::Execution;
use crate::sindy::{fit_model, validate_trajectory, LiftedModel, StlsConfig, TrajectoryValidation};

/// Bounded-growth limit on the final-to-early prediction error ratio.
pub const GROWTH_LIMIT: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn model(&self, sub: Subsystem) -> PathBuf {
        self.root.join("models").join(format!("{}.json", sub.name()))
    }

    pub fn validation(&self) -> PathBuf {
        self.root.join("validation")
    }

    pub fn control(&self) -> PathBuf {
        self.root.join("control")
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

pub fn cmd_generate(cfg: &ExperimentConfig, exec: Execution) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let plant = Plant::with_params(cfg.plant.clone())?;
    info!(
        "generating {} trajectories of {} s (seed {})",
        cfg.dataset.n_traj, cfg.dataset.duration, cfg.seed
    );
    let ds = generate_dataset(&plant, &cfg.dataset, cfg.seed, exec)?;
    let dir = Paths::new(&cfg.output_dir).dataset();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    if let Err(e) = ds.save(&dir, cfg.echo()) {
        // Never leave a half-written dataset that later stages could pick up.
        let _ = fs::remove_dir_all(&dir);
        return Err(e);
    }
    info!("dataset written to {}", dir.display());
    Ok(ds)
}

/// Load the dataset and confirm it was produced by this configuration.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<TrajectoryDataset> {
    let dir = Paths::new(&cfg.output_dir).dataset();
    let ds = TrajectoryDataset::load(&dir)?;
    if ds.config != cfg.dataset || ds.master_seed != cfg.seed {
        return Err(Error::Config(format!(
            "dataset in {} was generated with different settings or seed; rerun generate",
            dir.display()
        )));
    }
    Ok(ds)
}

/// Settling window clipped so short (scaled) trajectories still yield rows.
fn effective_stls(cfg: &ExperimentConfig) -> StlsConfig {
    let mut stls = cfg.identification.stls.clone();
    let limit = 0.5 * cfg.dataset.duration;
    if stls.settle_time > limit {
        warn!(
            "settle_time {} s exceeds half the trajectory length; using {} s",
            stls.settle_time, limit
        );
        stls.settle_time = limit;
    }
    stls
}

pub fn cmd_fit(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<(Subsystem, LiftedModel)>> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let stls = effective_stls(cfg);
    let paths = Paths::new(&cfg.output_dir);
    let mut out = Vec::new();
    for &sub in &cfg.identification.subsystems {
        let mut model = fit_model(ds.split(Split::Train), &sub.dictionary(), &stls, cfg.dataset.dt, exec)?;
        let kept: usize = model.diagnostics.columns.iter().map(|c| c.support).sum();
        info!(
            "{}: {} of {} coefficients kept, spectral radius {:?}",
            sub.name(),
            kept,
            model.xi.len(),
            model.spectral_radius()
        );
        model.echo = cfg.echo();
        model.save(&paths.model(sub))?;
        out.push((sub, model));
    }
    Ok(out)
}

pub fn load_models(cfg: &ExperimentConfig) -> Result<Vec<(Subsystem, LiftedModel)>> {
    let paths = Paths::new(&cfg.output_dir);
    cfg.identification
        .subsystems
        .iter()
        .map(|&sub| {
            let path = paths.model(sub);
            let model = LiftedModel::load(&path)?;
            if model.dictionary.name != sub.dictionary().name {
                return Err(Error::format(&path, format!("expected a {} model", sub.name())));
            }
            if (model.dt - cfg.dataset.dt).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "{} has dt {} but the configuration uses {}",
                    path.display(),
                    model.dt,
                    cfg.dataset.dt
                )));
            }
            Ok((sub, model))
        })
        .collect()
}

fn series(r: &TrajectoryValidation, i: usize) -> &(String, Vec<f64>, Vec<f64>) {
    &r.blocks[i]
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregate prediction-error statistics of one state block over the
/// validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub subsystem: String,
    pub block: String,
    pub trajectories: usize,
    /// Time of the early error sample (a tenth of the horizon), s.
    pub early_time: f64,
    pub final_time: f64,
    pub median_error_early: f64,
    pub median_error_final: f64,
    /// median_error_final / median_error_early.
    pub growth_ratio: f64,
    /// Median over trajectories of the time-averaged error.
    pub median_model_error: f64,
    pub median_persistence_error: f64,
    pub max_model_error: f64,
    pub bounded: bool,
    pub beats_persistence: bool,
}

impl BlockSummary {
    pub fn passes(&self) -> bool {
        self.bounded && self.beats_persistence
    }
}

pub fn summarize_block(subsystem: &str, block_index: usize, runs: &[TrajectoryValidation]) -> BlockSummary {
    let first = &runs[0];
    let n = first.times.len();
    let last = n - 1;
    let early = ((last as f64) / 10.0).round() as usize;
    let t0 = first.times[0];
    let median_error_early = median(runs.iter().map(|r| series(r, block_index).1[early]).collect());
    let median_error_final = median(runs.iter().map(|r| series(r, block_index).1[last]).collect());
    let growth_ratio = median_error_final / median_error_early;
    let median_model_error = median(runs.iter().map(|r| mean(&series(r, block_index).1)).collect());
    let median_persistence_error = median(runs.iter().map(|r| mean(&series(r, block_index).2)).collect());
    let max_model_error = runs
        .iter()
        .flat_map(|r| series(r, block_index).1.iter().copied())
        .fold(0.0, f64::max);
    BlockSummary {
        subsystem: subsystem.to_string(),
        block: first.blocks[block_index].0.clone(),
        trajectories: runs.len(),
        early_time: first.times[early] - t0,
        final_time: first.times[last] - t0,
        median_error_early,
        median_error_final,
        growth_ratio,
        median_model_error,
        median_persistence_error,
        max_model_error,
        bounded: growth_ratio.is_finite() && growth_ratio <= GROWTH_LIMIT,
        beats_persistence: median_model_error < median_persistence_error,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub blocks: Vec<BlockSummary>,
}

impl ValidationReport {
    pub fn passes(&self) -> bool {
        self.blocks.iter().all(BlockSummary::passes)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "subsystem,block,trajectories,early_time,final_time,median_error_early,median_error_final,\
             growth_ratio,median_model_error,median_persistence_error,max_model_error,bounded,beats_persistence\n",
        );
        for b in &self.blocks {
            writeln!(
                out,
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{}",
                b.subsystem,
                b.block,
                b.trajectories,
                b.early_time,
                b.final_time,
                b.median_error_early,
                b.median_error_final,
                b.growth_ratio,
                b.median_model_error,
                b.median_persistence_error,
                b.max_model_error,
                b.bounded,
                b.beats_persistence
            )
            .unwrap();
        }
        out
    }
}

fn errors_csv(runs: &[TrajectoryValidation]) -> String {
    let mut out = String::from("trajectory,t");
    for (name, _, _) in &runs[0].blocks {
        write!(out, ",{name}_model,{name}_persistence").unwrap();
    }
    out.push('\n');
    for r in runs {
        for (k, t) in r.times.iter().enumerate() {
            write!(out, "{},{:e}", r.index, t).unwrap();
            for (_, model, persist) in &r.blocks {
                write!(out, ",{:e},{:e}", model[k], persist[k]).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// Score each model on the validation split: open-loop prediction from the
/// first sample, error per weighted state block, persistence as baseline.
pub fn validate_models(
    cfg: &ExperimentConfig,
    ds: &TrajectoryDataset,
    models: &[(Subsystem, LiftedModel)],
) -> Result<(ValidationReport, Vec<(Subsystem, Vec<TrajectoryValidation>)>)> {
    let trajs: Vec<_> = ds.split(Split::Validation).collect();
    if trajs.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut report = ValidationReport { blocks: Vec::new() };
    let mut series = Vec::new();
    for (sub, model) in models {
        let weighted = sub.tuning(&cfg.mpc).weighted_blocks();
        let blocks: Vec<&str> = model
            .dictionary
            .blocks
            .iter()
            .map(|b| b.name.as_str())
            .filter(|name| weighted.iter().any(|w| w == name))
            .collect();
        let runs = trajs
            .iter()
            .map(|t| validate_trajectory(model, t, &blocks))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..blocks.len() {
            report.blocks.push(summarize_block(sub.name(), i, &runs));
        }
        series.push((*sub, runs));
    }
    Ok((report, series))
}

pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let models = load_models(cfg)?;
    let (report, series) = validate_models(cfg, &ds, &models)?;
    let dir = Paths::new(&cfg.output_dir).validation();
    for (sub, runs) in &series {
        write_file(&dir.join(format!("errors_{}.csv", sub.name())), &errors_csv(runs))?;
    }
    write_file(&dir.join("summary.csv"), &report.to_csv())?;
    write_file(
        &dir.join("summary.json"),
        &to_json(&serde_json::json!({ "echo": cfg.echo(), "report": report })),
    )?;
    for b in &report.blocks {
        info!(
            "{}/{}: growth {:.2}, model {:.3e} vs persistence {:.3e}",
            b.subsystem, b.block, b.growth_ratio, b.median_model_error, b.median_persistence_error
        );
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlRun {
    pub log: ClosedLoopLog,
    pub summary: CaptureSummary,
}

pub fn run_control(cfg: &ExperimentConfig, models: Vec<(Subsystem, LiftedModel)>) -> Result<ControlRun> {
    let plant = Plant::with_params(cfg.plant.clone())?;
    let subsystems = models
        .into_iter()
        .map(|(sub, m)| (m, sub.tuning(&cfg.mpc).clone()))
        .collect();
    let mut controller = Controller::new(subsystems, &cfg.mpc)?;
    let x0 = cfg.control.initial_state.to_si();
    let log = run_closed_loop(&plant, &mut controller, &x0, cfg.control.duration, &cfg.control.integrator)?;
    let summary = log.capture_summary(&controller.input_limits(), &cfg.control.capture);
    Ok(ControlRun { log, summary })
}

pub fn cmd_control(cfg: &ExperimentConfig) -> Result<ControlRun> {
    cfg.validate()?;
    let run = run_control(cfg, load_models(cfg)?)?;
    let dir = Paths::new(&cfg.output_dir).control();
    write_file(&dir.join("log.csv"), &run.log.to_csv())?;
    let faults: Vec<_> = run
        .log
        .faults
        .iter()
        .map(|(step, msg)| serde_json::json!({ "step": step, "message": msg }))
        .collect();
    write_file(
        &dir.join("summary.json"),
        &to_json(&serde_json::json!({ "echo": cfg.echo(), "summary": run.summary, "faults": faults })),
    )?;
    for (step, msg) in &run.log.faults {
        warn!("controller fault at step {step}: {msg}");
    }
    info!(
        "capture time {:?} s, max |r| {:.3e} m, bound violations {}",
        run.summary.capture_time, run.summary.max_abs_position, run.summary.bound_violations
    );
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOverview {
    pub subsystem: String,
    pub observables: usize,
    pub inputs: usize,
    pub nonzero_coefficients: usize,
    pub total_coefficients: usize,
    pub spectral_radius: Option<f64>,
    pub warnings: Vec<String>,
}

/// Collect model, validation and control results into report.json and a
/// plain-text digest. Missing stages are reported as absent.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.output_dir);
    let models: Vec<ModelOverview> = load_models(cfg)?
        .into_iter()
        .map(|(sub, m)| ModelOverview {
            subsystem: sub.name().into(),
            observables: m.n_state(),
            inputs: m.n_input(),
            nonzero_coefficients: m.xi.iter().filter(|v| **v != 0.0).count(),
            total_coefficients: m.xi.len(),
            spectral_radius: m.spectral_radius(),
            warnings: m.diagnostics.warnings.clone(),
        })
        .collect();
    let validation: Option<ValidationReport> = {
        let p = paths.validation().join("summary.json");
        if p.exists() {
            let v: serde_json::Value = read_json(&p)?;
            Some(serde_json::from_value(v["report"].clone()).map_err(|e| Error::format(&p, e))?)
        } else {
            None
        }
    };
    let control: Option<CaptureSummary> = {
        let p = paths.control().join("summary.json");
        if p.exists() {
            let v: serde_json::Value = read_json(&p)?;
            Some(serde_json::from_value(v["summary"].clone()).map_err(|e| Error::format(&p, e))?)
        } else {
            None
        }
    };

    let mut text = String::new();
    writeln!(text, "seed {}", cfg.seed).unwrap();
    for m in &models {
        writeln!(
            text,
            "model {}: {} observables, {} inputs, {}/{} nonzero, spectral radius {}",
            m.subsystem,
            m.observables,
            m.inputs,
            m.nonzero_coefficients,
            m.total_coefficients,
            m.spectral_radius.map_or("n/a".into(), |r| format!("{r:.6}"))
        )
        .unwrap();
    }
    match &validation {
        Some(v) => {
            for b in &v.blocks {
                writeln!(
                    text,
                    "validation {}/{}: growth {:.2} ({}), median error {:.3e} vs persistence {:.3e} ({})",
                    b.subsystem,
                    b.block,
                    b.growth_ratio,
                    if b.bounded { "bounded" } else { "unbounded" },
                    b.median_model_error,
                    b.median_persistence_error,
                    if b.beats_persistence { "better" } else { "worse" }
                )
                .unwrap();
            }
        }
        None => writeln!(text, "validation: not run").unwrap(),
    }
    match &control {
        Some(c) => writeln!(
            text,
            "control: captured {} at {}, max |r| {:.3e} m, bound violations {}, faults {}",
            c.captured,
            c.capture_time.map_or("never".into(), |t| format!("{t:.1} s")),
            c.max_abs_position,
            c.bound_violations,
            c.faults
        )
        .unwrap(),
        None => writeln!(text, "control: not run").unwrap(),
    }
    write_file(
        &paths.root.join("report.json"),
        &to_json(&serde_json::json!({
            "echo": cfg.echo(),
            "models": models,
            "validation": validation,
            "control": control,
        })),
    )?;
    write_file(&paths.root.join("report.txt"), &text)?;
    Ok(text)
}

/// All stages in order.
pub fn run_all(cfg: &ExperimentConfig, exec: Execution) -> Result<String> {
    cmd_generate(cfg, exec)?;
    cmd_fit(cfg, exec)?;
    cmd_validate(cfg)?;
    cmd_control(cfg)?;
    cmd_report(cfg)
}
