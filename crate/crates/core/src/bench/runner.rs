//! The train / select / evaluate pipeline behind `bench` and `noise-bench`.
//!
//! Output layout under the run directory:
//!
//! ```text
//! manifest.toml          seeds, config digest, artifacts, failures
//! config.toml            the resolved configuration
//! data/{train,validate,test}.hds
//! noise-<f>/summary.csv
//! noise-<f>/per_step/<scheme>.csv
//! noise-<f>/models/nnts-<j>.model
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Scheme};
use super::metrics::{write_summary_csv, ErrorReport};
use super::timing::time_execution;
use crate::dataset::{add_noise, build_dataset_with, stride, BuildOptions, Dataset, Split};
use crate::dynamics::SystemSpec;
use crate::flowmap::{save_model, train, FlowMapModel, TrainConfig, TrainHistory};
use crate::hybrid::{hybrid_rollout, HybridScheme};
use crate::integrators::RkTableau;
use crate::multiscale::{cross_validate, integral, multiscale_rollout_batch, Hierarchy, RolloutResult};
use crate::rng::child_seed;
use crate::{Error, Result};

/// Stage indices for [`child_seed`] of the top-level seed.
const SEED_TRAIN_IC: u64 = 0;
const SEED_VALIDATE_IC: u64 = 1;
const SEED_TEST_IC: u64 = 2;
const SEED_NOISE: u64 = 3;
const SEED_TRAINING: u64 = 4;

pub const TIMING_NOTE: &str = "wall_seconds covers the rollout of all test initial states on one thread, \
including interpolation onto the evaluation grid; training and data generation are excluded";

/// Clean datasets of one experiment.
#[derive(Debug, Clone)]
pub struct Datasets {
    /// Sampled at the smallest model step, long enough for `p_steps` of the largest.
    pub train: Dataset,
    /// Sampled on the evaluation grid over the full horizon.
    pub validate: Dataset,
    pub test: Dataset,
}

pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let sys = cfg.system_spec()?;
    let region = cfg.region()?;
    let opts = |split| BuildOptions {
        split,
        burn_in: cfg.data.burn_in,
    };
    let dt0 = cfg.dts[0];
    let train_steps = cfg.train.p_steps * steps_between(dt0, cfg.dts[cfg.dts.len() - 1])?;
    let grid = cfg.grid_dt();
    let eval_steps = steps_between(grid, cfg.horizon)?;
    let seed = |stage| child_seed(cfg.seed, stage);
    Ok(Datasets {
        train: build_dataset_with(&sys, &region, dt0, train_steps, cfg.data.train, seed(SEED_TRAIN_IC), opts(Split::Train))?,
        validate: build_dataset_with(
            &sys,
            &region,
            grid,
            eval_steps,
            cfg.data.validate,
            seed(SEED_VALIDATE_IC),
            opts(Split::Validate),
        )?,
        test: build_dataset_with(&sys, &region, grid, eval_steps, cfg.data.test, seed(SEED_TEST_IC), opts(Split::Test))?,
    })
}

fn steps_between(small: f64, large: f64) -> Result<usize> {
    integral(large / small)
        .map(|k| k as usize)
        .ok_or_else(|| Error::config(format!("{large} is not a multiple of {small}")))
}

/// Training seed of scale `j`; independent of the noise level.
pub fn train_seed(cfg: &ExperimentConfig, j: usize) -> u64 {
    child_seed(child_seed(cfg.seed, SEED_TRAINING), j as u64)
}

/// Noise seeds for the train and validate splits; shared by all fractions so
/// that larger fractions scale the same perturbation.
pub fn noise_seeds(cfg: &ExperimentConfig) -> (u64, u64) {
    let base = child_seed(cfg.seed, SEED_NOISE);
    (child_seed(base, 0), child_seed(base, 1))
}

/// Train the model for `dts[j]` on `train` (sampled at `dts[0]`).
pub fn train_scale(cfg: &ExperimentConfig, train_ds: &Dataset, j: usize) -> Result<(FlowMapModel, TrainHistory)> {
    let dt = cfg.dts[j];
    let s = steps_between(train_ds.dt(), dt)?;
    let data = stride(train_ds, s)?;
    let tcfg = TrainConfig {
        seed: train_seed(cfg, j),
        ..cfg.train.clone()
    };
    let dims = cfg.layer_dims(j, train_ds.dim());
    train(&data, &dims, dt, &tcfg)
}

/// Single-model rollout onto the grid of `dt_out`.
fn single_scale(model: &FlowMapModel, x0: ArrayView2<f64>, horizon: f64, dt_out: f64) -> Result<RolloutResult> {
    let h = Hierarchy::new(vec![model.clone()])?;
    multiscale_rollout_batch(&h, x0, horizon, dt_out)
}

fn on_grid(res: RolloutResult, grid: f64) -> Result<RolloutResult> {
    let k = integral(res.dt / grid)
        .ok_or_else(|| Error::invalid(format!("step {} is not a multiple of grid {grid}", res.dt)))?;
    Ok(res.refined(k))
}

/// A stage that failed without aborting the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEntry {
    pub index: usize,
    pub dt: f64,
    pub path: PathBuf,
    #[serde(serialize_with = "seed_string")]
    pub train_seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_one_step_mse: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeEntry {
    pub scheme_id: String,
    pub per_step: PathBuf,
}

/// Results at one noise level.
#[derive(Debug, Clone)]
pub struct NoiseRun {
    pub noise_fraction: f64,
    pub dir: PathBuf,
    pub models: Vec<ModelEntry>,
    /// Indices into `dts` of the selected contiguous range.
    pub selection: Option<(usize, usize)>,
    pub reports: Vec<ErrorReport>,
    pub failures: Vec<StageFailure>,
}

impl NoiseRun {
    pub fn report(&self, scheme_id: &str) -> Option<&ErrorReport> {
        self.reports.iter().find(|r| r.scheme_id == scheme_id)
    }

    /// Reports of the single-scale schemes, ascending dt.
    pub fn single_scale(&self) -> Vec<&ErrorReport> {
        self.reports.iter().filter(|r| r.scheme_id.starts_with("nnts-")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub runs: Vec<NoiseRun>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    system: &'a str,
    seed: u64,
    config_digest: String,
    config: &'a str,
    crate_version: &'a str,
    timing_note: &'a str,
    data: DataEntry,
    runs: Vec<RunEntry<'a>>,
}

#[derive(Serialize)]
struct DataEntry {
    train: PathBuf,
    validate: PathBuf,
    test: PathBuf,
    #[serde(serialize_with = "seed_string")]
    train_ic_seed: u64,
    #[serde(serialize_with = "seed_string")]
    validate_ic_seed: u64,
    #[serde(serialize_with = "seed_string")]
    test_ic_seed: u64,
    #[serde(serialize_with = "seed_string")]
    train_noise_seed: u64,
    #[serde(serialize_with = "seed_string")]
    validate_noise_seed: u64,
}

#[derive(Serialize)]
struct RunEntry<'a> {
    noise_fraction: f64,
    directory: PathBuf,
    summary: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_lower: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    selected_upper: Option<usize>,
    models: &'a [ModelEntry],
    schemes: Vec<SchemeEntry>,
    failures: &'a [StageFailure],
}

/// Derived seeds use the full `u64` range, which TOML integers cannot hold.
fn seed_string<S: serde::Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&seed.to_string())
}

fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn rel(base: &Path, p: &Path) -> PathBuf {
    p.strip_prefix(base).unwrap_or(p).to_path_buf()
}

/// Run the configured experiment, writing artifacts under `out_dir`.
///
/// Configuration and I/O problems abort with an error. Training, selection
/// and evaluation failures are recorded in the manifest and the remaining
/// stages still run.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReportBundle> {
    cfg.validate()?;
    let sys = cfg.system_spec()?;
    mkdir(&out_dir.join("data"))?;
    let config_path = out_dir.join("config.toml");
    write_file(&config_path, |b| {
        b.extend_from_slice(cfg.to_toml().as_bytes());
        Ok(())
    })?;

    log::info!("{}: generating data", cfg.name);
    let data = generate_datasets(cfg)?;
    let data_paths = ["train", "validate", "test"].map(|s| out_dir.join("data").join(format!("{s}.hds")));
    data.train.save(&data_paths[0])?;
    data.validate.save(&data_paths[1])?;
    data.test.save(&data_paths[2])?;
    let (train_noise, validate_noise) = noise_seeds(cfg);

    let mut runs = Vec::new();
    for &fraction in &cfg.noise_fractions {
        runs.push(run_noise_level(cfg, &sys, &data, fraction, out_dir)?);
    }

    let manifest_path = out_dir.join("manifest.toml");
    let run_entries: Vec<RunEntry> = runs
        .iter()
        .map(|r| RunEntry {
            noise_fraction: r.noise_fraction,
            directory: rel(out_dir, &r.dir),
            summary: rel(out_dir, &r.dir.join("summary.csv")),
            selected_lower: r.selection.map(|s| s.0),
            selected_upper: r.selection.map(|s| s.1),
            models: &r.models,
            schemes: r
                .reports
                .iter()
                .map(|rep| SchemeEntry {
                    scheme_id: rep.scheme_id.clone(),
                    per_step: rel(out_dir, &r.dir.join("per_step").join(format!("{}.csv", rep.scheme_id))),
                })
                .collect(),
            failures: &r.failures,
        })
        .collect();
    let manifest = Manifest {
        name: &cfg.name,
        system: &cfg.system,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        config: "config.toml",
        crate_version: env!("CARGO_PKG_VERSION"),
        timing_note: TIMING_NOTE,
        data: DataEntry {
            train: rel(out_dir, &data_paths[0]),
            validate: rel(out_dir, &data_paths[1]),
            test: rel(out_dir, &data_paths[2]),
            train_ic_seed: child_seed(cfg.seed, SEED_TRAIN_IC),
            validate_ic_seed: child_seed(cfg.seed, SEED_VALIDATE_IC),
            test_ic_seed: child_seed(cfg.seed, SEED_TEST_IC),
            train_noise_seed: train_noise,
            validate_noise_seed: validate_noise,
        },
        runs: run_entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Inconsistent(format!("manifest: {e}")))?;
    write_file(&manifest_path, |b| {
        b.extend_from_slice(text.as_bytes());
        Ok(())
    })?;
    Ok(ReportBundle {
        out_dir: out_dir.to_path_buf(),
        manifest_path,
        runs,
    })
}

fn run_noise_level(
    cfg: &ExperimentConfig,
    sys: &SystemSpec,
    data: &Datasets,
    fraction: f64,
    out_dir: &Path,
) -> Result<NoiseRun> {
    let dir = out_dir.join(format!("noise-{fraction}"));
    let models_dir = dir.join("models");
    let per_step_dir = dir.join("per_step");
    mkdir(&models_dir)?;
    mkdir(&per_step_dir)?;
    let (train_noise, validate_noise) = noise_seeds(cfg);
    let train_ds = add_noise(&data.train, fraction, train_noise)?;
    let validate_ds = add_noise(&data.validate, fraction, validate_noise)?;
    let mut failures = Vec::new();

    log::info!("{}: noise {fraction}: training {} scales", cfg.name, cfg.dts.len());
    let trained: Vec<Result<(FlowMapModel, TrainHistory)>> = (0..cfg.dts.len())
        .into_par_iter()
        .map(|j| train_scale(cfg, &train_ds, j))
        .collect();
    let mut models: Vec<Option<FlowMapModel>> = Vec::new();
    let mut entries = Vec::new();
    for (j, res) in trained.into_iter().enumerate() {
        match res {
            Ok((model, hist)) => {
                let path = models_dir.join(format!("nnts-{j}.model"));
                save_model(&model, &path)?;
                entries.push(ModelEntry {
                    index: j,
                    dt: cfg.dts[j],
                    path: rel(out_dir, &path),
                    train_seed: train_seed(cfg, j),
                    epochs: hist.epochs(),
                    final_loss: hist.losses.last().copied().unwrap_or(f64::NAN),
                    final_one_step_mse: hist.one_step.last().copied().unwrap_or(f64::NAN),
                    stopped_early: hist.stopped_early,
                });
                models.push(Some(model));
            }
            Err(e) => {
                log::warn!("training nnts-{j} failed: {e}");
                failures.push(StageFailure {
                    stage: format!("train nnts-{j}"),
                    message: e.to_string(),
                });
                models.push(None);
            }
        }
    }

    // Selection runs over the longest run of successfully trained scales
    // starting at the finest one, so indices stay contiguous.
    let usable: Vec<FlowMapModel> = models.iter().map_while(|m| m.clone()).collect();
    let selection = if !cfg.wants(Scheme::Multiscale) || usable.is_empty() {
        None
    } else if cfg.cross_validate {
        log::info!("{}: noise {fraction}: cross-validating", cfg.name);
        match cross_validate(&usable, &validate_ds, cfg.horizon) {
            Ok(sel) => Some((sel.lower, sel.upper)),
            Err(e) => {
                failures.push(StageFailure {
                    stage: "cross-validate".into(),
                    message: e.to_string(),
                });
                None
            }
        }
    } else {
        Some((0, usable.len() - 1))
    };

    log::info!("{}: noise {fraction}: evaluating", cfg.name);
    let x0 = data.test.initial_states();
    let grid = cfg.grid_dt();
    let truth = &data.test.trajectories;
    let mut reports = Vec::new();
    let mut record = |id: String, dts: (f64, f64), res: Result<(RolloutResult, f64)>, failures: &mut Vec<StageFailure>| {
        match res.and_then(|(pred, secs)| ErrorReport::new(id.clone(), dts, &pred, truth, secs)) {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("scheme {id} failed: {e}");
                failures.push(StageFailure {
                    stage: format!("evaluate {id}"),
                    message: e.to_string(),
                });
            }
        }
    };

    if cfg.wants(Scheme::SingleScale) {
        for (j, m) in models.iter().enumerate() {
            let Some(m) = m else { continue };
            let (res, secs) = time_execution(|| single_scale(m, x0.view(), cfg.horizon, grid));
            record(format!("nnts-{j}"), (m.dt, m.dt), res.map(|r| (r, secs)), &mut failures);
        }
    }
    if let Some((l, u)) = selection {
        let h = Hierarchy::new(usable[l..=u].to_vec())?;
        let (res, secs) = time_execution(|| multiscale_rollout_batch(&h, x0.view(), cfg.horizon, grid));
        record("multiscale".into(), (cfg.dts[l], cfg.dts[u]), res.map(|r| (r, secs)), &mut failures);
    }
    if let (true, Some(hy)) = (cfg.wants(Scheme::Hybrid), &cfg.hybrid) {
        let coarse: Option<Vec<FlowMapModel>> = hy
            .coarse_dts
            .iter()
            .map(|&c| {
                cfg.dts
                    .iter()
                    .position(|&d| (d - c).abs() <= 1e-9 * d)
                    .and_then(|j| models[j].clone())
            })
            .collect();
        let tab = RkTableau::by_name(&hy.tableau)?;
        let coarse_max = hy.coarse_dts.iter().copied().fold(0.0, f64::max);
        for (i, &h) in hy.fine_steps.iter().enumerate() {
            let id = format!("hybrid-{i}");
            let res = coarse
                .clone()
                .ok_or_else(|| Error::config("a coarse model of the hybrid scheme failed to train"))
                .and_then(|c| HybridScheme::new(Some(Hierarchy::new(c)?), tab.clone(), h, sys.clone()))
                .map(|scheme| time_execution(|| hybrid_rollout(&scheme, x0.view(), cfg.horizon).and_then(|r| on_grid(r, grid))))
                .and_then(|(r, secs)| r.map(|r| (r, secs)));
            record(id, (h, coarse_max), res, &mut failures);
        }
    }
    if let (true, Some(rk)) = (cfg.wants(Scheme::Rk), &cfg.rk) {
        let tab = RkTableau::by_name(&rk.tableau)?;
        for (i, &h) in rk.steps.iter().enumerate() {
            let res = HybridScheme::new(None, tab.clone(), h, sys.clone())
                .map(|scheme| time_execution(|| hybrid_rollout(&scheme, x0.view(), cfg.horizon).and_then(|r| on_grid(r, grid))))
                .and_then(|(r, secs)| r.map(|r| (r, secs)));
            record(format!("rk-{i}"), (h, h), res, &mut failures);
        }
    }

    for r in &reports {
        write_file(&per_step_dir.join(format!("{}.csv", r.scheme_id)), |b| r.write_per_step_csv(b))?;
    }
    write_file(&dir.join("summary.csv"), |b| write_summary_csv(&reports, b))?;
    Ok(NoiseRun {
        noise_fraction: fraction,
        dir,
        models: entries,
        selection,
        reports,
        failures,
    })
}
