//! `hits`: command-line driver for the hierarchical time-stepping pipeline.
//!
//! Every subcommand is a thin adapter over `hits-core`. Exit status is 0 on
//! success, 2 for usage and configuration errors, 1 for runtime failures.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use hits::bench::config::{apply_override, load_table, parse_table, preset_source};
use hits::bench::runner::{generate_datasets, run_experiment, train_scale, train_seed};
use hits::bench::{increment_field, ExperimentConfig};
use hits::dataset::Dataset;
use hits::dynamics::{reference_trajectory, SystemSpec};
use hits::flowmap::{load_model, save_model};
use hits::hybrid::{hybrid_rollout_single, HybridScheme};
use hits::integrators::RkTableau;
use hits::multiscale::{cross_validate, multiscale_rollout, Hierarchy};
use hits::{Error, Result};

#[derive(Parser)]
#[command(name = "hits", version, about = "Hierarchical neural time-steppers for ODEs")]
struct Cli {
    /// Output directory (file for `simulate` and `rollout`; stdout if absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Built-in preset name.
    #[arg(long)]
    preset: Option<String>,

    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Dotted-key override, e.g. `--set train.max_epochs=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Reference trajectory of a built-in system as CSV.
    Simulate {
        #[arg(long)]
        system: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long)]
        dt: f64,
        #[arg(long)]
        steps: usize,
    },
    /// Generate the train, validate and test datasets of an experiment.
    GenData(ConfigArgs),
    /// Train one flow map per configured step size.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory holding `train.hds` from `gen-data`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Cross-validate trained models and write the selected range.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of `.model` files.
        #[arg(long)]
        models: PathBuf,
        /// Directory holding `validate.hds`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Roll out one or more models (coupled across scales) from an initial state.
    Rollout {
        /// Model file; repeat to couple several scales.
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        x0: Vec<f64>,
        #[arg(long)]
        horizon: f64,
        /// Output grid step; defaults to the finest model step.
        #[arg(long)]
        dt_out: Option<f64>,
        /// Use the hybrid scheme with Runge-Kutta steps of this size.
        #[arg(long)]
        fine_step: Option<f64>,
        #[arg(long, default_value = "rk4")]
        tableau: String,
    },
    /// Run a full experiment: data, training, selection, evaluation.
    Bench(ConfigArgs),
    /// As `bench`, defaulting to noise fractions 0, 0.01 and 0.02 unless the
    /// config lists several.
    NoiseBench(ConfigArgs),
    /// Reference flow-map increment fields from a config's [increments] section.
    Increments(ConfigArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error[runtime]: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(path) => {
            if let Some(p) = path {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut table = match (&args.config, &args.preset) {
        (Some(path), _) => load_table(path)?,
        (None, Some(name)) => parse_table(preset_source(name)?)?,
        (None, None) => return Err(Error::Config("one of --config or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        apply_override(&mut table, &format!("seed={seed}"))?;
    }
    for o in &args.overrides {
        apply_override(&mut table, o)?;
    }
    ExperimentConfig::from_table(table)
}

fn out_dir(cli_out: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Write CSV output to `out` or stdout. Returns the file path, if any.
fn emit(out: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<Option<PathBuf>> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            let mut buf = Vec::new();
            f(&mut buf).map_err(io_err(path))?;
            fs::write(path, buf).map_err(io_err(path))?;
            Ok(Some(path.clone()))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock).map_err(io_err(Path::new("<stdout>")))?;
            Ok(None)
        }
    }
}

/// `manifest.toml` for the smaller subcommands.
fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, artifacts: toml::Table) -> Result<PathBuf> {
    let mut t = toml::Table::new();
    t.insert("command".into(), command.into());
    t.insert("name".into(), cfg.name.clone().into());
    t.insert("seed".into(), cfg.seed.to_string().into());
    t.insert("config_digest".into(), cfg.digest().into());
    t.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
    t.insert("artifacts".into(), artifacts.into());
    let path = dir.join("manifest.toml");
    fs::write(&path, toml::to_string(&t).expect("manifest serializes")).map_err(io_err(&path))?;
    Ok(path)
}

fn path_value(p: &Path) -> toml::Value {
    p.display().to_string().into()
}

fn run(cli: Cli) -> Result<Option<PathBuf>> {
    match cli.command {
        Command::Simulate { system, x0, dt, steps } => {
            let sys = SystemSpec::builtin(&system)?;
            let tr = reference_trajectory(&sys, &x0, dt, steps)?;
            emit(&cli.out, |w| tr.write_csv(w))
        }
        Command::GenData(args) => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&cli.out, &cfg);
            create_dir(&dir)?;
            let data = generate_datasets(&cfg)?;
            let mut artifacts = toml::Table::new();
            for (name, ds) in [("train", &data.train), ("validate", &data.validate), ("test", &data.test)] {
                let path = dir.join(format!("{name}.hds"));
                ds.save(&path)?;
                artifacts.insert(name.into(), path_value(&path));
            }
            write_manifest(&dir, "gen-data", &cfg, artifacts).map(Some)
        }
        Command::Train { cfg: args, data } => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&cli.out, &cfg);
            let models_dir = dir.join("models");
            create_dir(&models_dir)?;
            let train_ds = match data {
                Some(d) => Dataset::load(&d.join("train.hds"))?,
                None => generate_datasets(&cfg)?.train,
            };
            let trained: Vec<_> = (0..cfg.dts.len())
                .into_par_iter()
                .map(|j| train_scale(&cfg, &train_ds, j))
                .collect();
            let mut artifacts = toml::Table::new();
            for (j, res) in trained.into_iter().enumerate() {
                let (model, hist) = res?;
                let path = models_dir.join(format!("nnts-{j}.model"));
                save_model(&model, &path)?;
                let mut entry = toml::Table::new();
                entry.insert("path".into(), path_value(&path));
                entry.insert("dt".into(), model.dt.into());
                entry.insert("train_seed".into(), train_seed(&cfg, j).to_string().into());
                entry.insert("epochs".into(), (hist.epochs() as i64).into());
                entry.insert("final_loss".into(), hist.losses.last().copied().unwrap_or(f64::NAN).into());
                artifacts.insert(format!("nnts-{j}"), entry.into());
            }
            write_manifest(&dir, "train", &cfg, artifacts).map(Some)
        }
        Command::Select { cfg: args, models, data } => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&cli.out, &cfg);
            create_dir(&dir)?;
            let mut loaded = Vec::new();
            for entry in fs::read_dir(&models).map_err(io_err(&models))? {
                let path = entry.map_err(io_err(&models))?.path();
                if path.extension().is_some_and(|e| e == "model") {
                    loaded.push(load_model(&path)?);
                }
            }
            loaded.sort_by(|a, b| a.dt.total_cmp(&b.dt));
            let validation = Dataset::load(&data.join("validate.hds"))?;
            let sel = cross_validate(&loaded, &validation, cfg.horizon)?;
            let mut t = toml::Table::new();
            t.insert("lower".into(), (sel.lower as i64).into());
            t.insert("upper".into(), (sel.upper as i64).into());
            t.insert("dt_min".into(), loaded[sel.lower].dt.into());
            t.insert("dt_max".into(), loaded[sel.upper].dt.into());
            let examined: Vec<toml::Value> = sel
                .examined
                .iter()
                .map(|&(l, u, e)| toml::Value::Array(vec![(l as i64).into(), (u as i64).into(), e.into()]))
                .collect();
            t.insert("examined".into(), examined.into());
            let path = dir.join("selection.toml");
            fs::write(&path, toml::to_string(&t).expect("selection serializes")).map_err(io_err(&path))?;
            let mut artifacts = toml::Table::new();
            artifacts.insert("selection".into(), path_value(&path));
            write_manifest(&dir, "select", &cfg, artifacts).map(Some)
        }
        Command::Rollout {
            models,
            x0,
            horizon,
            dt_out,
            fine_step,
            tableau,
        } => {
            let loaded = models.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let h = Hierarchy::new(loaded)?;
            let res = match fine_step {
                Some(step) => {
                    let system = SystemSpec::builtin(&h.models()[0].system)?;
                    let scheme = HybridScheme::new(Some(h), RkTableau::by_name(&tableau)?, step, system)?;
                    hybrid_rollout_single(&scheme, &x0, horizon)?
                }
                None => {
                    let dt = dt_out.unwrap_or(h.finest_dt());
                    multiscale_rollout(&h, &x0, horizon, dt)?
                }
            };
            emit(&cli.out, |w| res.write_csv(w, 0))
        }
        Command::Bench(args) => {
            let cfg = load_config(&args)?;
            let dir = out_dir(&cli.out, &cfg);
            Ok(Some(run_experiment(&cfg, &dir)?.manifest_path))
        }
        Command::NoiseBench(args) => {
            let mut cfg = load_config(&args)?;
            if cfg.noise_fractions.len() < 2 {
                cfg.noise_fractions = vec![0.0, 0.01, 0.02];
            }
            let dir = out_dir(&cli.out, &cfg);
            Ok(Some(run_experiment(&cfg, &dir)?.manifest_path))
        }
        Command::Increments(args) => {
            let cfg = load_config(&args)?;
            let inc = cfg
                .increments
                .clone()
                .ok_or_else(|| Error::Config("config has no [increments] section".into()))?;
            let region = match inc.region {
                Some(r) => r,
                None => cfg.region()?,
            };
            let field = increment_field(&cfg.system_spec()?, &region, inc.grid_n, inc.dt, inc.j_max)?;
            let dir = out_dir(&cli.out, &cfg);
            create_dir(&dir)?;
            let mut artifacts = toml::Table::new();
            for j in 1..=field.j_max() {
                let path = dir.join(format!("increment-{j:03}.csv"));
                let mut buf = Vec::new();
                field.write_csv(j, &mut buf).map_err(io_err(&path))?;
                fs::write(&path, buf).map_err(io_err(&path))?;
                artifacts.insert(format!("j{j:03}"), path_value(&path));
            }
            let flagged = field.diverged.iter().filter(|&&d| d).count();
            artifacts.insert("diverged_points".into(), (flagged as i64).into());
            write_manifest(&dir, "increments", &cfg, artifacts).map(Some)
        }
    }
}
