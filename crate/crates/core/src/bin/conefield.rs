//! Command-line front end: verify, gen-data, train, render, eval, sweep-l.
//!
//! Every command takes an optional flat config file plus `--set key=value`
//! overrides, honors `--seed`, and drops a manifest of its full
//! configuration under `--out`. Exit codes: 0 success, 1 check or run
//! failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use conefield::checks::{self, Mutation, VerifyConfig};
use conefield::config::{ConfigError, RunConfig};
use conefield::experiments::{self, EvalRow};
use conefield::renderer::render_image;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "conefield",
    about = "Cone-traced anti-aliased radiance fields with built-in self-verification",
    disable_version_flag = true
)]
struct Cli {
    /// Cap the worker thread count (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable), e.g. --set iterations=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every registered oracle check and write a JSON report.
    Verify {
        /// Output directory for report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte-Carlo draws per case.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Randomized frustum cases.
        #[arg(long, default_value_t = 100)]
        frustum_cases: usize,
        /// Random Gaussian regions for the expectation check.
        #[arg(long, default_value_t = 50)]
        ipe_cases: usize,
        /// Parameters probed by the finite-difference check.
        #[arg(long, default_value_t = 208)]
        fd_params: usize,
        /// Inject a deliberate formula corruption (harness self-test);
        /// the run is then expected to fail.
        #[arg(long)]
        mutate: Option<String>,
    },
    /// Generate the procedural multiscale dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render test poses from a trained run.
    Render {
        /// Run directory (from train).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scale factor to render at.
        #[arg(long, default_value_t = 1)]
        scale: u32,
        /// Jittered sub-pixel cones per pixel.
        #[arg(long, default_value_t = 1)]
        supersample: usize,
        /// Render only this test pose.
        #[arg(long)]
        pose: Option<usize>,
        /// Also write 32-bit float image dumps.
        #[arg(long, default_value_t = false)]
        float_dump: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate trained runs against test ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained run as NAME=DIR (repeatable).
        #[arg(long = "run", value_name = "NAME=DIR", required = true)]
        runs: Vec<String>,
        /// Scales to evaluate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1u32, 2, 4, 8])]
        scales: Vec<u32>,
    },
    /// Sweep the positional encoding degree for PE and IPE variants.
    SweepL {
        #[arg(long)]
        out: PathBuf,
        /// Degrees to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 12, 16, 20])]
        l_list: Vec<usize>,
        /// Encoding variants to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["pe".to_string(), "ipe".to_string()])]
        variants: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn run_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            return run_error(e);
        }
    }
    match cli.command {
        Command::Verify { out, seed, samples, frustum_cases, ipe_cases, fd_params, mutate } => {
            let mutation = match mutate.as_deref() {
                None => None,
                Some(name) => match Mutation::parse(name) {
                    Some(m) => Some(m),
                    None => {
                        return usage_error(format!("unknown mutation `{name}` (try sigma-t2-sign)"))
                    }
                },
            };
            let cfg = VerifyConfig {
                seed,
                mc_samples: samples,
                frustum_cases,
                ipe_cases,
                fd_params,
                mutation,
            };
            if let Err(e) = std::fs::create_dir_all(&out) {
                return run_error(e);
            }
            let outcomes = checks::run_all(&cfg);
            for o in &outcomes {
                println!(
                    "{} {}: statistic {:.6e} vs tolerance {:.3e}",
                    if o.pass { "PASS" } else { "FAIL" },
                    o.check,
                    o.statistic,
                    o.tolerance
                );
            }
            if let Err(e) = checks::write_report(&out.join("report.json"), &cfg, &outcomes) {
                return run_error(e);
            }
            if outcomes.iter().all(|o| o.pass) {
                println!("all {} checks passed", outcomes.len());
                ExitCode::SUCCESS
            } else {
                run_error("verification failed")
            }
        }
        Command::GenData { out, config } => {
            let cfg = match config.resolve() {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            match experiments::write_datasets(&cfg, &out)
                .and_then(|()| experiments::write_manifest(&out, "gen-data", &cfg))
            {
                Ok(()) => {
                    println!("dataset written to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => run_error(e),
            }
        }
        Command::Train { data, out, config } => {
            let cfg = match config.resolve() {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            let run = || -> Result<(), experiments::ExperimentError> {
                let (train_ds, test_ds) = experiments::load_datasets(&cfg, &data)?;
                experiments::write_manifest(&out, "train", &cfg)?;
                let outputs =
                    experiments::run_training(&cfg, &train_ds, Some(&test_ds), Some(&out))?;
                let last = outputs.train_log.last();
                println!(
                    "trained {} iterations; final losses coarse={:.4e} fine={:.4e}",
                    cfg.iterations,
                    last.map_or(f64::NAN, |r| r.loss_coarse),
                    last.map_or(f64::NAN, |r| r.loss_fine),
                );
                Ok(())
            };
            match run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => run_error(e),
            }
        }
        Command::Render { run, data, out, scale, supersample, pose, float_dump, seed } => {
            let go = || -> Result<(), experiments::ExperimentError> {
                let (model, mut cfg) = experiments::load_model(&run)?;
                cfg.supersample = supersample;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let (_, test_ds) = experiments::load_datasets(&cfg, &data)?;
                let level = test_ds
                    .levels
                    .iter()
                    .find(|l| l.factor == scale)
                    .ok_or(conefield::trainer::TrainError::MissingScale(scale))?;
                std::fs::create_dir_all(&out)?;
                experiments::write_manifest(&out, "render", &cfg)?;
                let rcfg = cfg.render_config();
                for (i, cam) in level.cameras.iter().enumerate() {
                    if pose.is_some_and(|p| p != i) {
                        continue;
                    }
                    let (fine, _) =
                        render_image(&model, cam, &rcfg, cfg.seed, (scale as u64) << 32 | i as u64)?;
                    let base = out.join(format!("r_{i}_s{scale}"));
                    fine.save_png(&base.with_extension("png"))?;
                    if float_dump {
                        fine.save_f32(&base.with_extension("f32"))?;
                    }
                }
                println!("renders written to {}", out.display());
                Ok(())
            };
            match go() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => run_error(e),
            }
        }
        Command::Eval { data, out, runs, scales } => {
            let go = || -> Result<(), experiments::ExperimentError> {
                std::fs::create_dir_all(&out)?;
                let mut methods: Vec<(String, Vec<EvalRow>)> = Vec::new();
                let mut scene = String::new();
                for spec in &runs {
                    let Some((name, dir)) = spec.split_once('=') else {
                        return Err(experiments::ExperimentError::Io(std::io::Error::other(
                            format!("--run expects NAME=DIR, got `{spec}`"),
                        )));
                    };
                    let (model, cfg) = experiments::load_model(std::path::Path::new(dir))?;
                    let (_, test_ds) = experiments::load_datasets(&cfg, &data)?;
                    let rows = experiments::evaluate_model(
                        &model,
                        &test_ds,
                        &scales,
                        &cfg.render_config(),
                        cfg.seed,
                    )?;
                    scene = cfg.scene.clone();
                    methods.push((name.to_string(), rows));
                }
                experiments::write_metrics_csv(&out.join("metrics.csv"), &scene, &methods)?;
                println!("metrics written to {}", out.join("metrics.csv").display());
                Ok(())
            };
            match go() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => run_error(e),
            }
        }
        Command::SweepL { out, l_list, variants, config } => {
            let cfg = match config.resolve() {
                Ok(c) => c,
                Err(e) => return usage_error(e),
            };
            for v in &variants {
                if v != "pe" && v != "ipe" {
                    return usage_error(format!("unknown sweep variant `{v}` (expected pe or ipe)"));
                }
            }
            let go = || -> Result<(), experiments::ExperimentError> {
                std::fs::create_dir_all(&out)?;
                experiments::write_manifest(&out, "sweep-l", &cfg)?;
                let rows = experiments::sweep_l(&cfg, &l_list, &variants, true)?;
                experiments::write_sweep_csv(&out.join("sweep.csv"), &rows)?;
                println!("sweep written to {}", out.join("sweep.csv").display());
                Ok(())
            };
            match go() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => run_error(e),
            }
        }
    }
}
