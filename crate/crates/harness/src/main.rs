use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cvqkd_core::keyrate::{true_key_rate, KeyRateReport};
use cvqkd_core::rng::Substream;
use cvqkd_harness::data::{draw_trials, samples, trial_key, write_samples_csv};
use cvqkd_harness::error::io_err;
use cvqkd_harness::experiments::{estimate_batch, outputs, run};
use cvqkd_harness::{report, ExperimentConfig, ExperimentId, HarnessError, Pipeline, Result};

#[derive(Parser)]
#[command(name = "cvqkd", version, about = "Finite-size CV-QKD parameter estimation experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "cvqkd.toml")]
    config: PathBuf,
    /// Suppress progress messages on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Training,
    Calibration,
    Evaluation,
}

impl Role {
    fn substream(self) -> Substream {
        match self {
            Role::Training => Substream::Training,
            Role::Calibration => Substream::Calibration,
            Role::Evaluation => Substream::Evaluation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write simulated (features, target) pairs to CSV.
    Generate {
        #[arg(long)]
        m: usize,
        #[arg(long, value_enum, default_value = "training")]
        role: Role,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or reuse) the estimator for each block size.
    Train {
        /// Block sizes; defaults to `m_list`.
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Compute (or reuse) the calibration for each block size.
    Calibrate {
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
    /// Bounds for one simulated estimation set.
    Estimate {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        distance_km: f64,
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Key-rate terms for one simulated run.
    Keyrate {
        #[arg(long = "n-total")]
        n_total: u64,
        #[arg(long)]
        distance_km: f64,
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Run a named experiment; defaults to the one set in the config.
    Experiment {
        /// rmse_vs_m, keyrate_vs_distance, keyrate_vs_n or single_trial.
        id: Option<ExperimentId>,
    },
    /// Summarize result files.
    Report {
        /// Defaults to the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn m_list(cfg: &ExperimentConfig, given: Vec<usize>) -> Vec<usize> {
    if given.is_empty() {
        cfg.m_list.clone()
    } else {
        given
    }
}

fn print_rate(r: &KeyRateReport) {
    println!(
        "{:>4}  t={:.6} sigma2={:.6}  I={:.6} chi={:.6} delta={:.6} k={}",
        r.method.tag(),
        r.t,
        r.sigma2,
        r.i_ab,
        r.holevo,
        r.delta_n,
        r.k_eps_display()
    );
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Report { dir: Some(dir) } = &cli.command {
        print!("{}", report::summarize(dir)?);
        return Ok(());
    }
    let cfg = ExperimentConfig::load(&cli.config)?;
    let mut pipe = Pipeline::new(&cfg);
    pipe.quiet = cli.quiet;
    match cli.command {
        Command::Generate { m, role, count, out } => {
            let data = samples(&cfg, &draw_trials(&cfg, m, role.substream(), count)?)?;
            let file = fs::File::create(&out).map_err(io_err(&out))?;
            write_samples_csv(&data, BufWriter::new(file))?;
        }
        Command::Train { m } => {
            for m in m_list(&cfg, m) {
                pipe.ensure_model(m)?;
                let log = pipe.training_log(m)?;
                println!(
                    "m={m}  epochs={} best_val_mse={:.4e}  {}",
                    log.epochs.len(),
                    log.best_val_mse,
                    pipe.model_path(m).display()
                );
            }
        }
        Command::Calibrate { m } => {
            for m in m_list(&cfg, m) {
                let model = pipe.require_model(m)?;
                let calib = pipe.ensure_calibration(m, &model)?;
                println!(
                    "m={m}  n_cal={} s2={:.4e}  {} ({:.1} MB)",
                    calib.n_cal,
                    calib.s2,
                    pipe.calibration_path(m).display(),
                    calib.file_size() as f64 / 1e6
                );
            }
        }
        Command::Estimate { m, distance_km, trial } => {
            let channel = cfg.channel(distance_km)?;
            let key = trial_key(cfg.seed(), Substream::Evaluation, m, trial);
            let moments = cvqkd_core::channel::sample_moments(&channel, m, key)?;
            let nn = if cfg.estimator.nn() {
                let model = pipe.require_model(m)?;
                let calibration = pipe.require_calibration(m, &model)?;
                Some((model, calibration))
            } else {
                None
            };
            let bound = nn
                .as_ref()
                .map(|(model, c)| cvqkd_core::delta::NnBound::new(model, c, cfg.eps_pe, cfg.interval_form))
                .transpose()?;
            let e = estimate_batch(&cfg, &[moments], bound.as_ref())?[0];
            println!("true  t={:.6} sigma2={:.6}", channel.gain(), channel.noise_variance());
            println!(
                "mle   t={:.6} sigma2={:.6}  t_min={:.6} sigma2_max={:.6}",
                e.mle.t_hat, e.mle.sigma2_hat, e.mle_bounds.t_min, e.mle_bounds.sigma2_max
            );
            if let Some(nn) = e.nn {
                println!(
                    "nn    sigma2={:.6}  sigma2_max={:.6}  (halfwidth {:.3e}, leverage {:.3e})",
                    nn.sigma2_hat_nn, nn.sigma2_max_nn, nn.halfwidth, nn.leverage
                );
            }
        }
        Command::Keyrate { n_total, distance_km, trial } => {
            let (m, n_key) = cfg.split(n_total)?;
            let channel = cfg.channel(distance_km)?;
            let key = trial_key(cfg.seed(), Substream::Evaluation, m, trial);
            let moments = cvqkd_core::channel::sample_moments(&channel, m, key)?;
            let nn = if cfg.estimator.nn() { Some(pipe.ensure_nn(m)?) } else { None };
            let bound = nn
                .as_ref()
                .map(|a| cvqkd_core::delta::NnBound::new(&a.model, &a.calibration, cfg.eps_pe, cfg.interval_form))
                .transpose()?;
            let e = estimate_batch(&cfg, &[moments], bound.as_ref())?[0];
            let sec = cfg.security(n_key, n_total)?;
            print_rate(&true_key_rate(&channel, &sec)?);
            let detection = cfg.detection();
            if cfg.estimator.mle() {
                print_rate(&cvqkd_core::keyrate::secret_key_rate(cfg.v_a, detection, &e.mle_bounds.physical(), &sec)?);
            }
            if let Some(b) = e.nn_bounds {
                print_rate(&cvqkd_core::keyrate::secret_key_rate(cfg.v_a, detection, &b.physical(), &sec)?);
            }
        }
        Command::Experiment { id } => {
            let id = id.or(cfg.experiment).ok_or_else(|| {
                HarnessError::Config("no experiment given on the command line or in the config".into())
            })?;
            if cfg.estimator.nn() && !cli.quiet {
                eprintln!(
                    "note: each calibration file holds a packed {}x{} factor (~{:.0} MB)",
                    cvqkd_core::nn::Architecture::estimator().n_params(),
                    cvqkd_core::nn::Architecture::estimator().n_params(),
                    calibration_megabytes()
                );
            }
            run(&cfg, id, &mut pipe)?;
            for name in outputs(id) {
                println!("{}", cfg.output_dir.join(name).display());
            }
        }
        Command::Report { dir: None } => print!("{}", report::summarize(&cfg.output_dir)?),
        Command::Report { dir: Some(_) } => unreachable!(),
    }
    Ok(())
}

fn calibration_megabytes() -> f64 {
    let p = cvqkd_core::nn::Architecture::estimator().n_params() as f64;
    p * (p + 1.0) / 2.0 * 8.0 / 1e6
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
