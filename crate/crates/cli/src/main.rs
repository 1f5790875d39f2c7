use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaduplex::channel::{ChannelMode, ChannelModel};
use metaduplex::eval::{
    baseline_conventional, matrix_csv, monte_carlo_eval, physics_matrices, pipeline,
    run_realization, run_sweep, BerReport, Sweep,
};
use metaduplex::rng::realization_seed;
use metaduplex::training::{
    finetune, gradcheck_model, load_checkpoint, save_checkpoint, train_base, Checkpoint,
};
use metaduplex::{Error, SystemConfig};

/// Gradient-check pass threshold.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "metaduplex", version, about = "Metasurface full-duplex link simulator")]
struct Cli {
    /// Preset (`reference`, `mini`) or JSON config file.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte Carlo evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// 100 realizations and 10^5 test symbols per point.
    #[arg(long, global = true)]
    full_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model on statistical channels.
    TrainBase,
    /// Fine-tune a checkpoint on one instantaneous realization.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Monte Carlo realization index.
        #[arg(long, default_value_t = 0)]
        realization: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Fine-tune and evaluate a base checkpoint over all realizations.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also train and evaluate the configuration without metasurfaces.
        #[arg(long)]
        baseline: bool,
    },
    /// Base training plus evaluation for every grid point, e.g. `layers:1,3`,
    /// `units:4,6`, `bits:4,8`, `power:-10,0,10`.
    Sweep { spec: String },
    /// Finite-difference check of the full network's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Write T_q, R_q and aperture correlation matrices as CSV.
    PhysicsDump {
        /// Take the phases from this checkpoint instead of zeros.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recompute one report row from its realization index.
    Reproduce {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        realization: usize,
        #[arg(long, default_value = "sim")]
        label: String,
    },
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.error.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(f.code)
        }
    }
}

impl Cli {
    fn apply_overrides(&self, cfg: &mut SystemConfig) {
        if let Some(s) = self.seed {
            cfg.training.seed = s;
            cfg.evaluation.seed = s;
        }
        if self.full_scale {
            *cfg = cfg.clone().with_full_scale();
        }
    }

    fn load_config(&self) -> std::result::Result<SystemConfig, Failure> {
        let name = self.config.as_deref().unwrap_or("reference");
        let mut cfg = SystemConfig::load(name).map_err(|e| match e {
            Error::Io(io) => usage(Error::InvalidConfig(format!("{name}: {io}"))),
            other => usage(other),
        })?;
        self.apply_overrides(&mut cfg);
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    /// Loads a checkpoint; an explicit `--config` replaces the stored one
    /// after a shape check.
    fn load_model(&self, path: &Path) -> std::result::Result<Checkpoint, Failure> {
        let mut ck = load_checkpoint(path)?;
        if self.config.is_some() {
            let cfg = self.load_config()?;
            ck.ensure_compatible(&cfg)?;
            ck.config = cfg;
        } else {
            self.apply_overrides(&mut ck.config);
        }
        Ok(ck)
    }

    fn out_file(&self, name: &str) -> std::result::Result<PathBuf, Failure> {
        fs::create_dir_all(&self.out).map_err(Error::from)?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, text: &str) -> Outcome {
        let path = self.out_file(name)?;
        fs::write(&path, text).map_err(Error::from)?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn write_model(&self, stem: &str, ck: &Checkpoint) -> Outcome {
        save_checkpoint(ck, self.out_file(&format!("{stem}.ckpt"))?)?;
        self.write(&format!("{stem}_history.csv"), &ck.history_csv()?)?;
        self.write(&format!("{stem}_phases.tsv"), &ck.params.phase_table())
    }

    fn write_report(&self, report: &BerReport) -> Outcome {
        self.write("report.csv", &report.to_csv()?)?;
        self.write("summary.json", &report.summary_json())?;
        for a in report.aggregates() {
            println!(
                "{}\t{} dBm\tmedian {:.5}\tmean {:.5}\tfailed {}",
                a.label, a.power_dbm, a.median_ber, a.mean_ber, a.failures
            );
        }
        Ok(())
    }
}

fn report_divergence(ck: &Checkpoint) -> Outcome {
    match &ck.diverged {
        Some(why) => Err(Failure {
            code: 1,
            error: Error::Diverged {
                epoch: ck.history.len(),
                reason: why.clone(),
            },
        }),
        None => Ok(()),
    }
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(Error::InvalidArgument(format!("threads: {e}"))))?;
    }
    match &cli.command {
        Command::TrainBase => {
            let cfg = cli.load_config()?;
            let ck = train_base(&cfg)?;
            cli.write_model("base", &ck)?;
            if let Some(last) = ck.history.last() {
                println!("epochs {} final loss {:.6}", ck.history.len(), last.loss);
            }
            report_divergence(&ck)
        }
        Command::Finetune {
            checkpoint,
            realization,
            epochs,
            lr,
        } => {
            let base = cli.load_model(checkpoint)?;
            let seed = realization_seed(base.config.evaluation.seed, *realization as u64);
            let real = ChannelModel::new(&base.config)?.realize(seed, ChannelMode::Instantaneous)?;
            let ck = finetune(&base, &real, *epochs, *lr)?;
            cli.write_model("finetuned", &ck)?;
            if let Some(last) = ck.history.last() {
                println!("realization {realization} seed {seed} final loss {:.6}", last.loss);
            }
            report_divergence(&ck)
        }
        Command::Evaluate {
            checkpoint,
            baseline,
        } => {
            let base = cli.load_model(checkpoint)?;
            let mut report = monte_carlo_eval(&base, "sim")?;
            if *baseline || base.config.evaluation.baseline {
                report.extend(pipeline(&baseline_conventional(&base.config), "baseline")?);
            }
            cli.write_report(&report)
        }
        Command::Sweep { spec } => {
            let sweep: Sweep = spec.parse().map_err(usage)?;
            let cfg = cli.load_config()?;
            let report = run_sweep(&sweep, &cfg)?;
            cli.write_report(&report)
        }
        Command::Gradcheck { batch, step } => {
            let cfg = cli.load_config()?;
            let r = gradcheck_model(&cfg, *batch, cfg.training.seed, *step)?;
            let worst = r
                .worst
                .as_ref()
                .map(|(n, k)| format!("{n}[{k}]"))
                .unwrap_or_else(|| "-".into());
            println!(
                "max_rel_error {:e} worst {worst} checked {} skipped_kinks {}",
                r.max_rel_error, r.checked, r.skipped_kinks
            );
            if r.max_rel_error < GRADCHECK_TOL {
                Ok(())
            } else {
                Err(Failure {
                    code: 1,
                    error: Error::Contract(format!(
                        "gradient check {:e} >= {GRADCHECK_TOL:e}",
                        r.max_rel_error
                    )),
                })
            }
        }
        Command::PhysicsDump { checkpoint } => {
            let (cfg, params) = match checkpoint {
                Some(p) => {
                    let ck = cli.load_model(p)?;
                    (ck.config, Some(ck.params))
                }
                None => (cli.load_config()?, None),
            };
            for (name, m) in physics_matrices(&cfg, params.as_ref())? {
                cli.write(&format!("{name}.csv"), &matrix_csv(&m)?)?;
            }
            Ok(())
        }
        Command::Reproduce {
            checkpoint,
            realization,
            label,
        } => {
            let base = cli.load_model(checkpoint)?;
            let report = BerReport {
                rows: run_realization(&base, label, *realization)?,
                ..Default::default()
            };
            print!("{}", report.to_csv()?);
            Ok(())
        }
    }
}
