use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use feddwa::config::{load_raw, resolve, Overrides, RawConfig, RunConfig};
use feddwa::experiment::{run_experiment, sweep, SweepAxis};
use feddwa::Error;

/// Output root used when neither `--out` nor the config file names a directory.
const OUT_ROOT_ENV: &str = "FEDDWA_OUT_ROOT";

#[derive(Parser)]
#[command(name = "feddwa", version, about = "Personalized federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(CommonArgs),
    /// Run one experiment per value of a parameter and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values, e.g. 1,2,5.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    K,
    Alpha,
    AdaptSteps,
    S,
}

#[derive(Clone, Copy, ValueEnum)]
enum Guidance {
    Onestep,
    Last,
    Current,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// fedavg, fedprox, local, fedavg_ft or feddwa.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    frac: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    export_weights: bool,
    #[arg(long, value_enum)]
    guidance: Option<Guidance>,
    #[arg(long)]
    adapt_steps: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let raw = match &self.config {
            Some(p) => load_raw(p)?,
            None => RawConfig::default(),
        };
        let file_has_out = raw.out.is_some();
        let ov = Overrides {
            method: self.method.clone(),
            clients: self.clients,
            rounds: self.rounds,
            frac: self.frac,
            k: self.k,
            alpha: self.alpha,
            s: self.s,
            seed: self.seed,
            out: self.out.clone(),
            export_weights: self.export_weights,
            guidance: self.guidance.map(|g| {
                match g {
                    Guidance::Onestep => "onestep",
                    Guidance::Last => "last",
                    Guidance::Current => "current",
                }
                .to_string()
            }),
            adapt_steps: self.adapt_steps,
        };
        let mut cfg = resolve(raw, &ov)?;
        if self.out.is_none() && !file_has_out {
            if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
                cfg.out = PathBuf::from(root).join(cfg.method.name());
            }
        }
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let r = run_experiment(&cfg)?;
            let s = &r.outcome.summary;
            println!(
                "{}: best mean accuracy {} at round {}, final {}; traffic up {} B, down {} B; wrote {}",
                s.method,
                fmt_opt(s.best_mean_accuracy),
                s.best_round.map_or("-".into(), |r| r.to_string()),
                fmt_opt(s.final_mean_accuracy),
                s.uplink_bytes,
                s.downlink_bytes,
                r.out_dir.display()
            );
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve()?;
            let axis = match axis {
                Axis::K => SweepAxis::K,
                Axis::Alpha => SweepAxis::Alpha,
                Axis::AdaptSteps => SweepAxis::AdaptSteps,
                Axis::S => SweepAxis::S,
            };
            let rows = sweep(&cfg, axis, &values)?;
            for r in &rows {
                match &r.error {
                    None => println!("{}={}: best {}", axis.name(), r.value, fmt_opt(r.best_mean_accuracy)),
                    Some(e) => println!("{}={}: failed: {e}", axis.name(), r.value),
                }
            }
            println!("wrote {}", cfg.out.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
