use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use delay_sindy_cli::commands;
use delay_sindy_cli::sweep::{run_sweep, SweepSpec};
use delay_sindy_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "delay-sindy", version, about = "Sparse dynamics discovery from a single measured series")]
struct Cli {
    /// Log progress (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a built-in system; writes trajectory.csv and measurement.csv.
    Simulate(RunArgs),
    /// Build the Hankel embedding and SVD basis and report diagnostics.
    Embed(RunArgs),
    /// Train a model end to end.
    Train(RunArgs),
    /// Train every point of a parameter grid and rank the results.
    Sweep(SweepArgs),
    /// Evaluate a saved model.
    Eval {
        /// Checkpoint directory (the `model` folder written by `train`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// Flags shared by every command. Each maps onto a config key and wins over
/// the config file.
#[derive(Args, Default)]
struct RunArgs {
    /// Config file (sectioned key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    no_plot: bool,

    /// lorenz, rossler or lotka_volterra.
    #[arg(long)]
    system: Option<String>,
    /// Comma-separated system parameters.
    #[arg(long, allow_hyphen_values = true)]
    params: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    /// Measurement CSV (`t,y`) instead of a simulation.
    #[arg(long)]
    input: Option<String>,
    /// Sampling interval.
    #[arg(long)]
    dt: Option<String>,
    /// Number of samples to simulate (same as --samples).
    #[arg(long)]
    steps: Option<String>,
    /// Training columns of the Hankel matrix.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    component: Option<String>,
    #[arg(long)]
    noise: Option<String>,

    /// Delay count, or `auto`.
    #[arg(long)]
    n: Option<String>,
    /// SVD rank, or `none`.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    m: Option<String>,
    /// Comma-separated hidden layer widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    degree: Option<String>,
    #[arg(long)]
    trig: Option<String>,

    /// supervised, known_equation, perturbed or random.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    rollout_steps: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<String>,

    #[arg(long)]
    horizon: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let named = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("system", &self.system),
            ("params", &self.params),
            ("x0", &self.x0),
            ("input", &self.input),
            ("dt", &self.dt),
            ("samples", &self.steps),
            ("samples", &self.samples),
            ("holdout", &self.holdout),
            ("component", &self.component),
            ("noise", &self.noise),
            ("n", &self.n),
            ("p", &self.p),
            ("m", &self.m),
            ("hidden", &self.hidden),
            ("activation", &self.activation),
            ("degree", &self.degree),
            ("trig", &self.trig),
            ("mode", &self.mode),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.lr),
            ("threshold", &self.threshold),
            ("rollout_steps", &self.rollout_steps),
            ("sigma", &self.sigma),
            ("pretrain_epochs", &self.pretrain_epochs),
            ("horizon", &self.horizon),
        ];
        let mut out: Vec<(String, String)> =
            named.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect();
        if self.no_plot {
            out.push(("plot".into(), "false".into()));
        }
        out
    }

    fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        for (k, v) in self.overrides() {
            cfg.set(&k, &v)?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Grid axis `key=a|b|c`; repeat for more axes.
    #[arg(long = "grid", value_name = "KEY=A|B")]
    grid: Vec<String>,
    /// Comma-separated seeds run for every cell.
    #[arg(long)]
    seeds: Option<String>,
    /// Parallel workers (capped by DELAY_SINDY_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
}

fn sweep_spec(args: &SweepArgs) -> Result<SweepSpec, CliError> {
    let mut spec = match &args.run.config {
        Some(path) => SweepSpec::load(path)?,
        None => SweepSpec::new(RunConfig::default()),
    };
    args.run.apply(&mut spec.base)?;
    if args.run.seed.is_some() && args.seeds.is_none() {
        spec.seeds = vec![spec.base.seed];
    }
    for axis in &args.grid {
        spec.add_axis(axis)?;
    }
    if let Some(seeds) = &args.seeds {
        spec.seeds = seeds
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("bad seed `{s}`"))))
            .collect::<Result<_, _>>()?;
    }
    if let Some(w) = args.workers {
        spec.workers = w;
    }
    Ok(spec)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = args.config()?;
            if cfg.samples == 0 {
                return Err(CliError::Usage("--steps must be positive".into()));
            }
            let s = commands::simulate(&cfg)?;
            println!("simulated {} samples into {}", s.samples, cfg.out.display());
        }
        Command::Embed(args) => {
            let cfg = args.config()?;
            let s = commands::embed(&cfg)?;
            println!("n = {}, q = {}, p = {}", s.n, s.q, s.p);
            println!("variance_captured = {:.6}", s.variance_captured);
        }
        Command::Train(args) => {
            let cfg = args.config()?;
            let o = commands::train(&cfg)?;
            let vars = delay_sindy::sindy::default_var_names(o.model.latent_dim());
            print!("{}", delay_sindy::sindy::format_equations(&o.model.sindy, &vars, 4));
            if let Some(last) = o.report.last() {
                println!(
                    "final: recon {:.3e}  z1 {:.3e}  cons {:.3e}  active terms {}",
                    last.loss.recon, last.loss.z1, last.loss.cons, last.active_terms
                );
            }
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Sweep(args) => {
            let spec = sweep_spec(&args)?;
            let rows = run_sweep(&spec)?;
            let failed = rows.iter().filter(|r| !r.ok).count();
            println!(
                "{} runs ({failed} failed); leaderboard in {}",
                rows.len(),
                spec.base.out.join("leaderboard.csv").display()
            );
        }
        Command::Eval { checkpoint, run } => {
            let cfg = run.config()?;
            let s = commands::eval(&cfg, &checkpoint)?;
            print!("{}", s.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
