use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feddrop::{load_spec, parse_scheme, parse_set, run, sweep, CliError, SweepParameter};

/// Federated-learning simulator with adaptive server-side dropout.
#[derive(Parser)]
#[command(name = "feddrop", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, config.resolved, summary.
    Run(RunArgs),
    /// Run a grid of (scheme, value, seed) cells into one long-format CSV.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Scheme override: vanilla | uniform_dropout | feddrop.
    #[arg(long)]
    scheme: Option<String>,
    /// Round-count override.
    #[arg(long)]
    rounds: Option<usize>,
    /// Per-round deadline in seconds (dropout schemes).
    #[arg(long)]
    deadline: Option<f64>,
    /// Fixed dropout rate (dropout schemes).
    #[arg(long)]
    fixed_p: Option<f64>,
    /// Dotted-key config override, e.g. --set scheme.lr=0.1 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(("master_seed".into(), seed.to_string()));
        }
        if let Some(scheme) = &self.scheme {
            parse_scheme(scheme)?;
            out.push(("scheme.kind".into(), format!("\"{scheme}\"")));
        }
        if let Some(rounds) = self.rounds {
            out.push(("scheme.rounds".into(), rounds.to_string()));
        }
        if let Some(deadline) = self.deadline {
            out.push(("scheme.deadline_s".into(), format!("{deadline}")));
        }
        if let Some(p) = self.fixed_p {
            out.push(("scheme.fixed_p".into(), format!("{p}")));
        }
        for raw in &self.sets {
            out.push(parse_set(raw)?);
        }
        Ok(out)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which knob to vary: dropout-rate | deadline.
    #[arg(long)]
    parameter: SweepParameter,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Schemes to include.
    #[arg(long, value_delimiter = ',', default_values_t = [
        "vanilla".to_string(), "uniform_dropout".to_string(), "feddrop".to_string()
    ])]
    schemes: Vec<String>,
    /// Output CSV path.
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FEDDROP_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => do_run(args),
        Command::Sweep(args) => do_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn do_run(args: RunArgs) -> Result<(), CliError> {
    let spec = load_spec(args.common.config.as_deref(), &args.common.overrides()?)?;
    let summary = run(&spec, &args.out)?;
    println!(
        "{} rounds, final accuracy {:.4}, final loss {:.4}, simulated {:.3} s",
        summary.rounds,
        summary.final_test_acc,
        summary.final_test_loss,
        summary.total_sim_time_s
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn do_sweep(args: SweepArgs) -> Result<(), CliError> {
    let spec = load_spec(args.common.config.as_deref(), &args.common.overrides()?)?;
    let schemes = args
        .schemes
        .iter()
        .map(|s| parse_scheme(s))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = sweep(
        &spec,
        args.parameter,
        &args.values,
        &args.seeds,
        &schemes,
        &args.out,
    )?;
    println!("{cells} cells -> {}", args.out.display());
    Ok(())
}
