use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use wkb_harness::{run_experiment, Experiment, ExperimentConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    VerifyBounds,
    CookDecay,
    CompareModifications,
    CauchyProfile,
    WaveOperator,
    Intertwining,
    ConditionsAudit,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::VerifyBounds => Experiment::VerifyBounds,
            Command::CookDecay => Experiment::CookDecay,
            Command::CompareModifications => Experiment::CompareModifications,
            Command::CauchyProfile => Experiment::CauchyProfile,
            Command::WaveOperator => Experiment::WaveOperator,
            Command::Intertwining => Experiment::Intertwining,
            Command::ConditionsAudit => Experiment::ConditionsAudit,
        }
    }
}

/// Runs one experiment. Exit status: 0 pass, 1 threshold failure, 2 configuration or
/// numerical error.
#[derive(Debug, Parser)]
#[command(name = "wkb", version)]
struct Cli {
    #[arg(value_enum)]
    experiment: Command,
    /// Configuration file; keys not given keep the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Packet seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, String> {
    let experiment = Experiment::from(cli.experiment);
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let cfg = ExperimentConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            if cfg.experiment != experiment {
                return Err(format!("{} configures '{}', not '{experiment}'", path.display(), cfg.experiment));
            }
            cfg
        }
        None => ExperimentConfig::default_for(experiment),
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_text());
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = outcome.write(&cfg.output_dir, &cfg) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    print!("{}", outcome.summary());
    for c in outcome.checks.iter().filter(|c| !c.pass) {
        eprintln!("threshold failed: {} = {:e} (required {} {:e})", c.name, c.value, c.relation, c.threshold);
    }
    if outcome.pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
