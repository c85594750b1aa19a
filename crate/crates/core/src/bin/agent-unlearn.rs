use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use agent_unlearn::experiment::pipeline::write_attack_report;
use agent_unlearn::experiment::{
    run_experiment, run_theory_checks, write_artifacts, BackendConfig, ExperimentConfig,
    ExperimentError,
};
use agent_unlearn::grid::generate;

#[derive(Parser)]
#[command(name = "agent-unlearn", version, about = "Behavioral unlearning experiments for grid-world agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grid-level parallelism.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Required for the remote backend.
    #[arg(long)]
    allow_network: bool,
    /// Overrides the config output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline; writes every artifact.
    Run(RunArgs),
    /// Derivative, contraction and tilt checks; writes certificates.json.
    Certify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        output: PathBuf,
    },
    /// Pipeline with attacks; writes attack_report.json only.
    Attack(RunArgs),
    /// Prints a generated grid.
    GenEnv {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        width: usize,
        #[arg(long, default_value_t = 10)]
        height: usize,
        #[arg(long, default_value_t = 15)]
        obstacles: usize,
        #[arg(long, default_value_t = 3)]
        treasures: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.output {
        config.output_dir = out.clone();
    }
    if args.jobs == 0 {
        return Err(ExperimentError::Config("--jobs must be at least 1".into()));
    }
    if matches!(config.backend, BackendConfig::Remote(_)) && !args.allow_network {
        return Err(ExperimentError::Config(
            "the remote backend needs --allow-network".into(),
        ));
    }
    Ok(config)
}

fn run(args: &RunArgs, attacks_only: bool) -> Result<bool, ExperimentError> {
    let mut config = load(args)?;
    if attacks_only {
        config.run_attacks = true;
    }
    let started = Instant::now();
    let outcome = run_experiment(&config, args.jobs)?;
    if attacks_only {
        write_attack_report(&outcome, &config.output_dir)?;
    } else {
        write_artifacts(&outcome, &config.output_dir)?;
    }
    let m = &outcome.metrics;
    println!(
        "{} grids, strategy {}: efficacy {:.3}, unlearn@1 {:.3}, steps {:.2} -> {:.2} ({:.1}s)",
        outcome.grids.len(),
        m.method,
        m.unlearn_efficacy,
        m.unlearn_at_1,
        m.steps_before,
        m.steps_after_target,
        started.elapsed().as_secs_f64()
    );
    for c in &outcome.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if !outcome.passed() {
        eprintln!("error: acceptance checks failed");
    }
    Ok(outcome.passed())
}

fn certify(seed: u64, output: &PathBuf) -> Result<bool, ExperimentError> {
    let report = run_theory_checks(seed)?;
    fs::create_dir_all(output)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| ExperimentError::Failed(e.to_string()))?;
    fs::write(output.join("certificates.json"), text + "\n")?;
    let c = &report.contraction;
    println!(
        "gradient rel err {:.2e}, hessian err {:.2e}, max gap ratio {:.6} (bound {:.6}), tilt TV {:.2e}",
        report.derivatives.max_gradient_rel_error,
        report.derivatives.max_hessian_abs_error,
        c.max_gap_ratio,
        c.certificates.contraction_bound,
        report.tilt.total_variation
    );
    if !report.passed() {
        eprintln!("error: theory checks failed");
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args, false),
        Command::Attack(args) => run(args, true),
        Command::Certify { seed, output } => certify(*seed, output),
        Command::GenEnv {
            seed,
            width,
            height,
            obstacles,
            treasures,
            format,
        } => generate(*seed, *width, *height, *obstacles, *treasures)
            .map(|spec| {
                match format {
                    Format::Text => print!("{}", spec.to_text()),
                    Format::Json => println!("{}", spec.to_json()),
                }
                true
            })
            .map_err(|e| ExperimentError::Config(e.to_string())),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
