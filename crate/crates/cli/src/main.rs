use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod fixture;
mod io;

use commands::FitOptions;
use config::{ChainArgs, Convention, GlobalArgs, Mode, RunConfig};
use error::CliResult;
use fixture::FixtureSpec;

#[derive(Parser)]
#[command(name = "dgpemu", version, about = "Multi-fidelity spectrum fusion and emulation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic simulation study and write simulation.csv.
    Simulate {
        /// Scenario label such as f1A-r5; repeatable. Defaults to the full grid.
        #[arg(long = "scenario")]
        scenarios: Vec<String>,
        /// Replicates per scenario.
        #[arg(long)]
        reps: Option<usize>,
        #[command(flatten)]
        chain: ChainArgs,
    },
    /// Fuse and fit each cosmology's spectra (a CSV file or a directory of them).
    Fit {
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, value_enum)]
        convention: Option<Convention>,
        /// Store every retained warp in the artifact.
        #[arg(long)]
        keep_warps: bool,
        /// Store posterior draws (enables log scores in `score`).
        #[arg(long)]
        keep_draws: bool,
        #[command(flatten)]
        chain: ChainArgs,
    },
    /// Build the principal-component basis from a directory of fitted posteriors.
    Basis {
        input: PathBuf,
        #[arg(long)]
        p_eta: Option<usize>,
    },
    /// Fit the weight GPs of the emulator.
    Emulate {
        /// Parameter table: cosmology_id followed by one column per parameter.
        params: PathBuf,
        /// Defaults to basis.json in the output directory.
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Predict curves for each row of a parameter table.
    Predict {
        params: PathBuf,
        /// Defaults to emulator.json in the output directory.
        #[arg(long)]
        emulator: Option<PathBuf>,
        /// Write raw power instead of the emulation-space curve.
        #[arg(long)]
        power: bool,
    },
    /// Compare predicted curves to reference curves (a CSV or a fit directory).
    Score { predictions: PathBuf, reference: PathBuf },
    /// Write a synthetic multi-fidelity data set.
    MakeFixture {
        #[arg(long, default_value_t = FixtureSpec::default().cosmologies)]
        cosmologies: usize,
        #[arg(long, default_value_t = FixtureSpec::default().points)]
        points: usize,
        #[arg(long, default_value_t = FixtureSpec::default().runs)]
        runs: usize,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let rc = RunConfig::resolve(&cli.global)?;
    if let Some(j) = rc.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let shown = |p: PathBuf| p.display().to_string();
    Ok(match cli.command {
        Command::Simulate { scenarios, reps, chain } => shown(commands::simulate(&rc, &scenarios, reps, &chain)?),
        Command::Fit {
            input,
            mode,
            convention,
            keep_warps,
            keep_draws,
            chain,
        } => {
            let opts = FitOptions {
                mode,
                convention,
                keep_warps,
                keep_draws,
                chain,
            };
            let written = commands::fit_command(&rc, &input, &opts)?;
            format!("{} posteriors in {}", written.len(), rc.output_dir.join(commands::FIT_DIR).display())
        }
        Command::Basis { input, p_eta } => shown(commands::basis_command(&rc, &input, p_eta)?),
        Command::Emulate { params, basis } => shown(commands::emulate_command(&rc, basis.as_deref(), &params)?),
        Command::Predict { params, emulator, power } => {
            shown(commands::predict_command(&rc, emulator.as_deref(), &params, power)?)
        }
        Command::Score { predictions, reference } => {
            let out = commands::score_command(&rc, &predictions, &reference)?;
            format!("{} and {}", out.per_curve.display(), out.per_k.display())
        }
        Command::MakeFixture {
            cosmologies,
            points,
            runs,
        } => {
            let spec = FixtureSpec {
                cosmologies,
                points,
                runs,
                ..FixtureSpec::default()
            };
            shown(commands::fixture_command(&rc, spec)?)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let argv: Vec<String> = std::env::args().collect();
    let out = RunConfig::resolve(&cli.global).map(|rc| rc.output_dir).ok();
    match run(cli) {
        Ok(msg) => {
            if let Some(o) = &out {
                io::log_run(o, &format!("ok: {}", argv.join(" ")));
            }
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(o) = &out {
                io::log_run(o, &format!("exit {}: {}: {e}", e.exit_code(), argv.join(" ")));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
