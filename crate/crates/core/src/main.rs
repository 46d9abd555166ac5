use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mgshield::cli::{self, CliError};

#[derive(Parser)]
#[command(name = "mgshield", version, about = "Microgrid attack simulation, detection and stability analysis")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
    /// Worker threads for independent scenarios (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a scenario and write trace and summary CSVs.
    Run {
        config: PathBuf,
        /// Output directory (default: [sim] output, then $MGSHIELD_OUT, then .).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the four-scenario eigenvalue CSV.
        #[arg(long)]
        eigen: bool,
    },
    /// Parse and check a scenario without running it.
    Validate { config: PathBuf },
    /// Run once per value of one parameter and collect the summaries.
    Sweep {
        config: PathBuf,
        /// Dotted path such as `attack.b` or `microgrid.dgs[3].m_p`.
        #[arg(long)]
        param: String,
        /// TOML literals substituted at `param`.
        #[arg(long, num_args = 1.., required = true, allow_negative_numbers = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the eigenvalue CSV of the four attack scenarios.
    Eigen {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(args: Args) -> Result<(), CliError> {
    match args.cmd {
        Cmd::Run { config, out, eigen } => {
            let (_, cfg) = cli::load_config(&config)?;
            let dir = cli::output_dir(out.as_deref(), &cfg);
            let (files, rows) = cli::run(&cfg, &dir, eigen, args.jobs)?;
            let alarms: usize = rows.iter().map(|r| r.alarms).sum();
            println!("wrote {} and {} ({alarms} alarm samples)", files.trace.display(), files.summary.display());
            if let Some(e) = files.eigen {
                println!("wrote {}", e.display());
            }
        }
        Cmd::Validate { config } => {
            let (_, cfg) = cli::load_config(&config)?;
            let kind = match cfg.attack {
                mgshield::microgrid::sim::AttackPlan::None => "none",
                mgshield::microgrid::sim::AttackPlan::Stealthy(_) => "stealthy",
                mgshield::microgrid::sim::AttackPlan::Arbitrary(_) => "arbitrary",
            };
            println!("{}: ok ({} DGs, attack {kind}, {} steps)", config.display(), cfg.microgrid.n(), cfg.sim.options().steps());
        }
        Cmd::Sweep { config, param, values, out } => {
            let (text, cfg) = cli::load_config(&config)?;
            let dir = cli::output_dir(out.as_deref(), &cfg);
            let path = cli::sweep(&text, &param, &values, &dir, args.jobs)?;
            println!("wrote {}", path.display());
        }
        Cmd::Eigen { config, out } => {
            let (_, cfg) = cli::load_config(&config)?;
            let dir = cli::output_dir(out.as_deref(), &cfg);
            println!("wrote {}", cli::eigen(&cfg, &dir, args.jobs)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
