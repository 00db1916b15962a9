use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smcheck::dispatch::{check_distributed, serve_tcp, Workers};
use smcheck::error::{CheckError, SchedulerError};
use smcheck::explorer::default_bound;
use smcheck::scheduler::estimate_bound;
use smcheck::tracer::{parse_trace, replay};
use smcheck::{corpus, ExplorationConfig, ProgramHandle, RunConfig};

const EXIT_CLEAN: u8 = 0;
const EXIT_VIOLATIONS: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "smcheck",
    version,
    about = "Stateless model checker for multithreaded programs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explore a built-in program and report violations.
    Check {
        #[arg(long)]
        program: String,
        /// Steps per execution before it is cut off.
        #[arg(long)]
        bound: Option<usize>,
        /// Number of nodes; nodes other than the master run as in-process workers.
        #[arg(long, default_value_t = 1)]
        nodes: u32,
        /// Remote worker addresses, comma separated. Overrides --nodes.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Try every enabled thread at every step instead of using DPOR.
        #[arg(long)]
        no_dpor: bool,
        #[arg(long)]
        no_race: bool,
        /// Also report overlapping writes.
        #[arg(long)]
        strict_races: bool,
        #[arg(long)]
        keep_all_traces: bool,
        /// Trace file whose schedule starts the first execution.
        #[arg(long)]
        seed_trace: Option<PathBuf>,
    },
    /// Re-execute a trace file and print the visible operations it runs.
    Replay {
        #[arg(long)]
        program: String,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        bound: Option<usize>,
        #[arg(long)]
        no_race: bool,
        #[arg(long)]
        strict_races: bool,
    },
    /// Serve one workload for a master.
    Worker {
        #[arg(long)]
        listen: String,
    },
    /// Sum of per-thread partition counts.
    EstimateBound {
        #[arg(required = true)]
        partitions: Vec<u32>,
    },
    /// Names of the built-in programs.
    ListPrograms,
}

enum Failure {
    Usage(String),
    Internal(String),
}

impl From<CheckError> for Failure {
    fn from(e: CheckError) -> Self {
        match e {
            CheckError::Config(_)
            | CheckError::Trace(_)
            | CheckError::Scheduler(SchedulerError::ReplayDivergence { .. }) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Internal(other.to_string()),
        }
    }
}

fn program(name: &str) -> Result<ProgramHandle, Failure> {
    corpus::lookup(name).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown program `{name}`; available: {}",
            corpus::PROGRAMS.join(", ")
        ))
    })
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Check {
            program: name,
            bound,
            nodes,
            workers,
            out,
            no_dpor,
            no_race,
            strict_races,
            keep_all_traces,
            seed_trace,
        } => {
            let program = program(&name)?;
            let seed = match seed_trace {
                Some(path) => Some(parse_trace(&path).map_err(CheckError::from)?.steps),
                None => None,
            };
            let workers = if workers.is_empty() {
                Workers::InProcess(nodes)
            } else {
                Workers::Remote(workers)
            };
            let config = ExplorationConfig {
                bound,
                dpor_enabled: !no_dpor,
                race_enabled: !no_race,
                strict_races,
                out_dir: out,
                node_count: workers.node_count(),
                keep_all_traces,
                seed_trace: seed,
            };
            if nodes == 0 {
                return Err(Failure::Usage("--nodes must be at least 1".into()));
            }
            let report = check_distributed(&program, &config, &workers)?;
            for found in &report.violations {
                println!("{}", found.report_line());
            }
            println!(
                "iterations={} violations={} bound_warnings={} points={}",
                report.iterations_run,
                report.violations.len(),
                report.bound_warnings,
                report.points_explored
            );
            Ok(if report.violations.is_empty() {
                EXIT_CLEAN
            } else {
                EXIT_VIOLATIONS
            })
        }
        Command::Replay {
            program: name,
            trace,
            bound,
            no_race,
            strict_races,
        } => {
            let program = program(&name)?;
            let steps = parse_trace(&trace).map_err(CheckError::from)?.steps;
            let config = RunConfig {
                bound: bound.unwrap_or_else(|| default_bound(&program)),
                race_detection: !no_race,
                strict_races,
            };
            let report = replay(&program, &steps, &config)?;
            print!("{}", report.op_log());
            println!("{}", report.status_line());
            Ok(if report.kinds().is_empty() {
                EXIT_CLEAN
            } else {
                EXIT_VIOLATIONS
            })
        }
        Command::Worker { listen } => {
            let listener =
                TcpListener::bind(&listen).map_err(|e| Failure::Usage(format!("{listen}: {e}")))?;
            if let Ok(addr) = listener.local_addr() {
                println!("listening {addr}");
            }
            let report = serve_tcp(&listener, &|name| corpus::lookup(name))?;
            println!(
                "iterations={} violations={}",
                report.iterations_run,
                report.violations.len()
            );
            Ok(EXIT_CLEAN)
        }
        Command::EstimateBound { partitions } => {
            let bound = estimate_bound(&partitions).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{bound}");
            Ok(EXIT_CLEAN)
        }
        Command::ListPrograms => {
            for name in corpus::PROGRAMS {
                println!("{name}");
            }
            Ok(EXIT_CLEAN)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_USAGE
            } else {
                EXIT_CLEAN
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
