use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nanonat::scenario::{fate, load_scenario, run_with, RunConfig};
use nanonat::{parse_rule_command, render_rule_command};

const EXIT_MISMATCH: u8 = 1;
const EXIT_LOAD: u8 = 2;

#[derive(Parser)]
#[command(name = "nanonat", version, about = "Deterministic NAT router simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and check its expectations.
    Run {
        scenario: PathBuf,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print every router's connection table after the run.
        #[arg(long)]
        dump_conntrack: bool,
        /// Use the shuffled port allocator with this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many virtual seconds.
        #[arg(long, value_name = "VIRTUAL_SECS")]
        until: Option<u64>,
    },
    /// Parse one iptables command and print its canonical form.
    CheckRule { command: String },
    /// Follow a single packet through a scenario's topology.
    Fate {
        scenario: PathBuf,
        /// "<proto> <src>:<id> <dst>:<id> --in <node>/<iface>"
        #[arg(long, allow_hyphen_values = true)]
        packet: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            trace,
            dump_conntrack,
            seed,
            until,
        } => run(
            scenario,
            trace,
            dump_conntrack,
            RunConfig {
                seed,
                until_secs: until,
            },
        ),
        Command::CheckRule { command } => match parse_rule_command(&command) {
            Ok(cmd) => {
                println!("{}", render_rule_command(&cmd));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(EXIT_LOAD)
            }
        },
        Command::Fate { scenario, packet } => {
            let report = load_scenario(&scenario).and_then(|s| fate(&s, &packet));
            match report {
                Ok(r) => {
                    print!("{}", r.render());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_LOAD)
                }
            }
        }
    }
}

fn run(path: PathBuf, trace_out: Option<PathBuf>, dump: bool, cfg: RunConfig) -> ExitCode {
    let outcome = match load_scenario(&path).and_then(|s| run_with(&s, &cfg)) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_LOAD);
        }
    };
    let rendered = outcome.trace.render();
    match &trace_out {
        Some(out) => {
            if let Err(e) = std::fs::write(out, &rendered) {
                eprintln!("error: {}: {e}", out.display());
                return ExitCode::from(EXIT_LOAD);
            }
        }
        None => print!("{rendered}"),
    }
    if dump {
        print!("{}", outcome.dump_conntrack());
    }
    print!("{}", outcome.report.render());
    if outcome.report.all_matched() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_MISMATCH)
    }
}
