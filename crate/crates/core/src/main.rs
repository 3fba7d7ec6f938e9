use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qkdnet::harness::{self, read_file, RunOptions, EXIT_CONFIG, EXIT_EXPECTATION, EXIT_OK};
use qkdnet::{load_topology, WeightPolicy};

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "QKD key management network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its message trace
    Run {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        trace_out: PathBuf,
        #[arg(long)]
        weight_policy: Option<WeightPolicy>,
        /// Discovery cache lifetime at every vKMS, in ms (0 disables it)
        #[arg(long)]
        cache_ttl: Option<u64>,
        /// Also write the final report as JSON
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Check a topology file
    Validate {
        #[arg(long)]
        topology: PathBuf,
    },
    /// Compare two traces after canonicalization
    Diff { expected: PathBuf, actual: PathBuf },
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { topology, scenario, seed, trace_out, weight_policy, cache_ttl, report_out } => {
            let opts = RunOptions { seed, weight_policy, cache_ttl_ms: cache_ttl, ..RunOptions::default() };
            let out = match harness::run_files(&topology, &scenario, &opts) {
                Ok(out) => out,
                Err(e) => {
                    eprintln!("error: {e}");
                    return code(e.exit_code());
                }
            };
            if let Err(e) = fs::write(&trace_out, out.trace_text()) {
                eprintln!("error: {}: {e}", trace_out.display());
                return code(EXIT_CONFIG);
            }
            let report = serde_json::to_string_pretty(&out.report).expect("report serializes");
            match report_out {
                Some(path) => {
                    if let Err(e) = fs::write(&path, report) {
                        eprintln!("error: {}: {e}", path.display());
                        return code(EXIT_CONFIG);
                    }
                }
                None => println!("{report}"),
            }
            for f in &out.report.failures {
                eprintln!("FAIL: {f}");
            }
            if let Some(d) = &out.report.trace_diff {
                eprintln!("{d}");
            }
            code(out.exit_code())
        }
        Command::Validate { topology } => {
            let result = read_file(&topology).and_then(|t| Ok(load_topology(&t)?));
            match result {
                Ok(t) => {
                    println!(
                        "ok: {} nodes, {} links, {} apps",
                        t.nodes().len(),
                        t.links().len(),
                        t.apps().len()
                    );
                    code(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    code(EXIT_CONFIG)
                }
            }
        }
        Command::Diff { expected, actual } => {
            let texts = read_file(&expected).and_then(|e| Ok((e, read_file(&actual)?)));
            let (e, a) = match texts {
                Ok(t) => t,
                Err(err) => {
                    eprintln!("error: {err}");
                    return code(EXIT_CONFIG);
                }
            };
            match harness::trace_compare(&e, &a) {
                Ok(d) if d.is_empty() => {
                    println!("{d}");
                    code(EXIT_OK)
                }
                Ok(d) => {
                    println!("{d}");
                    code(EXIT_EXPECTATION)
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    code(EXIT_CONFIG)
                }
            }
        }
    }
}
