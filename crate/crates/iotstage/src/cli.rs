//! Command-line interface: validate, run (single or repeated), calibrate.
//!
//! Exit codes: 0 success, 2 validation failure, 3 runtime failure or
//! abort, 64 usage error. Diagnostics go to stderr; stdout carries only
//! the summary (or requested document). `IOTSTAGE_LOG` controls log
//! verbosity (error/info/debug).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::calibrate;
use crate::coordinator::{run_repeated, run_scenario, RunError, RunOptions};
use crate::metrics::{emit_report, format_summary, multi_run_json, single_run_json};
use crate::runtime::BehaviorRegistry;
use crate::scenario::{self, ChannelSelector, Mode, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser)]
#[command(name = "iotstage", disable_version_flag = true)]
#[command(about = "Staging environment for distributed IoT applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and report latency statistics.
    Run(RunArgs),
    /// Check a scenario file and print any violations.
    Validate { scenario: PathBuf },
    /// Probe a real endpoint and estimate channel parameters.
    Calibrate(CalibrateArgs),
    /// Print the version.
    Version,
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the execution mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Override the real-time factor (scaled mode).
    #[arg(long)]
    rtf: Option<f64>,
    /// Number of runs; run i uses seed + i.
    #[arg(long, default_value_t = 1)]
    repeat: u64,
    /// Trace output: a JSONL file for one run, a directory for repeats.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Endpoint to probe, host:port.
    #[arg(long)]
    target: String,
    /// Number of probes to send.
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Gap between probes.
    #[arg(long = "spacing-ms", default_value_t = 20)]
    spacing_ms: u64,
    /// Trailing wait for stragglers.
    #[arg(long = "timeout-ms", default_value_t = 1000)]
    timeout_ms: u64,
    /// Scenario file to write the estimate into.
    #[arg(long = "merge-into")]
    merge_into: Option<PathBuf>,
    /// Channel to update: "wireless" or "a,b".
    #[arg(long)]
    channel: Option<String>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "fast" => Ok(Mode::Fast),
        "realtime" => Ok(Mode::Realtime),
        "scaled" => Ok(Mode::Scaled),
        other => Err(format!("invalid mode '{other}' (expected fast|realtime|scaled)")),
    }
}

fn parse_channel(s: &str) -> Result<ChannelSelector, String> {
    if s == "wireless" {
        return Ok(ChannelSelector::Wireless);
    }
    match s.split_once(',') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => {
            Ok(ChannelSelector::Link(a.trim().to_string(), b.trim().to_string()))
        }
        _ => Err(format!("invalid channel '{s}' (expected \"wireless\" or \"a,b\")")),
    }
}

static ABORT: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_sig: libc::c_int) {
    ABORT.store(true, Ordering::SeqCst);
}

fn install_sigint_handler() {
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
    }
}

/// Shares the process-wide SIGINT flag as an `Arc` the coordinator polls.
/// A small poller mirrors the static into the Arc and exits with it.
fn sigint_arc() -> Arc<AtomicBool> {
    let arc = Arc::new(AtomicBool::new(ABORT.load(Ordering::SeqCst)));
    let weak = Arc::downgrade(&arc);
    std::thread::spawn(move || loop {
        std::thread::sleep(Duration::from_millis(20));
        let Some(strong) = weak.upgrade() else { break };
        if ABORT.load(Ordering::SeqCst) {
            strong.store(true, Ordering::SeqCst);
        }
    });
    arc
}

/// Parses argv and executes; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    EXIT_OK
                }
                _ => {
                    let _ = e.print();
                    EXIT_USAGE
                }
            };
        }
    };
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Version => {
            println!("iotstage {}", env!("CARGO_PKG_VERSION"));
            EXIT_OK
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("IOTSTAGE_LOG", "error");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn load_scenario(path: &Path) -> Result<Scenario, i32> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return Err(EXIT_RUNTIME);
        }
    };
    scenario::parse_scenario(&text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_VALIDATION
    })
}

fn cmd_validate(path: &Path) -> i32 {
    let scenario = match load_scenario(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let registry = BehaviorRegistry::with_builtins();
    let violations = scenario::validate_with_behaviors(&scenario, Some(&registry.names()));
    if violations.is_empty() {
        println!("ok");
        EXIT_OK
    } else {
        for v in &violations {
            println!("{v}");
        }
        EXIT_VALIDATION
    }
}

fn cmd_run(args: RunArgs) -> i32 {
    let mut scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let mut overrides = BTreeMap::new();
    if let Some(seed) = args.seed {
        scenario.seed = seed;
        overrides.insert("seed".to_string(), seed.to_string());
    }
    if let Some(mode) = args.mode {
        scenario.mode = mode;
        let name = match mode {
            Mode::Fast => "fast",
            Mode::Realtime => "realtime",
            Mode::Scaled => "scaled",
        };
        overrides.insert("mode".to_string(), name.to_string());
    }
    if let Some(rtf) = args.rtf {
        scenario.rtf = rtf;
        overrides.insert("rtf".to_string(), rtf.to_string());
    }

    let registry = BehaviorRegistry::with_builtins();
    let violations = scenario::validate_with_behaviors(&scenario, Some(&registry.names()));
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v}");
        }
        return EXIT_VALIDATION;
    }

    install_sigint_handler();
    let abort = sigint_arc();

    if args.repeat <= 1 {
        let opts = RunOptions {
            run_index: 0,
            trace_path: args.trace.clone(),
            abort: Some(abort),
        };
        match run_scenario(&scenario, &registry, &opts) {
            Ok(report) => {
                print_single_summary(&report);
                if let Some(path) = &args.report {
                    let doc = single_run_json(&scenario.name, scenario.seed, overrides, &report);
                    if let Err(e) = emit_report(&doc, path) {
                        eprintln!("cannot write report: {e}");
                        return EXIT_RUNTIME;
                    }
                }
                EXIT_OK
            }
            Err(e) => runtime_failure(e),
        }
    } else {
        match run_repeated(&scenario, &registry, args.repeat, args.trace.as_deref(), Some(abort)) {
            Ok(multi) => {
                for (tag, stats) in multi.tag_stats() {
                    println!("{tag}: {} (n_runs={})", stats.summary, multi.n_runs());
                }
                if let Some(path) = &args.report {
                    let doc = multi_run_json(&scenario.name, scenario.seed, overrides, &multi);
                    if let Err(e) = emit_report(&doc, path) {
                        eprintln!("cannot write report: {e}");
                        return EXIT_RUNTIME;
                    }
                }
                EXIT_OK
            }
            Err(e) => runtime_failure(e),
        }
    }
}

fn print_single_summary(report: &crate::metrics::RunReport) {
    let stats = report.tag_stats();
    if stats.is_empty() {
        println!("no probe samples");
        return;
    }
    for (tag, s) in stats {
        println!("{tag}: {} (n={})", format_summary(s.mean_ms, s.std_ms), s.count);
    }
}

fn runtime_failure(e: RunError) -> i32 {
    eprintln!("run failed: {e}");
    EXIT_RUNTIME
}

fn cmd_calibrate(args: CalibrateArgs) -> i32 {
    let spacing = Duration::from_millis(args.spacing_ms);
    let timeout = Duration::from_millis(args.timeout_ms);
    let outcome = match calibrate::probe(&args.target, args.probes, spacing, timeout) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("probe failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    let estimate = match calibrate::estimate(&outcome.rtts_ns, outcome.lost) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("estimate failed: {e}");
            return EXIT_RUNTIME;
        }
    };
    println!("{}", estimate.to_json());

    if let Some(path) = &args.merge_into {
        let channel = match &args.channel {
            Some(c) => match parse_channel(c) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return EXIT_USAGE;
                }
            },
            None => ChannelSelector::Wireless,
        };
        let scenario = match load_scenario(path) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let merged = match scenario::merge_calibration(&scenario, &estimate, &channel) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("merge failed: {e}");
                return EXIT_VALIDATION;
            }
        };
        if let Err(e) = std::fs::write(path, scenario::serialize_scenario(&merged)) {
            eprintln!("cannot write {}: {e}", path.display());
            return EXIT_RUNTIME;
        }
    }
    EXIT_OK
}
