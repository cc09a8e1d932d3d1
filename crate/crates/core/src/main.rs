use std::fs;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use canstack::action::Mutations;
use canstack::bus::trace::{read_trace, replay, write_trace};
use canstack::explorer::{check_fig1, explore, find_starvation, Fig1Error, Report};
use canstack::mux::Scheduling;
use canstack::scenario::Scenario;
use canstack::sim::simulate;

const CLEAN: u8 = 0;
const VIOLATION: u8 = 1;
const USAGE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// One seeded random run, written as a trace.
    Simulate,
    /// Every interleaving up to the bounds, checked against all properties.
    Explore,
    /// Priority-inversion check with and without the multiplexer.
    Fig1,
    /// Re-execute a recorded trace and compare digests.
    Replay,
    /// Look for runs where a frame waits in a TX buffer forever. Descriptive:
    /// exits 0 whether or not one is found.
    Starvation,
}

/// Check fragmentation, reassembly and multiplexing over a simulated CAN bus.
#[derive(Debug, Parser)]
#[command(name = "canstack", version)]
struct Cli {
    /// Scenario file (TOML).
    scenario: PathBuf,

    #[arg(long, value_enum, default_value = "explore", env = "CANSTACK_MODE")]
    mode: Mode,

    /// Seed for `simulate`.
    #[arg(long, default_value_t = 0, env = "CANSTACK_SEED")]
    seed: u64,

    /// Depth bound for `explore`/`fig1`, step limit for `simulate`.
    #[arg(long, env = "CANSTACK_DEPTH")]
    depth: Option<usize>,

    /// State budget for exploration.
    #[arg(long, env = "CANSTACK_MAX_STATES")]
    max_states: Option<usize>,

    /// Directory for traces and reports.
    #[arg(long, env = "CANSTACK_OUT")]
    out: Option<PathBuf>,

    /// Compare full states whenever digests match.
    #[arg(long, env = "CANSTACK_PARANOID")]
    paranoid: bool,

    /// Hand frames to the driver in arrival order, without preemption.
    #[arg(long, env = "CANSTACK_MUX_BYPASS")]
    mux_bypass: bool,

    /// Trace to re-execute in `replay` mode.
    #[arg(long, env = "CANSTACK_TRACE")]
    trace: Option<PathBuf>,

    /// Seed a protocol fault (repeatable).
    #[arg(long, hide = true, value_parser = parse_mutation)]
    mutation: Vec<Mutations>,
}

fn parse_mutation(name: &str) -> Result<Mutations, String> {
    Mutations::by_name(name).ok_or_else(|| {
        let known: Vec<_> = Mutations::NAMES.iter().map(|(n, _)| *n).collect();
        format!("unknown mutation `{name}`; known: {}", known.join(", "))
    })
}

#[derive(Debug)]
enum Failure {
    Usage(String),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(USAGE)
        }
    }
}

fn out_file(cli: &Cli, name: &str) -> Result<Option<PathBuf>, Failure> {
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
            Ok(Some(dir.join(name)))
        }
        None => Ok(None),
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    let mut scenario = Scenario::load(&cli.scenario).map_err(|d| Failure::Usage(d.to_string()))?;
    let sys = &mut scenario.system;
    sys.mutations = cli.mutation.iter().fold(Mutations::empty(), |m, x| m | *x);
    if cli.mux_bypass {
        sys.scheduling = Scheduling::Fifo;
    }
    let mut cfg = scenario.explore_config(cli.depth, cli.max_states);
    cfg.paranoid = cli.paranoid;
    let sys = &scenario.system;

    match cli.mode {
        Mode::Simulate => {
            let sim = simulate(sys, cli.seed, cfg.depth);
            match out_file(cli, "trace.jsonl")? {
                Some(path) => write_trace(fs::File::create(&path)?, &sim.trace)?,
                None => write_trace(io::stdout().lock(), &sim.trace)?,
            }
            let end = if sim.quiescent {
                "quiescent"
            } else if sim.terminated {
                "stuck"
            } else {
                "step limit reached"
            };
            eprintln!(
                "{}: {} steps, seed {}, {end}",
                scenario.name,
                sim.trace.len() - 1,
                cli.seed
            );
            for p in &sim.problems {
                eprintln!("  {p}");
            }
            Ok(if sim.problems.is_empty() {
                CLEAN
            } else {
                VIOLATION
            })
        }
        Mode::Explore => {
            let report = explore(sys, cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("{}", scenario.name);
            print!("{}", report.summary());
            write_report(cli, "", &report)?;
            Ok(if report.has_violation() {
                VIOLATION
            } else {
                CLEAN
            })
        }
        Mode::Fig1 => {
            let verdict = match check_fig1(sys, cfg) {
                Ok(v) => v,
                Err(Fig1Error::Inapplicable) => {
                    println!("{}: inapplicable (no [priority] pair)", scenario.name);
                    return Ok(CLEAN);
                }
                Err(e) => return Err(Failure::Usage(e.to_string())),
            };
            println!("{} with multiplexer", scenario.name);
            print!("{}", verdict.with_mux.summary());
            println!("{} with multiplexer bypassed", scenario.name);
            print!("{}", verdict.bypassed.summary());
            write_report(cli, "mux-", &verdict.with_mux)?;
            write_report(cli, "bypass-", &verdict.bypassed)?;
            let reproduced = verdict.reproduced();
            let line = if reproduced {
                "reproduced: no inversion with the multiplexer, blocking run without it"
            } else {
                "not reproduced"
            };
            println!("fig1: {line}");
            if let Some(path) = out_file(cli, "fig1.txt")? {
                fs::write(path, format!("{line}\n"))?;
            }
            let clean = reproduced && !verdict.with_mux.has_violation();
            Ok(if clean { CLEAN } else { VIOLATION })
        }
        Mode::Starvation => {
            let report = find_starvation(sys, cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            let st = &report.stats;
            println!(
                "{}: {} states explored, depth {}{}",
                scenario.name,
                st.states,
                st.max_depth,
                if st.complete { "" } else { " (bounded)" }
            );
            for (app, found) in &report.apps {
                let name = sys.topology.app_name(*app);
                let Some(s) = found else {
                    println!("  {name}: no starving cycle within the bound");
                    continue;
                };
                let granted: Vec<String> = s.granted.iter().map(|c| c.to_string()).collect();
                println!(
                    "  {name}: starvable; after {} steps a {}-step cycle grants [{}] while its frame waits",
                    s.prefix.len(),
                    s.cycle.len(),
                    granted.join(" ")
                );
                if let Some(path) = out_file(cli, &format!("starve-{name}.jsonl"))? {
                    write_trace(fs::File::create(path)?, &s.trace)?;
                }
            }
            Ok(CLEAN)
        }
        Mode::Replay => {
            let path = cli
                .trace
                .as_deref()
                .ok_or_else(|| Failure::Usage("replay needs --trace FILE".into()))?;
            let file = fs::File::open(path)
                .map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))?;
            let records =
                read_trace(BufReader::new(file)).map_err(|e| Failure::Usage(e.to_string()))?;
            match replay(sys, &records) {
                Ok(world) => {
                    println!(
                        "replayed {} steps, final digest {}",
                        records.len().saturating_sub(1),
                        world.digest()
                    );
                    Ok(CLEAN)
                }
                Err(e) => {
                    println!("replay diverged: {e}");
                    Ok(VIOLATION)
                }
            }
        }
    }
}

fn write_report(cli: &Cli, prefix: &str, report: &Report) -> Result<(), Failure> {
    let Some(path) = out_file(cli, &format!("{prefix}report.jsonl"))? else {
        return Ok(());
    };
    fs::write(&path, report.to_jsonl())?;
    if let Some(summary) = out_file(cli, &format!("{prefix}summary.txt"))? {
        fs::write(summary, report.summary())?;
    }
    for (p, cex) in report.violations() {
        if let Some(file) = out_file(cli, &format!("{prefix}cex-{p}.jsonl"))? {
            let mut f = fs::File::create(file)?;
            write_trace(&mut f, &cex.trace)?;
            f.flush()?;
        }
    }
    Ok(())
}
