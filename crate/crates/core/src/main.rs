use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};

use hwnode::apps::bench::{run_ping_pong, BenchError, BenchmarkReport, Comparison, PingPongPlan};
use hwnode::config::{
    build_registry, parse_size_list, plan_threads, ProjectConfig, System, SystemError, SystemOptions,
};
use hwnode::hwthread::ThreadOutcome;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAULT: u8 = 2;
const EXIT_TIMEOUT: u8 = 3;

#[derive(Parser)]
#[command(name = "hwnode", version, about = "Run node graphs with simulated hardware threads")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a configuration without starting anything.
    Check { config: PathBuf },
    /// Start every configured thread.
    Run {
        config: PathBuf,
        /// Override a thread's mapping, e.g. `--map sobel=hw`.
        #[arg(long = "map", value_name = "THREAD=sw|hw")]
        map: Vec<String>,
        /// Stop after this many seconds instead of running until every
        /// thread has ended.
        #[arg(long, value_name = "SECONDS")]
        duration: Option<f64>,
    },
    /// Measure round trips through a copy node.
    Bench {
        config: PathBuf,
        /// Comma-separated sizes, e.g. `4B,8KiB,1MiB,6MiB`.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        iters: Option<u32>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Run twice with this thread mapped to software, then hardware, and
        /// report the speedup.
        #[arg(long, value_name = "THREAD")]
        compare: Option<String>,
        #[arg(long = "map", value_name = "THREAD=sw|hw")]
        map: Vec<String>,
        /// Back-to-back messages sent after the timed runs to check loss and
        /// ordering.
        #[arg(long, default_value_t = 0)]
        burst: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

/// An error together with the exit code it maps to.
struct Failure(u8, String);

impl From<SystemError> for Failure {
    fn from(e: SystemError) -> Self {
        let code = match e {
            SystemError::Transport(_) | SystemError::Arena(_) | SystemError::Fabric { .. } => EXIT_FAULT,
            _ => EXIT_CONFIG,
        };
        Failure(code, e.to_string())
    }
}

fn load(path: &Path) -> Result<ProjectConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    ProjectConfig::parse(&text).map_err(|e| Failure(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn apply_maps(cfg: &mut ProjectConfig, maps: &[String]) -> Result<(), Failure> {
    for m in maps {
        let bad = || Failure(EXIT_CONFIG, format!("--map expects THREAD=sw|hw, got {m:?}"));
        let (thread, target) = m.split_once('=').ok_or_else(bad)?;
        let hw = match target {
            "sw" => false,
            "hw" => true,
            _ => return Err(bad()),
        };
        cfg.set_mapping(thread, hw).map_err(|e| Failure(EXIT_CONFIG, e.to_string()))?;
    }
    Ok(())
}

fn check(path: &Path) -> Result<(), Failure> {
    let cfg = load(path)?;
    let reg = build_registry(&cfg)?;
    let specs = plan_threads(&cfg, &reg)?;
    println!(
        "{}: {} resource group(s), {} declaration(s), {} thread(s), {} slot(s)",
        path.display(),
        cfg.groups.len(),
        cfg.declaration_count(),
        specs.len(),
        cfg.general.slots
    );
    for (t, s) in cfg.threads.iter().zip(&specs) {
        println!("  {} -> node {:?}, {:?}, behavior {}", t.name, s.name, s.mapping, t.behavior);
    }
    Ok(())
}

fn faults(outcomes: &[(String, ThreadOutcome)]) -> Vec<String> {
    outcomes
        .iter()
        .filter_map(|(n, o)| match o {
            ThreadOutcome::Faulted(f) => Some(format!("{n}: {f}")),
            _ => None,
        })
        .collect()
}

fn run(path: &Path, maps: &[String], duration: Option<f64>) -> Result<(), Failure> {
    let mut cfg = load(path)?;
    apply_maps(&mut cfg, maps)?;
    let mut sys = System::start(&cfg, &SystemOptions::default())?;
    if let Some(t) = sys.transport() {
        println!("listening on {}", t.local_addr());
    }
    println!("started {} thread(s)", cfg.threads.len());
    let deadline = duration.map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0)));
    loop {
        let outcomes = sys.outcomes();
        let faulted = faults(&outcomes);
        if !faulted.is_empty() {
            sys.shutdown();
            return Err(Failure(EXIT_FAULT, faulted.join("; ")));
        }
        let all_done = outcomes.iter().all(|(_, o)| *o != ThreadOutcome::Running);
        if (all_done && sys.transport().is_none()) || deadline.is_some_and(|d| Instant::now() >= d) {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let faulted = faults(&sys.shutdown());
    if faulted.is_empty() {
        Ok(())
    } else {
        Err(Failure(EXIT_FAULT, faulted.join("; ")))
    }
}

struct BenchArgs<'a> {
    sizes: &'a Option<String>,
    iters: Option<u32>,
    burst: u32,
    seed: u64,
}

fn bench_once(
    cfg: &ProjectConfig,
    args: &BenchArgs,
    label: &str,
    copy_thread: Option<&str>,
) -> Result<BenchmarkReport, Failure> {
    let sizes = match args.sizes {
        Some(s) => parse_size_list(s).ok_or_else(|| Failure(EXIT_CONFIG, format!("bad --sizes {s:?}")))?,
        None => cfg.benchmark.sizes.clone(),
    };
    let plan = PingPongPlan {
        sizes,
        iterations: args.iters.unwrap_or(cfg.benchmark.iterations),
        burst: args.burst,
        seed: args.seed,
        label: label.into(),
    };
    let mut sys = System::start(cfg, &SystemOptions::default())?;
    let times = |name: &str| sys.node_times(name);
    let node_times = copy_thread.map(|n| move || times(n));
    let result = run_ping_pong(sys.graph(), &cfg.benchmark, &plan, node_times.as_ref().map(|f| f as &dyn Fn() -> _));
    let faulted = faults(&sys.shutdown());
    let report = result.map_err(|e| match e {
        BenchError::NoEcho { .. } => Failure(EXIT_TIMEOUT, e.to_string()),
        e => Failure(EXIT_FAULT, e.to_string()),
    })?;
    if !faulted.is_empty() {
        return Err(Failure(EXIT_FAULT, faulted.join("; ")));
    }
    Ok(report)
}

fn bench(path: &Path, maps: &[String], compare: Option<&str>, json: bool, args: BenchArgs) -> Result<(), Failure> {
    let mut cfg = load(path)?;
    apply_maps(&mut cfg, maps)?;
    let copy = cfg.threads.iter().find(|t| t.behavior == "copy").map(|t| t.name.clone());
    let (reports, text) = match compare {
        None => {
            let r = bench_once(&cfg, &args, "round trip", copy.as_deref())?;
            let text = if json { r.to_json() } else { r.to_string() };
            (vec![r], text)
        }
        Some(thread) => {
            cfg.set_mapping(thread, false).map_err(|e| Failure(EXIT_CONFIG, e.to_string()))?;
            let sw = bench_once(&cfg, &args, "software", Some(thread))?;
            cfg.set_mapping(thread, true).map_err(|e| Failure(EXIT_CONFIG, e.to_string()))?;
            let hw = bench_once(&cfg, &args, "hardware", Some(thread))?;
            let c = Comparison::new(sw, hw);
            let text = if json { c.to_json() } else { format!("{}\n{}\n{}", c.software, c.hardware, c) };
            (vec![c.software, c.hardware], text)
        }
    };
    println!("{text}");
    if reports.iter().any(|r| r.failed()) {
        return Err(Failure(EXIT_FAULT, "echo lost, reordered or corrupted".into()));
    }
    if reports.iter().any(|r| r.timed_out()) {
        return Err(Failure(EXIT_TIMEOUT, "benchmark iteration timed out".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.cmd {
        Cmd::Check { config } => check(config),
        Cmd::Run { config, map, duration } => run(config, map, *duration),
        Cmd::Bench { config, sizes, iters, json, compare, map, burst, seed } => bench(
            config,
            map,
            compare.as_deref(),
            *json,
            BenchArgs { sizes, iters: *iters, burst: *burst, seed: *seed },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
