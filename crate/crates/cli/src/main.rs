//! `coldsim` command-line front end.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or arguments,
//! 2 when a simulation fails at run time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coldsim::catalog::partition_model;
use coldsim::metrics::{self, Summary};
use coldsim::planner::{plan_loading, GpuId, GpuState, LoadStrategy};
use coldsim::recovery::reassign_layers;
use coldsim::{Scenario, SimError};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "coldsim", version, about = "Cold-start and recovery simulator for multi-GPU LLM serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its metric files.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run every (strategy, seed) pair and write a comparison table.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Comma-separated loading strategies.
        #[arg(long, value_delimiter = ',', default_value = "pipeline,full_copy_gpu")]
        strategies: Vec<String>,
        /// Seeds as a comma-separated list and/or inclusive ranges, e.g. `1-5,9`.
        #[arg(long, default_value = "1")]
        seeds: String,
    },
    /// Print the loading plan and, for crashed GPUs, the reassignment plan.
    Plan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Crashed GPUs; defaults to the GPUs named in `faults.crash`.
        #[arg(long, value_delimiter = ',')]
        faults: Option<Vec<GpuId>>,
        /// Segments each survivor holds when the crash hits, taken from the
        /// front of its loading order.
        #[arg(long, default_value_t = 1)]
        loaded: usize,
    },
    /// Check a configuration and list every problem found.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the default configuration with every key.
    Defaults,
}

#[derive(Args)]
struct ConfigArgs {
    /// Scenario file (TOML). Built-in defaults are used when omitted.
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set loading.strategy=full_copy_gpu`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; falls back to `output.dir` from the config.
    #[arg(long, env = "COLDSIM_OUT")]
    out: Option<PathBuf>,
}

enum Failure {
    Invalid(Vec<SimError>),
    Runtime(anyhow::Error),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        if is_config_error(&e) {
            Failure::Invalid(vec![e])
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn is_config_error(e: &SimError) -> bool {
    matches!(
        e,
        SimError::Config { .. } | SimError::Parse { .. } | SimError::UnknownAdapter(_) | SimError::Partition { .. }
    )
}

fn load(args: &ConfigArgs) -> Result<Scenario, Failure> {
    let scenario = match &args.config {
        Some(path) => Scenario::from_path(path, &args.overrides).map_err(|e| match e {
            SimError::Io(_) => Failure::Invalid(vec![e]),
            e => Failure::from(e),
        })?,
        None => Scenario::from_toml_str("", &args.overrides)?,
    };
    scenario.validate().map_err(Failure::Invalid)?;
    Ok(scenario)
}

fn out_dir(args: &OutArgs, scenario: &Scenario) -> PathBuf {
    args.out.clone().unwrap_or_else(|| scenario.output.dir.clone())
}

fn run_one(scenario: &Scenario, dir: &Path) -> Result<Summary, SimError> {
    let result = coldsim::run(scenario)?;
    metrics::write_outputs(dir, &result, scenario)
}

fn cmd_run(config: &ConfigArgs, out: &OutArgs) -> Result<(), Failure> {
    let scenario = load(config)?;
    let dir = out_dir(out, &scenario);
    let summary = run_one(&scenario, &dir)?;
    let mut line = format!(
        "{} requests, {} completed, mean TTFT {:.4} s",
        summary.requests, summary.completed, summary.ttft.mean
    );
    if let Some(r) = summary.recovery_time {
        write!(line, ", recovery {r:.4} s").unwrap();
    }
    write!(line, ", outputs in {}", dir.display()).unwrap();
    println!("{line}");
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, SimError> {
    let bad = |part: &str| SimError::config("--seeds", format!("`{part}` is not a seed or range"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
                let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
                if b < a {
                    return Err(bad(part));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if seeds.is_empty() {
        return Err(SimError::config("--seeds", "no seeds given"));
    }
    Ok(seeds)
}

struct Cell {
    strategy: LoadStrategy,
    seed: u64,
    outcome: Result<Summary, SimError>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn cmd_compare(config: &ConfigArgs, out: &OutArgs, strategies: &[String], seeds: &str) -> Result<bool, Failure> {
    let base = load(config)?;
    let seeds = parse_seeds(seeds)?;
    let strategies = strategies
        .iter()
        .map(|s| {
            LoadStrategy::parse(s.trim())
                .ok_or_else(|| SimError::config("--strategies", format!("unknown strategy `{s}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let root = out_dir(out, &base);
    let cells: Vec<(LoadStrategy, u64)> = strategies
        .iter()
        .flat_map(|&st| seeds.iter().map(move |&seed| (st, seed)))
        .collect();
    let results: Vec<Cell> = cells
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut sc = base.clone();
            sc.loading.strategy = strategy;
            sc.seed = seed;
            let dir = root.join(format!("{strategy}-seed{seed}"));
            Cell { strategy, seed, outcome: run_one(&sc, &dir) }
        })
        .collect();

    std::fs::create_dir_all(&root).map_err(|e| Failure::Runtime(e.into()))?;
    let path = root.join("compare.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Failure::Runtime(e.into()))?;
    let header = ["strategy", "seed", "status", "mean_ttft", "mean_latency", "recovery_time", "error"];
    w.write_record(header).map_err(|e| Failure::Runtime(e.into()))?;
    println!("{:<14} {:>6} {:>8} {:>12} {:>12} {:>12}", "strategy", "seed", "status", "mean_ttft", "mean_latency", "recovery");
    let mut all_ok = true;
    for c in &results {
        let row = match &c.outcome {
            Ok(s) => [
                c.strategy.to_string(),
                c.seed.to_string(),
                "ok".into(),
                format!("{:.6}", s.ttft.mean),
                format!("{:.6}", s.latency.mean),
                fmt_opt(s.recovery_time),
                String::new(),
            ],
            Err(e) => {
                all_ok = false;
                [c.strategy.to_string(), c.seed.to_string(), "failed".into(), String::new(), String::new(), String::new(), e.to_string()]
            }
        };
        println!("{:<14} {:>6} {:>8} {:>12} {:>12} {:>12}", row[0], row[1], row[2], row[3], row[4], row[5]);
        w.write_record(&row).map_err(|e| Failure::Runtime(e.into()))?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.into()))?;
    println!("table written to {}", path.display());
    Ok(all_ok)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Structured text dump of the loading plan and an optional reassignment.
fn render_plan(scenario: &Scenario, faults: &[GpuId], loaded: usize) -> Result<String, SimError> {
    let model = scenario.model_spec()?;
    let gpus = scenario.cluster.gpu_count;
    let segments = partition_model(&model, gpus)?;
    let plan = plan_loading(scenario.loading.strategy, &segments, &scenario.adapter_ids(), &scenario.owners(), gpus)?;
    let mut s = String::new();
    writeln!(s, "strategy {}", plan.strategy).unwrap();
    writeln!(s, "gpus {gpus}").unwrap();
    writeln!(s, "layers {}", model.layer_count).unwrap();
    for seg in &segments {
        writeln!(
            s,
            "segment {} layers {}..{} bytes {}",
            seg.segment_id, seg.layer_range.start, seg.layer_range.end, seg.bytes
        )
        .unwrap();
    }
    for (g, order) in plan.orders.iter().enumerate() {
        writeln!(s, "gpu {g} order {}", join(order)).unwrap();
        let parts = &plan.adapter_orders[g];
        if !parts.is_empty() {
            writeln!(s, "gpu {g} adapters {}", join(parts.iter().map(|(a, p)| format!("{a}:{p}")))).unwrap();
        }
    }
    if faults.is_empty() {
        return Ok(s);
    }
    let mut states: Vec<GpuState> = Vec::new();
    for g in 0..gpus {
        let mut st = GpuState::new(g);
        if faults.contains(&g) {
            st.alive = false;
        } else {
            st.loaded_segments = plan.orders[g as usize].iter().take(loaded).copied().collect();
        }
        states.push(st);
    }
    writeln!(s, "faults {}", join(faults)).unwrap();
    let re = reassign_layers(&states, segments.len() as u32)?;
    for (g, order) in &re.new_orders {
        let held = join(&states[*g as usize].loaded_segments);
        let block = re
            .target_blocks
            .get(g)
            .map_or_else(|| "-".to_string(), |b| format!("{}..{}", b.start, b.end));
        writeln!(s, "survivor {g} holds [{held}] block {block} order {}", join(order)).unwrap();
    }
    Ok(s)
}

fn cmd_plan(config: &ConfigArgs, faults: &Option<Vec<GpuId>>, loaded: usize) -> Result<(), Failure> {
    let scenario = load(config)?;
    let mut faults = faults
        .clone()
        .unwrap_or_else(|| scenario.faults.crash.iter().map(|c| c.gpu).collect());
    faults.sort_unstable();
    faults.dedup();
    if let Some(&g) = faults.iter().find(|&&g| g >= scenario.cluster.gpu_count) {
        return Err(SimError::config("--faults", format!("GPU {g} does not exist")).into());
    }
    print!("{}", render_plan(&scenario, &faults, loaded)?);
    Ok(())
}

fn report(failure: Failure) -> ExitCode {
    match failure {
        Failure::Invalid(errs) => {
            for e in errs {
                eprintln!("error: {e}");
            }
            ExitCode::from(1)
        }
        Failure::Runtime(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Run { config, out } => cmd_run(config, out),
        Command::Compare { config, out, strategies, seeds } => match cmd_compare(config, out, strategies, seeds) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Plan { config, faults, loaded } => cmd_plan(config, faults, *loaded),
        Command::Validate { config } => load(config).map(|_| println!("ok")),
        Command::Defaults => {
            print!("{}", Scenario::default().to_toml());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}
