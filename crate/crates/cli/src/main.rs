//! Command-line front end for the lane simulator.
//!
//! Four verbs: `run` executes an experiment plan (a JSON file or a built-in
//! name) and writes reports; `roofline` places a kernel on the machine's
//! roofline without simulating; `chain` evaluates the analytical chaining
//! model on a chain description file; `litmus` exercises the mechanism
//! litmus scenarios.
//!
//! Exit codes: 0 success, 1 configuration error, 2 result mismatch against
//! the functional reference (or a failed litmus check), 3 watchdog expiry.

use clap::{Args, Parser, Subcommand};
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use lanesim_core::{
    build_kernel, roofline, run_experiment, run_litmus, ChainSpec, ExperimentPlan, HarnessError,
    KernelName, KernelSpec, LitmusError, SimError, ALL_KERNELS, LITMUS_NAMES,
};

#[derive(Parser)]
#[command(name = "lanesim", version, about = "Lane-simulator experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan and report speedups and counters.
    Run(RunArgs),
    /// Place a kernel on the roofline analytically (no simulation).
    Roofline(RooflineArgs),
    /// Evaluate the analytical chain-timing model on a chain file.
    Chain(ChainArgs),
    /// Run one mechanism litmus scenario, or "all".
    Litmus(LitmusArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Plan file (JSON), or a built-in plan: "default" or "sensitivity".
    plan: String,
    /// Write reports, sweep tables, and plot data into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed (shorthand for --set machine.seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Also write per-run instruction issue traces (needs --out or a plan
    /// output_dir).
    #[arg(long)]
    trace: bool,
    /// Override any plan field by dotted path, repeatable; e.g.
    /// --set machine.vrf_banks=8 --set machine.toggles.next_vl_prefetch=true
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RooflineArgs {
    /// Kernel name: scal, axpy, dotp, gemv, ger, gemm, spmv.
    kernel: String,
    /// Problem size, dimensions joined by 'x': 1024, 32x128, 128x128x128.
    size: String,
    /// Override machine fields by dotted path, e.g. --set dlen=512.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ChainArgs {
    /// Chain description file (JSON).
    spec: PathBuf,
}

#[derive(Args)]
struct LitmusArgs {
    /// Scenario name, or "all".
    name: String,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Mismatch(String),
    Watchdog(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Mismatch(_) => 2,
            CliError::Watchdog(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Mismatch(m) | CliError::Watchdog(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match &e {
            HarnessError::Run { source, .. } => match source {
                SimError::Watchdog { .. } => CliError::Watchdog(e.to_string()),
                // A verification mismatch or a memory fault both mean the
                // simulated result cannot be trusted.
                SimError::Mismatch(_) | SimError::Fault(_) => CliError::Mismatch(e.to_string()),
            },
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match cli.cmd {
        Command::Run(args) => cmd_run(args),
        Command::Roofline(args) => cmd_roofline(args),
        Command::Chain(args) => cmd_chain(args),
        Command::Litmus(args) => cmd_litmus(args),
    };
    match status {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Apply `path=value` to a JSON tree, creating intermediate objects. The
/// value parses as JSON when it can (numbers, bools, arrays) and falls back
/// to a plain string, so `--set machine.seed=7` and `--set variants[0]...`
/// style indexing are both unnecessary complications — paths address object
/// fields only, which is all the plan schema needs.
fn apply_set(root: &mut serde_json::Value, entry: &str) -> Result<(), CliError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {entry:?}: expected PATH=VALUE")))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(CliError::Config(format!("--set {entry:?}: empty path segment")));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {entry:?}: {key} is not an object field")))?;
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split('.') yields at least one segment")
}

fn load_plan(args: &RunArgs) -> Result<ExperimentPlan, CliError> {
    let text = match args.plan.as_str() {
        "default" => ExperimentPlan::default_comparison().to_json(),
        "sensitivity" => ExperimentPlan::sensitivity().to_json(),
        path => fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading plan {path}: {e}")))?,
    };
    let mut tree: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("plan is not valid JSON: {e}")))?;
    for entry in &args.set {
        apply_set(&mut tree, entry)?;
    }
    let mut plan: ExperimentPlan = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("plan does not match the schema: {e}")))?;
    if let Some(seed) = args.seed {
        plan.machine.seed = seed;
    }
    if let Some(out) = &args.out {
        plan.output_dir = Some(out.clone());
    }
    if args.trace {
        plan.trace_issue = true;
    }
    plan.validate().map_err(CliError::from)?;
    Ok(plan)
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let plan = load_plan(&args)?;
    let outcome = run_experiment(&plan)?;

    if let Some(paired) = &outcome.paired {
        println!(
            "{:<6} {:>12} {:>12} {:>12} {:>9} {:>11}",
            "kernel", "size", "base_cycles", "opt_cycles", "speedup", "gap_closed"
        );
        for row in &paired.rows {
            let size = row
                .size
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let gap = match row.gap_closed {
                Some(g) => format!("{:.1}%", 100.0 * g),
                None => "saturated".to_string(),
            };
            println!(
                "{:<6} {:>12} {:>12} {:>12} {:>8.3}x {:>11}",
                row.kernel, size, row.base_cycles, row.opt_cycles, row.speedup, gap
            );
        }
        println!("geomean speedup: {:.3}x", paired.geomean_speedup);
    } else {
        println!(
            "{:<6} {:>12} {:<14} {:>12} {:>9} {:>7}",
            "kernel", "size", "variant", "cycles", "gflops", "norm"
        );
        for r in &outcome.reports {
            let size = r
                .size
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            println!(
                "{:<6} {:>12} {:<14} {:>12} {:>9.3} {:>7.3}",
                r.kernel, size, r.variant, r.counters.cycles, r.derived.gflops, r.derived.normalized
            );
        }
    }
    if let Some(dir) = &plan.output_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn parse_kernel(name: &str) -> Result<KernelName, CliError> {
    ALL_KERNELS
        .into_iter()
        .find(|k| k.as_str() == name)
        .ok_or_else(|| {
            let names: Vec<&str> = ALL_KERNELS.iter().map(|k| k.as_str()).collect();
            CliError::Config(format!("unknown kernel {name:?}; expected one of {names:?}"))
        })
}

fn parse_size(text: &str) -> Result<Vec<u64>, CliError> {
    text.split(['x', ','])
        .map(|d| {
            d.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(format!("bad size {text:?}: {d:?} is not a number")))
        })
        .collect()
}

fn cmd_roofline(args: RooflineArgs) -> Result<(), CliError> {
    let mut tree = serde_json::to_value(lanesim_core::MachineConfig::default())
        .expect("config serializes");
    for entry in &args.set {
        apply_set(&mut tree, entry)?;
    }
    let cfg: lanesim_core::MachineConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::Config(format!("machine config: {e}")))?;
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let spec = KernelSpec {
        name: parse_kernel(&args.kernel)?,
        size: parse_size(&args.size)?,
    };
    let kernel = build_kernel(&spec, &cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let point = roofline(&kernel, &cfg);
    println!(
        "{}",
        serde_json::to_string_pretty(&point).expect("point serializes")
    );
    Ok(())
}

fn cmd_chain(args: ChainArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.spec)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", args.spec.display())))?;
    let spec: ChainSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("chain spec: {e}")))?;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let timing = spec.timing();
    println!(
        "{}",
        serde_json::to_string_pretty(&timing).expect("timing serializes")
    );
    Ok(())
}

fn cmd_litmus(args: LitmusArgs) -> Result<(), CliError> {
    let names: Vec<&str> = if args.name == "all" {
        LITMUS_NAMES.to_vec()
    } else {
        vec![args.name.as_str()]
    };
    let mut all_pass = true;
    for name in names {
        let outcome = run_litmus(name).map_err(|e| match e {
            LitmusError::Unknown(_) => CliError::Config(e.to_string()),
            LitmusError::Build(_) => CliError::Config(e.to_string()),
            LitmusError::Sim(SimError::Watchdog { .. }) => CliError::Watchdog(e.to_string()),
            LitmusError::Sim(_) => CliError::Mismatch(e.to_string()),
        })?;
        print!("{}", outcome.text());
        all_pass &= outcome.passed();
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Mismatch("a litmus check failed".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_fields_and_rejects_nonsense() {
        let mut v = serde_json::json!({"machine": {"seed": 1}});
        apply_set(&mut v, "machine.seed=9").unwrap();
        apply_set(&mut v, "machine.toggles.next_vl_prefetch=true").unwrap();
        apply_set(&mut v, "label=fast").unwrap();
        assert_eq!(v["machine"]["seed"], 9);
        assert_eq!(v["machine"]["toggles"]["next_vl_prefetch"], true);
        assert_eq!(v["label"], "fast");

        assert!(apply_set(&mut v, "no-equals-sign").is_err());
        assert!(apply_set(&mut v, "machine.seed.deeper=1").is_err());
        assert!(apply_set(&mut v, "machine..seed=1").is_err());
    }

    #[test]
    fn sizes_parse_with_x_or_comma() {
        assert_eq!(parse_size("1024").unwrap(), vec![1024]);
        assert_eq!(parse_size("32x128").unwrap(), vec![32, 128]);
        assert_eq!(parse_size("128,128,128").unwrap(), vec![128, 128, 128]);
        assert!(parse_size("32xbig").is_err());
    }

    #[test]
    fn error_codes_follow_failure_class() {
        assert_eq!(CliError::Config("x".into()).code(), 1);
        assert_eq!(CliError::Mismatch("x".into()).code(), 2);
        assert_eq!(CliError::Watchdog("x".into()).code(), 3);

        let mismatch = HarnessError::Run {
            kernel: "scal[64]".into(),
            variant: "opt".into(),
            source: SimError::Mismatch("reg v1[0]".into()),
        };
        assert_eq!(CliError::from(mismatch).code(), 2);
        let watchdog = HarnessError::Run {
            kernel: "scal[64]".into(),
            variant: "opt".into(),
            source: SimError::Watchdog { cycle: 1 },
        };
        assert_eq!(CliError::from(watchdog).code(), 3);
        assert_eq!(CliError::from(HarnessError::EmptyPlan("kernels")).code(), 1);
    }
}
