//! Experiment plans and the runner that executes them.
//!
//! A plan names kernels at concrete sizes plus one or more toggle variants
//! ("baseline" and "opt" are built-in aliases; anything else carries its own
//! toggle set). [`run_experiment`] simulates every (kernel, variant) pair,
//! verifies each run against the functional reference before trusting its
//! numbers, and emits [`RunReport`]s. When a plan contains both a `baseline`
//! and an `opt` variant it also pairs them up per kernel: speedups, roofline
//! gap closure, and the geometric-mean speedup across kernels.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, MachineConfig, Toggles};
use crate::kernel::{build_kernel, KernelError, KernelName, KernelSpec};
use crate::metrics::{geomean, plot_csv, plot_row, speedup, MetricsError, PlotRow, RunReport};
use crate::sim::{run_kernel, SimError};

#[derive(Debug)]
pub enum HarnessError {
    /// A plan must name at least one kernel and one variant.
    EmptyPlan(&'static str),
    /// A variant without an explicit toggle set must be a known alias.
    UnknownVariant(String),
    /// The plan file did not parse.
    Parse(String),
    Config(ConfigError),
    Kernel(KernelError),
    /// A simulation failed; golden mismatches carry first-divergence detail.
    Run {
        kernel: String,
        variant: String,
        source: SimError,
    },
    Metrics(MetricsError),
    Io(std::io::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::EmptyPlan(what) => write!(f, "experiment plan has no {what}"),
            HarnessError::UnknownVariant(name) => write!(
                f,
                "variant {name:?} has no toggle set and is not a known alias \
                 (baseline, opt)"
            ),
            HarnessError::Parse(e) => write!(f, "plan file: {e}"),
            HarnessError::Config(e) => write!(f, "configuration: {e}"),
            HarnessError::Kernel(e) => write!(f, "kernel build: {e}"),
            HarnessError::Run {
                kernel,
                variant,
                source,
            } => write!(f, "{kernel} [{variant}]: {source}"),
            HarnessError::Metrics(e) => write!(f, "metrics: {e}"),
            HarnessError::Io(e) => write!(f, "writing outputs: {e}"),
        }
    }
}

impl std::error::Error for HarnessError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            HarnessError::Config(e) => Some(e),
            HarnessError::Kernel(e) => Some(e),
            HarnessError::Run { source, .. } => Some(source),
            HarnessError::Metrics(e) => Some(e),
            HarnessError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<ConfigError> for HarnessError {
    fn from(e: ConfigError) -> Self {
        HarnessError::Config(e)
    }
}

impl From<KernelError> for HarnessError {
    fn from(e: KernelError) -> Self {
        HarnessError::Kernel(e)
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        HarnessError::Metrics(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

/// A named toggle set. `toggles: None` means the name is an alias:
/// `baseline` (all off) or `opt` (all on).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toggles: Option<Toggles>,
}

impl VariantSpec {
    pub fn baseline() -> Self {
        VariantSpec {
            name: "baseline".into(),
            toggles: None,
        }
    }

    pub fn opt() -> Self {
        VariantSpec {
            name: "opt".into(),
            toggles: None,
        }
    }

    pub fn resolve(&self) -> Result<Toggles, HarnessError> {
        match (self.toggles, self.name.as_str()) {
            (Some(t), _) => Ok(t),
            (None, "baseline") => Ok(Toggles::all_off()),
            (None, "opt") => Ok(Toggles::all_on()),
            (None, other) => Err(HarnessError::UnknownVariant(other.to_string())),
        }
    }
}

/// Which kernels to run, under which machine and toggle variants, and where
/// to put the artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub machine: MachineConfig,
    pub kernels: Vec<KernelSpec>,
    pub variants: Vec<VariantSpec>,
    /// When set, reports and sweep tables are written here.
    pub output_dir: Option<PathBuf>,
    /// Also write each run's per-instruction issue cycles (needs `output_dir`).
    pub trace_issue: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            machine: MachineConfig::default(),
            kernels: Vec::new(),
            variants: vec![VariantSpec::baseline(), VariantSpec::opt()],
            output_dir: None,
            trace_issue: false,
        }
    }
}

impl ExperimentPlan {
    /// The headline comparison: all seven kernels at their representative
    /// sizes, baseline vs. opt.
    pub fn default_comparison() -> Self {
        let k = |name, size: &[u64]| KernelSpec {
            name,
            size: size.to_vec(),
        };
        ExperimentPlan {
            kernels: vec![
                k(KernelName::Scal, &[1024]),
                k(KernelName::Axpy, &[1024]),
                k(KernelName::Dotp, &[1024]),
                k(KernelName::Gemv, &[32, 128]),
                k(KernelName::Spmv, &[32, 32]),
                k(KernelName::Ger, &[128, 128]),
                k(KernelName::Gemm, &[128, 128, 128]),
            ],
            ..ExperimentPlan::default()
        }
    }

    /// Size-sensitivity sweep: scal across vector lengths, gemm across
    /// square dimensions.
    pub fn sensitivity() -> Self {
        let k = |name, size: &[u64]| KernelSpec {
            name,
            size: size.to_vec(),
        };
        ExperimentPlan {
            kernels: vec![
                k(KernelName::Scal, &[512]),
                k(KernelName::Scal, &[1024]),
                k(KernelName::Scal, &[2048]),
                k(KernelName::Gemm, &[32, 32, 32]),
                k(KernelName::Gemm, &[64, 64, 64]),
                k(KernelName::Gemm, &[128, 128, 128]),
            ],
            ..ExperimentPlan::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.machine.validate()?;
        if self.kernels.is_empty() {
            return Err(HarnessError::EmptyPlan("kernels"));
        }
        if self.variants.is_empty() {
            return Err(HarnessError::EmptyPlan("variants"));
        }
        for v in &self.variants {
            v.resolve()?;
        }
        Ok(())
    }
}

/// One kernel's baseline/opt comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub kernel: String,
    pub size: Vec<u64>,
    pub base_cycles: u64,
    pub opt_cycles: u64,
    pub speedup: f64,
    /// Fraction of roofline headroom recovered; absent if the baseline was
    /// already saturated.
    pub gap_closed: Option<f64>,
    pub base_norm: f64,
    pub opt_norm: f64,
    pub base_utilization: f64,
    pub opt_utilization: f64,
    pub base_mem_only: f64,
    pub opt_mem_only: f64,
}

/// Paired baseline/opt results across a plan's kernels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedSummary {
    pub rows: Vec<PairRow>,
    pub geomean_speedup: f64,
}

impl PairedSummary {
    pub fn plot_rows(&self) -> Vec<PlotRow> {
        self.rows
            .iter()
            .map(|r| PlotRow {
                kernel: r.kernel.clone(),
                baseline_norm: r.base_norm,
                opt_norm: r.opt_norm,
                gap_closed: r.gap_closed,
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(
            "kernel,size,base_cycles,opt_cycles,speedup,gap_closed,\
             base_norm,opt_norm,base_utilization,opt_utilization,\
             base_mem_only,opt_mem_only\n",
        );
        for r in &self.rows {
            let size = r
                .size
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let gap = match r.gap_closed {
                Some(v) => format!("{v:.6}"),
                None => "saturated".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.kernel,
                size,
                r.base_cycles,
                r.opt_cycles,
                r.speedup,
                gap,
                r.base_norm,
                r.opt_norm,
                r.base_utilization,
                r.opt_utilization,
                r.base_mem_only,
                r.opt_mem_only,
            ));
        }
        out
    }
}

/// Everything a plan produced: one report per (kernel, variant) in plan
/// order, plus the baseline/opt pairing when both variants were present.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub reports: Vec<RunReport>,
    pub paired: Option<PairedSummary>,
}

impl ExperimentOutcome {
    pub fn report(&self, kernel: &KernelSpec, variant: &str) -> Option<&RunReport> {
        let name = kernel.name.as_str();
        self.reports
            .iter()
            .find(|r| r.kernel == name && r.size == kernel.size && r.variant == variant)
    }
}

/// Run every (kernel, variant) pair in the plan.
///
/// Each run is golden-verified before its counters are reported; a mismatch
/// aborts the experiment with the first divergence spelled out. Runs are
/// sequential and deterministic: the same plan and seed reproduce identical
/// outcomes.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome, HarnessError> {
    plan.validate()?;
    let mut reports = Vec::with_capacity(plan.kernels.len() * plan.variants.len());
    let mut traces = Vec::new();
    for spec in &plan.kernels {
        for variant in &plan.variants {
            let mut cfg = plan.machine.clone();
            cfg.toggles = variant.resolve()?;
            let kernel = build_kernel(spec, &cfg)?;
            let result = run_kernel(&kernel, &cfg).map_err(|e| HarnessError::Run {
                kernel: spec.to_string(),
                variant: variant.name.clone(),
                source: e,
            })?;
            if plan.trace_issue {
                traces.push((spec.clone(), variant.name.clone(), result.issue_cycles));
            }
            reports.push(RunReport::new(&kernel, &cfg, &variant.name, result.counters));
        }
    }

    let paired = pair_baseline_opt(plan, &reports)?;
    let outcome = ExperimentOutcome { reports, paired };
    if let Some(dir) = &plan.output_dir {
        write_outputs(dir, plan, &outcome, &traces)?;
    }
    Ok(outcome)
}

fn pair_baseline_opt(
    plan: &ExperimentPlan,
    reports: &[RunReport],
) -> Result<Option<PairedSummary>, HarnessError> {
    let has = |name: &str| plan.variants.iter().any(|v| v.name == name);
    if !(has("baseline") && has("opt")) {
        return Ok(None);
    }
    let find = |spec: &KernelSpec, variant: &str| {
        reports
            .iter()
            .find(|r| r.kernel == spec.name.as_str() && r.size == spec.size && r.variant == variant)
            .expect("report exists for every plan entry")
    };
    let mut rows = Vec::with_capacity(plan.kernels.len());
    for spec in &plan.kernels {
        let base = find(spec, "baseline");
        let opt = find(spec, "opt");
        let plot = plot_row(base, opt)?;
        rows.push(PairRow {
            kernel: plot.kernel,
            size: spec.size.clone(),
            base_cycles: base.counters.cycles,
            opt_cycles: opt.counters.cycles,
            speedup: speedup(base, opt),
            gap_closed: plot.gap_closed,
            base_norm: plot.baseline_norm,
            opt_norm: plot.opt_norm,
            base_utilization: base.derived.lane_utilization,
            opt_utilization: opt.derived.lane_utilization,
            base_mem_only: base.derived.mem_only_ratio,
            opt_mem_only: opt.derived.mem_only_ratio,
        });
    }
    let speedups: Vec<f64> = rows.iter().map(|r| r.speedup).collect();
    Ok(Some(PairedSummary {
        geomean_speedup: geomean(&speedups)?,
        rows,
    }))
}

fn file_stem(spec: &KernelSpec, variant: &str) -> String {
    let size = spec
        .size
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    format!("{}_{}_{}", spec.name.as_str(), size, variant)
}

fn write_outputs(
    dir: &Path,
    plan: &ExperimentPlan,
    outcome: &ExperimentOutcome,
    traces: &[(KernelSpec, String, Vec<u64>)],
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    for report in &outcome.reports {
        let spec = KernelSpec {
            name: plan
                .kernels
                .iter()
                .find(|s| s.name.as_str() == report.kernel && s.size == report.size)
                .expect("report came from a plan entry")
                .name,
            size: report.size.clone(),
        };
        let path = dir.join(format!("{}.json", file_stem(&spec, &report.variant)));
        fs::write(path, report.to_json())?;
    }

    let mut sweep = String::from(RunReport::csv_header());
    sweep.push('\n');
    for report in &outcome.reports {
        sweep.push_str(&report.csv_row());
        sweep.push('\n');
    }
    fs::write(dir.join("sweep.csv"), sweep)?;

    if let Some(paired) = &outcome.paired {
        fs::write(dir.join("pairs.csv"), paired.csv())?;
        fs::write(dir.join("plot.csv"), plot_csv(&paired.plot_rows()))?;
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(paired).expect("summary serializes"),
        )?;
    }

    for (spec, variant, cycles) in traces {
        let mut csv = String::from("instr,issue_cycle\n");
        for (i, c) in cycles.iter().enumerate() {
            csv.push_str(&format!("{i},{c}\n"));
        }
        fs::write(
            dir.join(format!("{}_issue.csv", file_stem(spec, variant))),
            csv,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_plan() -> ExperimentPlan {
        let k = |name, size: &[u64]| KernelSpec {
            name,
            size: size.to_vec(),
        };
        ExperimentPlan {
            kernels: vec![k(KernelName::Scal, &[64]), k(KernelName::Axpy, &[64])],
            ..ExperimentPlan::default()
        }
    }

    #[test]
    fn empty_kernel_list_is_rejected() {
        let plan = ExperimentPlan::default();
        assert!(matches!(
            run_experiment(&plan),
            Err(HarnessError::EmptyPlan("kernels"))
        ));
        let mut no_variants = small_plan();
        no_variants.variants.clear();
        assert!(matches!(
            run_experiment(&no_variants),
            Err(HarnessError::EmptyPlan("variants"))
        ));
    }

    #[test]
    fn unnamed_custom_variant_is_rejected() {
        let mut plan = small_plan();
        plan.variants.push(VariantSpec {
            name: "mystery".into(),
            toggles: None,
        });
        assert!(matches!(
            run_experiment(&plan),
            Err(HarnessError::UnknownVariant(_))
        ));
    }

    #[test]
    fn paired_plan_reports_speedups_and_geomean() {
        let plan = small_plan();
        let outcome = run_experiment(&plan).unwrap();
        assert_eq!(outcome.reports.len(), 4);
        assert!(outcome.reports.iter().all(|r| r.self_consistent()));

        let paired = outcome.paired.unwrap();
        assert_eq!(paired.rows.len(), 2);
        for row in &paired.rows {
            assert!(row.speedup > 0.0);
            assert_eq!(
                row.speedup,
                row.base_cycles as f64 / row.opt_cycles as f64
            );
        }
        assert!(paired.geomean_speedup > 0.0);
        let expected = geomean(&[paired.rows[0].speedup, paired.rows[1].speedup]).unwrap();
        assert!((paired.geomean_speedup - expected).abs() < 1e-12);
    }

    #[test]
    fn custom_variants_skip_pairing() {
        let mut plan = small_plan();
        plan.variants = vec![VariantSpec {
            name: "forward-only".into(),
            toggles: Some(Toggles {
                multi_source_forwarding: true,
                ..Toggles::all_off()
            }),
        }];
        let outcome = run_experiment(&plan).unwrap();
        assert_eq!(outcome.reports.len(), 2);
        assert!(outcome.paired.is_none());
        assert_eq!(outcome.reports[0].variant, "forward-only");
        assert_eq!(outcome.reports[0].toggle_bits.count_ones(), 1);
    }

    #[test]
    fn plan_round_trips_through_json() {
        let text = r#"{
            "kernels": [{"name": "scal", "size": [128]}],
            "variants": [
                {"name": "baseline"},
                {"name": "opt"},
                {"name": "split-only", "toggles": {"rw_channel_split": true}}
            ]
        }"#;
        let plan = ExperimentPlan::from_json(text).unwrap();
        assert_eq!(plan.kernels.len(), 1);
        assert_eq!(plan.variants.len(), 3);
        assert_eq!(plan.variants[1].resolve().unwrap(), Toggles::all_on());
        let custom = plan.variants[2].resolve().unwrap();
        assert!(custom.rw_channel_split && !custom.decoupled_frontend);

        let reparsed = ExperimentPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(plan, reparsed);

        assert!(matches!(
            ExperimentPlan::from_json("{\"bogus\": 1}"),
            Err(HarnessError::Parse(_))
        ));
    }

    #[test]
    fn outputs_land_in_the_requested_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut plan = small_plan();
        plan.kernels.truncate(1);
        plan.output_dir = Some(dir.path().to_path_buf());
        plan.trace_issue = true;
        run_experiment(&plan).unwrap();

        for name in [
            "scal_64_baseline.json",
            "scal_64_opt.json",
            "sweep.csv",
            "pairs.csv",
            "plot.csv",
            "summary.json",
            "scal_64_baseline_issue.csv",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 3);
        let report: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(dir.path().join("scal_64_opt.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["variant"], "opt");
    }

    #[test]
    fn rerunning_a_plan_reproduces_identical_reports() {
        let plan = small_plan();
        let a = run_experiment(&plan).unwrap();
        let b = run_experiment(&plan).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn builtin_plans_have_expected_shape() {
        let cmp = ExperimentPlan::default_comparison();
        assert_eq!(cmp.kernels.len(), 7);
        cmp.validate().unwrap();

        let sens = ExperimentPlan::sensitivity();
        assert_eq!(sens.kernels.len(), 6);
        assert!(sens
            .kernels
            .iter()
            .take(3)
            .all(|k| k.name == KernelName::Scal));
        sens.validate().unwrap();
    }
}
