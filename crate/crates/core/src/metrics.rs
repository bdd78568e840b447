//! Roofline analysis and per-run reporting.
//!
//! A [`RooflinePoint`] places one kernel run against the machine's two
//! ceilings: peak arithmetic rate and peak memory bandwidth scaled by the
//! kernel's operational intensity. The attainable rate is the lower of the
//! two; `normalized` says what fraction of it a run actually reached, and
//! [`gap_closed`] says how much of the remaining headroom an optimized run
//! recovered over a baseline.
//!
//! [`RunReport`] bundles one run's raw counters with the derived ratios and
//! the exact configuration that produced them, and serializes to JSON (full
//! detail) or a flat CSV row (for spreadsheets). Derived fields are pure
//! functions of the raw fields, which [`RunReport::self_consistent`] checks.

use serde::Serialize;
use std::fmt;

use crate::config::MachineConfig;
use crate::kernel::Kernel;
use crate::sim::RunCounters;

/// Headroom below which a baseline counts as already at the roofline.
const SATURATION_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// Geometric mean over an empty slice.
    Empty,
    /// Geometric mean input that is zero or negative.
    NonPositive(f64),
    /// Paired points that do not describe the same kernel and size.
    MismatchedPair(String, String),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Empty => write!(f, "geometric mean of an empty set"),
            MetricsError::NonPositive(v) => {
                write!(f, "geometric mean requires positive values, got {v}")
            }
            MetricsError::MismatchedPair(a, b) => {
                write!(f, "paired runs disagree: {a} vs {b}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// One kernel placed against the machine's compute and bandwidth ceilings.
///
/// Rates are in flops per cycle, which at the model's 1 GHz clock reads
/// directly as GFLOP/s.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RooflinePoint {
    pub kernel: String,
    pub flops: u64,
    pub bytes: u64,
    /// Flops per byte of unique memory traffic.
    pub oi: f64,
    /// Arithmetic ceiling of the machine.
    pub peak_flops: f64,
    /// Bandwidth ceiling in bytes per cycle.
    pub peak_bytes: f64,
    /// Attainable rate: `min(peak_flops, peak_bytes * oi)`.
    pub p_ideal: f64,
    /// Measured rate, absent for a purely analytical point.
    pub p_achieved: Option<f64>,
    /// `p_achieved / p_ideal`, absent for a purely analytical point.
    pub normalized: Option<f64>,
}

impl RooflinePoint {
    /// True when the arithmetic ceiling binds before bandwidth does.
    pub fn compute_bound(&self) -> bool {
        self.peak_bytes * self.oi >= self.peak_flops
    }
}

/// Attainable rate for a given operational intensity on this machine.
pub fn ideal_rate(cfg: &MachineConfig, oi: f64) -> f64 {
    (cfg.peak_bytes_per_cycle() * oi).min(cfg.peak_flops_per_cycle())
}

/// Analytical roofline placement of a kernel: no run required.
pub fn roofline(kernel: &Kernel, cfg: &MachineConfig) -> RooflinePoint {
    let oi = kernel.operational_intensity();
    RooflinePoint {
        kernel: kernel.spec.to_string(),
        flops: kernel.flop_count,
        bytes: kernel.byte_count,
        oi,
        peak_flops: cfg.peak_flops_per_cycle(),
        peak_bytes: cfg.peak_bytes_per_cycle(),
        p_ideal: ideal_rate(cfg, oi),
        p_achieved: None,
        normalized: None,
    }
}

/// Roofline placement of a finished run.
pub fn roofline_measured(
    kernel: &Kernel,
    cfg: &MachineConfig,
    counters: &RunCounters,
) -> RooflinePoint {
    let mut p = roofline(kernel, cfg);
    let achieved = kernel.flop_count as f64 / counters.cycles.max(1) as f64;
    p.p_achieved = Some(achieved);
    p.normalized = Some(achieved / p.p_ideal);
    p
}

/// Fraction of roofline headroom recovered by an optimized run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GapClosed {
    Fraction(f64),
    /// The baseline was already at the roofline; there was no gap to close.
    Saturated,
}

impl GapClosed {
    pub fn fraction(self) -> Option<f64> {
        match self {
            GapClosed::Fraction(v) => Some(v),
            GapClosed::Saturated => None,
        }
    }
}

impl fmt::Display for GapClosed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GapClosed::Fraction(v) => write!(f, "{:.1}%", 100.0 * v),
            GapClosed::Saturated => write!(f, "saturated"),
        }
    }
}

/// `(opt - base) / (p_ideal - base)` with the saturated baseline called out
/// rather than divided by.
pub fn gap_closed(p_ideal: f64, base: f64, opt: f64) -> GapClosed {
    let headroom = p_ideal - base;
    if headroom <= SATURATION_EPS * p_ideal.max(1.0) {
        GapClosed::Saturated
    } else {
        GapClosed::Fraction((opt - base) / headroom)
    }
}

/// Gap closed between two measured points of the same kernel.
pub fn gap_closed_between(
    base: &RooflinePoint,
    opt: &RooflinePoint,
) -> Result<GapClosed, MetricsError> {
    if base.kernel != opt.kernel || base.p_ideal != opt.p_ideal {
        return Err(MetricsError::MismatchedPair(
            base.kernel.clone(),
            opt.kernel.clone(),
        ));
    }
    let (b, o) = match (base.p_achieved, opt.p_achieved) {
        (Some(b), Some(o)) => (b, o),
        _ => {
            return Err(MetricsError::MismatchedPair(
                base.kernel.clone(),
                "analytical point".into(),
            ))
        }
    };
    Ok(gap_closed(base.p_ideal, b, o))
}

/// Geometric mean of strictly positive values.
pub fn geomean(values: &[f64]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut log_sum = 0.0;
    for &v in values {
        if v <= 0.0 {
            return Err(MetricsError::NonPositive(v));
        }
        log_sum += v.ln();
    }
    Ok((log_sum / values.len() as f64).exp())
}

/// Ratios computed from one run's raw counters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedMetrics {
    /// Flops per cycle (GFLOP/s at 1 GHz).
    pub gflops: f64,
    pub oi: f64,
    pub p_ideal: f64,
    /// `gflops / p_ideal`.
    pub normalized: f64,
    pub lane_utilization: f64,
    pub mem_only_ratio: f64,
    pub vrf_conflict_ratio: f64,
    pub operand_latency_mean: f64,
}

fn derive(cfg: &MachineConfig, flops: u64, bytes: u64, c: &RunCounters) -> DerivedMetrics {
    let oi = flops as f64 / bytes as f64;
    let p_ideal = ideal_rate(cfg, oi);
    let gflops = flops as f64 / c.cycles.max(1) as f64;
    DerivedMetrics {
        gflops,
        oi,
        p_ideal,
        normalized: gflops / p_ideal,
        lane_utilization: c.utilization(cfg.lanes()),
        mem_only_ratio: c.mem_only_frac(),
        vrf_conflict_ratio: c.vrf_conflict_ratio(),
        operand_latency_mean: c.operand_latency_mean(),
    }
}

/// Everything one run produced: identity, configuration, raw counters, and
/// the ratios derived from them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub kernel: String,
    pub size: Vec<u64>,
    /// Named toggle set this run used, e.g. "baseline" or "opt".
    pub variant: String,
    pub toggle_bits: u8,
    pub seed: u64,
    pub flops: u64,
    pub bytes: u64,
    pub config: MachineConfig,
    pub counters: RunCounters,
    pub derived: DerivedMetrics,
}

impl RunReport {
    pub fn new(kernel: &Kernel, cfg: &MachineConfig, variant: &str, counters: RunCounters) -> Self {
        let derived = derive(cfg, kernel.flop_count, kernel.byte_count, &counters);
        RunReport {
            kernel: kernel.spec.name.as_str().to_string(),
            size: kernel.spec.size.clone(),
            variant: variant.to_string(),
            toggle_bits: cfg.toggles.to_bits(),
            seed: cfg.seed,
            flops: kernel.flop_count,
            bytes: kernel.byte_count,
            config: cfg.clone(),
            counters,
            derived,
        }
    }

    /// Re-derive every ratio from the raw fields and compare bit-for-bit.
    pub fn self_consistent(&self) -> bool {
        self.derived == derive(&self.config, self.flops, self.bytes, &self.counters)
    }

    pub fn roofline_point(&self) -> RooflinePoint {
        RooflinePoint {
            kernel: format!("{}{:?}", self.kernel, self.size),
            flops: self.flops,
            bytes: self.bytes,
            oi: self.derived.oi,
            peak_flops: self.config.peak_flops_per_cycle(),
            peak_bytes: self.config.peak_bytes_per_cycle(),
            p_ideal: self.derived.p_ideal,
            p_achieved: Some(self.derived.gflops),
            normalized: Some(self.derived.normalized),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> &'static str {
        "kernel,size,variant,toggles,seed,cycles,instrs_issued,flops,bytes,oi,\
         gflops,p_ideal,normalized,lane_utilization,mem_only_ratio,\
         vrf_conflict_ratio,operand_latency_mean,vrf_read_grants,\
         vrf_read_conflicts,vrf_write_conflicts,vrf_conflict_cycles,forward_hits,\
         local_issue_bubbles,local_issue_saves,demand_read_beats,\
         prefetch_read_beats,write_beats,prefetch_hit_words"
    }

    pub fn csv_row(&self) -> String {
        let size = self
            .size
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let c = &self.counters;
        let d = &self.derived;
        format!(
            "{},{},{},{:#04x},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{},{}",
            self.kernel,
            size,
            self.variant,
            self.toggle_bits,
            self.seed,
            c.cycles,
            c.instrs_issued,
            self.flops,
            self.bytes,
            d.oi,
            d.gflops,
            d.p_ideal,
            d.normalized,
            d.lane_utilization,
            d.mem_only_ratio,
            d.vrf_conflict_ratio,
            d.operand_latency_mean,
            c.vrf_read_grants,
            c.vrf_read_conflicts,
            c.vrf_write_conflicts,
            c.vrf_conflict_cycles,
            c.forward_hits,
            c.local_issue_bubbles,
            c.local_issue_saves,
            c.mem.demand_read_beats,
            c.mem.prefetch_read_beats,
            c.mem.write_beats,
            c.mem.prefetch_hit_words,
        )
    }
}

/// One kernel's row in the normalized-performance comparison plot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub kernel: String,
    pub baseline_norm: f64,
    pub opt_norm: f64,
    /// Absent when the baseline already sat at the roofline.
    pub gap_closed: Option<f64>,
}

/// Pair a baseline report with its optimized counterpart.
pub fn plot_row(base: &RunReport, opt: &RunReport) -> Result<PlotRow, MetricsError> {
    if base.kernel != opt.kernel || base.size != opt.size {
        return Err(MetricsError::MismatchedPair(
            format!("{}{:?}", base.kernel, base.size),
            format!("{}{:?}", opt.kernel, opt.size),
        ));
    }
    let gap = gap_closed(
        base.derived.p_ideal,
        base.derived.gflops,
        opt.derived.gflops,
    );
    Ok(PlotRow {
        kernel: base.kernel.clone(),
        baseline_norm: base.derived.normalized,
        opt_norm: opt.derived.normalized,
        gap_closed: gap.fraction(),
    })
}

/// CSV for the comparison plot, one kernel per line.
pub fn plot_csv(rows: &[PlotRow]) -> String {
    let mut out = String::from("kernel,baseline_norm,opt_norm,gap_closed\n");
    for r in rows {
        let gap = match r.gap_closed {
            Some(v) => format!("{v:.6}"),
            None => "saturated".to_string(),
        };
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.kernel, r.baseline_norm, r.opt_norm, gap
        ));
    }
    out
}

/// Baseline cycles over optimized cycles.
pub fn speedup(base: &RunReport, opt: &RunReport) -> f64 {
    base.counters.cycles as f64 / opt.counters.cycles.max(1) as f64
}
