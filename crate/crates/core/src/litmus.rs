//! Small targeted scenarios that pin down each mechanism's exact effect.
//!
//! Every scenario runs the same program twice — one optimization off, then
//! on, everything else held fixed — and checks trace-level properties that
//! the mechanism must change (or must not change). These are the sharp-edged
//! counterparts to the statistical kernel comparisons: each check is an
//! exact assertion, not a band.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::{MachineConfig, Toggles};
use crate::isa::{AccessPattern, VectorInstruction};
use crate::kernel::{build_kernel, KernelName, KernelSpec};
use crate::sim::{run_kernel, run_kernel_traced, run_program, RunResult, SimError};

pub const LITMUS_NAMES: [&str; 4] = [
    "war-early-release",
    "local-issue",
    "forwarding",
    "prefetch",
];

#[derive(Debug)]
pub enum LitmusError {
    Unknown(String),
    Build(crate::kernel::KernelError),
    Sim(SimError),
}

impl std::fmt::Display for LitmusError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LitmusError::Unknown(name) => {
                write!(f, "unknown litmus {name:?}; expected one of {LITMUS_NAMES:?}")
            }
            LitmusError::Build(e) => write!(f, "litmus kernel build failed: {e}"),
            LitmusError::Sim(e) => write!(f, "litmus run failed: {e}"),
        }
    }
}

impl std::error::Error for LitmusError {}

impl From<SimError> for LitmusError {
    fn from(e: SimError) -> Self {
        LitmusError::Sim(e)
    }
}

impl From<crate::kernel::KernelError> for LitmusError {
    fn from(e: crate::kernel::KernelError) -> Self {
        LitmusError::Build(e)
    }
}

/// One asserted property with its measured evidence.
#[derive(Debug, Clone)]
pub struct Check {
    pub what: String,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct LitmusOutcome {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl LitmusOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn text(&self) -> String {
        let mut s = format!(
            "{}: {}\n",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        for c in &self.checks {
            let _ = writeln!(s, "  [{}] {}", if c.pass { "ok" } else { "FAIL" }, c.what);
        }
        s
    }
}

pub fn run_litmus(name: &str) -> Result<LitmusOutcome, LitmusError> {
    match name {
        "war-early-release" => war_early_release(),
        "local-issue" => local_issue(),
        "forwarding" => forwarding(),
        "prefetch" => prefetch(),
        other => Err(LitmusError::Unknown(other.to_string())),
    }
}

fn check(checks: &mut Vec<Check>, pass: bool, what: String) {
    checks.push(Check { what, pass });
}

fn words(values: impl IntoIterator<Item = f32>) -> Vec<u32> {
    values.into_iter().map(f32::to_bits).collect()
}

fn memory_with(regions: &[(u64, &[u32])]) -> BTreeMap<u64, u32> {
    let mut m = BTreeMap::new();
    for &(base, data) in regions {
        for (i, &w) in data.iter().enumerate() {
            m.insert(base + 4 * i as u64, w);
        }
    }
    m
}

fn run_pair(
    program: &[VectorInstruction],
    memory: &BTreeMap<u64, u32>,
    base_cfg: &MachineConfig,
    enable: impl Fn(&mut Toggles),
) -> Result<(RunResult, RunResult), LitmusError> {
    let base = run_program(program, base_cfg, memory.clone(), true)?;
    let mut opt_cfg = base_cfg.clone();
    enable(&mut opt_cfg.toggles);
    let opt = run_program(program, &opt_cfg, memory.clone(), true)?;
    Ok((base, opt))
}

/// A younger instruction overwrites a register an older reduction is still
/// reading. Without early release the writer waits out the reduction's full
/// serial tail; with it, the writer issues as soon as the reduction has
/// latched its last source group.
pub fn war_early_release() -> Result<LitmusOutcome, LitmusError> {
    let vl = 32u32;
    let x = words((0..vl).map(|i| (i + 1) as f32));
    let y = words((0..vl).map(|i| 0.5 * (i + 1) as f32));
    let memory = memory_with(&[(0x1000, &x), (0x2000, &y)]);
    let program = [
        VectorInstruction::vload(1, 0x1000, AccessPattern::UnitStride, vl),
        VectorInstruction::vload(3, 0x2000, AccessPattern::UnitStride, vl),
        // Reads v1 for a long time after its last source group is latched.
        VectorInstruction::vredsum(2, 3, 1, vl),
        // Overwrites v1: WAR against the reduction's source.
        VectorInstruction::vmul(1, 3, 3, vl),
        VectorInstruction::vstore(1, 0x3000, AccessPattern::UnitStride, vl),
    ];
    let cfg = MachineConfig::default_with_toggles(Toggles::all_off());
    let (base, opt) = run_pair(&program, &memory, &cfg, |t| t.early_read_release = true)?;

    let mut checks = Vec::new();
    let (bi, oi) = (base.issue_cycles[3], opt.issue_cycles[3]);
    check(
        &mut checks,
        oi < bi,
        format!("overwriting vmul issues strictly earlier: cycle {oi} vs {bi}"),
    );
    check(
        &mut checks,
        opt.counters.cycles < base.counters.cycles,
        format!(
            "total cycles strictly lower: {} vs {}",
            opt.counters.cycles, base.counters.cycles
        ),
    );
    check(
        &mut checks,
        base.counters.blocked_war > opt.counters.blocked_war,
        format!(
            "WAR stall cycles shrink: {} vs {}",
            opt.counters.blocked_war, base.counters.blocked_war
        ),
    );
    let expected: Vec<u32> = (0..vl)
        .map(|i| {
            let v = 0.5 * (i + 1) as f32;
            (v * v).to_bits()
        })
        .collect();
    let stored = |r: &RunResult| -> Vec<u32> {
        (0..vl as u64).map(|i| r.memory[&(0x3000 + 4 * i)]).collect()
    };
    check(
        &mut checks,
        stored(&base) == expected && stored(&opt) == expected,
        "both runs store identical, correct results".to_string(),
    );
    Ok(LitmusOutcome {
        name: "war-early-release",
        checks,
    })
}

/// One multiply whose first source is fully resident while its second
/// trickles in. The resident source's two-deep queue sits full; every pop
/// releases a slot with a read already waiting — a releasable occupancy.
/// The baseline burns exactly one bubble cycle on each; local issue fills
/// every one of those slots in the pop cycle itself, and nothing else about
/// the schedule moves, so saves match bubbles one for one.
pub fn local_issue() -> Result<LitmusOutcome, LitmusError> {
    let vl = 32u32;
    let x = words((0..vl).map(|i| (i + 1) as f32));
    let y = words((0..vl).map(|i| 2.0 * (i + 1) as f32));
    let memory = memory_with(&[(0x1000, &x), (0x2000, &y)]);
    let program = [
        VectorInstruction::vload(1, 0x1000, AccessPattern::UnitStride, vl),
        VectorInstruction::vload(2, 0x2000, AccessPattern::UnitStride, vl),
        VectorInstruction::vmul(4, 1, 2, vl),
        VectorInstruction::vstore(4, 0x3000, AccessPattern::UnitStride, vl),
    ];
    let mut cfg = MachineConfig::default_with_toggles(Toggles::all_off());
    cfg.operand_queue_depth = 2;
    let (base, opt) = run_pair(&program, &memory, &cfg, |t| t.dynamic_local_issue = true)?;

    let mut checks = Vec::new();
    let (bb, bs) = (
        base.counters.local_issue_bubbles,
        base.counters.local_issue_saves,
    );
    let (ob, os) = (
        opt.counters.local_issue_bubbles,
        opt.counters.local_issue_saves,
    );
    check(
        &mut checks,
        bb > 0 && bs == 0,
        format!("baseline burns bubbles on full-but-popping queues: {bb} bubbles"),
    );
    check(
        &mut checks,
        ob == 0,
        format!("local issue leaves no such bubble: {ob}"),
    );
    check(
        &mut checks,
        os == bb,
        format!("exactly one save per baseline bubble: {os} saves vs {bb} bubbles"),
    );
    check(
        &mut checks,
        opt.counters.cycles <= base.counters.cycles,
        format!(
            "never slower overall: {} vs {} cycles",
            opt.counters.cycles, base.counters.cycles
        ),
    );
    let expected: Vec<u32> = (0..vl)
        .map(|i| {
            let a = (i + 1) as f32;
            (a * (2.0 * a)).to_bits()
        })
        .collect();
    let stored = |r: &RunResult| -> Vec<u32> {
        (0..vl as u64).map(|i| r.memory[&(0x3000 + 4 * i)]).collect()
    };
    check(
        &mut checks,
        stored(&base) == expected && stored(&opt) == expected,
        "stored products are correct in both runs".to_string(),
    );
    Ok(LitmusOutcome {
        name: "local-issue",
        checks,
    })
}

/// Forwarding on axpy: the store consumes the multiply-accumulate's result
/// off the forward path, so register-file read grants drop and operands
/// arrive sooner on average.
pub fn forwarding() -> Result<LitmusOutcome, LitmusError> {
    let spec = KernelSpec {
        name: KernelName::Axpy,
        size: vec![256],
    };
    let base_cfg = MachineConfig::default_with_toggles(Toggles::all_off());
    let mut opt_cfg = base_cfg.clone();
    opt_cfg.toggles.multi_source_forwarding = true;

    let kernel = build_kernel(&spec, &base_cfg)?;
    let base = run_kernel(&kernel, &base_cfg)?;
    let opt = run_kernel(&kernel, &opt_cfg)?;

    let mut checks = Vec::new();
    check(
        &mut checks,
        opt.counters.forward_hits > 0 && base.counters.forward_hits == 0,
        format!("forward path carries traffic: {} hits", opt.counters.forward_hits),
    );
    check(
        &mut checks,
        opt.counters.vrf_read_grants < base.counters.vrf_read_grants,
        format!(
            "strictly fewer register-file read grants: {} vs {}",
            opt.counters.vrf_read_grants, base.counters.vrf_read_grants
        ),
    );
    let (bl, ol) = (
        base.counters.operand_latency_mean(),
        opt.counters.operand_latency_mean(),
    );
    check(
        &mut checks,
        ol < bl,
        format!("mean operand arrival latency drops: {ol:.3} vs {bl:.3}"),
    );
    Ok(LitmusOutcome {
        name: "forwarding",
        checks,
    })
}

/// Next-interval prefetch on a unit-stride stream: every word still read
/// exactly once, the prefetcher actually serves demand traffic, and demand
/// is never pushed later than it ran without prefetching.
pub fn prefetch() -> Result<LitmusOutcome, LitmusError> {
    let spec = KernelSpec {
        name: KernelName::Scal,
        size: vec![256],
    };
    let base_cfg = MachineConfig::default_with_toggles(Toggles::all_off());
    let mut opt_cfg = base_cfg.clone();
    opt_cfg.toggles.next_vl_prefetch = true;

    let kernel = build_kernel(&spec, &base_cfg)?;
    let base = run_kernel_traced(&kernel, &base_cfg, true)?;
    let opt = run_kernel_traced(&kernel, &opt_cfg, true)?;

    let mut checks = Vec::new();
    let base_reads = base.trace.read_multiset();
    let opt_reads = opt.trace.read_multiset();
    let exactly_once = opt_reads.windows(2).all(|w| w[0] < w[1]);
    check(
        &mut checks,
        exactly_once,
        format!("no element read twice across {} bus reads", opt_reads.len()),
    );
    check(
        &mut checks,
        opt_reads == base_reads,
        "prefetching reads the same element set as demand-only".to_string(),
    );
    let hits = opt.counters.mem.prefetch_hit_words + opt.counters.mem.prefetch_merge_beats;
    check(
        &mut checks,
        hits > 0,
        format!("prefetched data serves demand: {hits} hit words/merged beats"),
    );
    let never_later = opt
        .issue_cycles
        .iter()
        .zip(&base.issue_cycles)
        .all(|(o, b)| o <= b);
    check(
        &mut checks,
        never_later && opt.counters.cycles <= base.counters.cycles,
        format!(
            "demand never delayed: every issue at or before its demand-only \
             cycle, total {} vs {}",
            opt.counters.cycles, base.counters.cycles
        ),
    );
    let mut per_cycle: BTreeMap<u64, u32> = BTreeMap::new();
    for e in opt.trace.bus.iter().filter(|e| {
        matches!(
            e.channel,
            crate::trace::BusChannel::ReadData | crate::trace::BusChannel::WriteData
        )
    }) {
        *per_cycle.entry(e.cycle).or_default() += 1;
    }
    check(
        &mut checks,
        per_cycle.values().all(|&n| n <= 1),
        "at most one data beat per cycle with background traffic".to_string(),
    );
    Ok(LitmusOutcome {
        name: "prefetch",
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_an_error() {
        assert!(matches!(
            run_litmus("telepathy"),
            Err(LitmusError::Unknown(_))
        ));
    }

    #[test]
    fn war_early_release_issues_strictly_earlier() {
        let out = war_early_release().unwrap();
        assert!(out.passed(), "{}", out.text());
    }

    #[test]
    fn local_issue_saves_exactly_the_baseline_bubbles() {
        let out = local_issue().unwrap();
        assert!(out.passed(), "{}", out.text());
    }

    #[test]
    fn forwarding_cuts_reads_and_latency_on_axpy() {
        let out = forwarding().unwrap();
        assert!(out.passed(), "{}", out.text());
    }

    #[test]
    fn prefetch_reads_once_and_never_delays_demand() {
        let out = prefetch().unwrap();
        assert!(out.passed(), "{}", out.text());
    }

    #[test]
    fn every_named_litmus_runs_and_passes() {
        for name in LITMUS_NAMES {
            let out = run_litmus(name).unwrap();
            assert_eq!(out.name, name);
            assert!(out.passed(), "{}", out.text());
        }
    }
}
