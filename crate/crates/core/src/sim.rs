//! Whole-machine simulation loop.
//!
//! Each cycle advances the three engines in a fixed order: the memory front
//! end first (so freshly drained queue slots are visible to issue), then the
//! in-order sequencer, then the lanes. Unit reports collected during the
//! cycle are handed to the sequencer at the end and take effect the next
//! cycle, matching a registered status network. Store data produced by the
//! lanes likewise reaches the memory front end one cycle later.
//!
//! A run ends when the whole program has retired and every engine is empty;
//! the result can be checked word-for-word against the architectural
//! reference machine.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::backend::Backend;
use crate::config::MachineConfig;
use crate::kernel::Kernel;
use crate::mem::{MemFault, Vlsu, VlsuCounters};
use crate::seq::{fu_kind, Blocked, FuKind, Sequencer};
use crate::trace::{IssueEvent, TraceLog};

const WATCHDOG_CYCLES: u64 = 100_000_000;

/// Everything a run counts, fully determined by configuration and program.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct RunCounters {
    pub cycles: u64,
    /// Cycles with a demand read in flight while no functional unit
    /// consumed or started work.
    pub mem_only_cycles: u64,
    /// Sum over cycles of lanes doing functional-unit work.
    pub busy_lane_cycles: u64,
    pub instrs_issued: u64,
    pub blocked_raw: u64,
    pub blocked_war: u64,
    pub blocked_waw: u64,
    pub blocked_structural: u64,
    pub vrf_read_grants: u64,
    pub vrf_read_conflicts: u64,
    pub vrf_write_conflicts: u64,
    /// Cycles in which at least one bank turned a requester away, reads and
    /// writebacks together.
    pub vrf_conflict_cycles: u64,
    pub forward_hits: u64,
    pub operand_lat_sum: u64,
    pub operand_lat_n: u64,
    pub local_issue_bubbles: u64,
    pub local_issue_saves: u64,
    pub fu_group_starts: u64,
    pub reduce_consumes: u64,
    pub mem: VlsuCounters,
}

impl RunCounters {
    /// Mean lanes busy per cycle, normalized to the lane count.
    pub fn utilization(&self, lanes: u32) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.busy_lane_cycles as f64 / (lanes as u64 * self.cycles) as f64
    }

    pub fn mem_only_frac(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.mem_only_cycles as f64 / self.cycles as f64
    }

    /// Mean cycles from a producer's write-back to the consumer latching the
    /// group, over sources whose producer was in flight at dispatch.
    pub fn operand_latency_mean(&self) -> f64 {
        if self.operand_lat_n == 0 {
            return 0.0;
        }
        self.operand_lat_sum as f64 / self.operand_lat_n as f64
    }

    /// Fraction of cycles with at least one register-file bank conflict.
    pub fn vrf_conflict_ratio(&self) -> f64 {
        if self.cycles == 0 {
            return 0.0;
        }
        self.vrf_conflict_cycles as f64 / self.cycles as f64
    }
}

#[derive(Debug)]
pub enum SimError {
    Fault(MemFault),
    /// The machine failed to drain; almost always a model deadlock.
    Watchdog { cycle: u64 },
    /// Simulated state diverged from the architectural reference.
    Mismatch(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Fault(e) => write!(f, "memory fault: {e}"),
            SimError::Watchdog { cycle } => {
                write!(f, "machine failed to drain within {cycle} cycles")
            }
            SimError::Mismatch(why) => write!(f, "state mismatch: {why}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<MemFault> for SimError {
    fn from(e: MemFault) -> Self {
        SimError::Fault(e)
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub counters: RunCounters,
    /// Issue cycle per program position.
    pub issue_cycles: Vec<u64>,
    pub trace: TraceLog,
    pub memory: BTreeMap<u64, u32>,
    final_regs: FinalRegs,
}

/// Run a kernel to completion and verify the result against the reference
/// machine.
pub fn run_kernel(kernel: &Kernel, cfg: &MachineConfig) -> Result<RunResult, SimError> {
    run_kernel_traced(kernel, cfg, false)
}

pub fn run_kernel_traced(
    kernel: &Kernel,
    cfg: &MachineConfig,
    trace: bool,
) -> Result<RunResult, SimError> {
    let mut memory = BTreeMap::new();
    for r in &kernel.regions {
        for (i, &w) in r.data.iter().enumerate() {
            memory.insert(r.base + 4 * i as u64, w);
        }
    }
    let mut backend = Backend::new(cfg);
    for ri in &kernel.reg_inputs {
        backend.preset_reg(ri.reg, &ri.data);
    }
    let result = run_loop(&kernel.instructions, cfg, memory, backend, trace)?;
    verify_against_golden(kernel, cfg, &result)?;
    Ok(result)
}

/// Run a bare instruction sequence over the given initial memory.
pub fn run_program(
    program: &[crate::isa::VectorInstruction],
    cfg: &MachineConfig,
    memory: BTreeMap<u64, u32>,
    trace: bool,
) -> Result<RunResult, SimError> {
    run_loop(program, cfg, memory, Backend::new(cfg), trace)
}

fn run_loop(
    program: &[crate::isa::VectorInstruction],
    cfg: &MachineConfig,
    mut memory: BTreeMap<u64, u32>,
    mut backend: Backend,
    trace_on: bool,
) -> Result<RunResult, SimError> {
    let mut trace = TraceLog::new(trace_on);
    let mut vlsu = Vlsu::new(cfg);
    let mut seq = Sequencer::new(cfg, program.len());
    let mut c = RunCounters::default();

    for cycle in 1..=WATCHDOG_CYCLES {
        let vout = vlsu.step(cycle, &mut memory, &|r, e| backend.reg_elem(r, e), &mut trace)?;

        let sstep = seq.step(cycle, program, vlsu.can_accept());
        if let Some((id, pc)) = sstep.dispatch {
            let instr = &program[pc];
            match fu_kind(instr.opcode) {
                FuKind::MemLoad | FuKind::MemStore => {
                    vlsu.dispatch(id, instr, cycle);
                    backend.dispatch(id, instr);
                }
                FuKind::Control => {}
                _ => backend.dispatch(id, instr),
            }
        }
        if sstep.issued_pc.is_some() {
            c.instrs_issued += 1;
        }
        match sstep.blocked {
            Some(Blocked::Raw) => c.blocked_raw += 1,
            Some(Blocked::War) => c.blocked_war += 1,
            Some(Blocked::Waw) => c.blocked_waw += 1,
            Some(Blocked::Structural) => c.blocked_structural += 1,
            None => {}
        }
        trace.issue(IssueEvent {
            cycle,
            pc: sstep.issued_pc.unwrap_or(seq.next_pc()),
            issued: sstep.issued_pc.is_some(),
            blocked: sstep.blocked.map(Blocked::as_str),
        });

        let bout = backend.step(cycle, &vout.deliveries, &mut trace);

        for ev in vout.events {
            seq.report(ev);
        }
        for ev in bout.events {
            seq.report(ev);
        }
        for (id, words) in bout.store_data {
            vlsu.push_store_data(id, words);
        }

        c.cycles = cycle;
        c.busy_lane_cycles += u64::from(bout.busy_mask.count_ones());
        if bout.conflict_mask != 0 {
            c.vrf_conflict_cycles += 1;
        }
        if vlsu.demand_read_in_flight() && !bout.fu_commit {
            c.mem_only_cycles += 1;
        }

        if seq.all_done() && vlsu.idle() && backend.idle() {
            let b = &backend.counters;
            c.vrf_read_grants = b.vrf_read_grants;
            c.vrf_read_conflicts = b.vrf_read_conflicts;
            c.vrf_write_conflicts = b.vrf_write_conflicts;
            c.forward_hits = b.forward_hits;
            c.operand_lat_sum = b.operand_lat_sum;
            c.operand_lat_n = b.operand_lat_n;
            c.local_issue_bubbles = b.local_issue_bubbles;
            c.local_issue_saves = b.local_issue_saves;
            c.fu_group_starts = b.fu_group_starts;
            c.reduce_consumes = b.reduce_consumes;
            c.mem = vlsu.counters.clone();
            return Ok(RunResult {
                counters: c,
                issue_cycles: seq.issue_cycles.clone(),
                trace,
                memory,
                final_regs: FinalRegs::capture(&backend),
            });
        }
    }
    Err(SimError::Watchdog { cycle: WATCHDOG_CYCLES })
}

/// Final register state snapshot for reference comparison.
#[derive(Debug, Default)]
struct FinalRegs {
    words: Vec<Vec<u32>>,
    init: Vec<Vec<bool>>,
}

impl FinalRegs {
    fn capture(b: &Backend) -> Self {
        let mut words = Vec::with_capacity(32);
        let mut init = Vec::with_capacity(32);
        for r in 0..32u8 {
            let w = b.reg_words(r);
            words.push(w.to_vec());
            init.push((0..w.len() as u32).map(|e| b.reg_written(r, e)).collect());
        }
        FinalRegs { words, init }
    }
}

fn verify_against_golden(
    kernel: &Kernel,
    cfg: &MachineConfig,
    result: &RunResult,
) -> Result<(), SimError> {
    let golden = kernel
        .execute_golden(cfg)
        .map_err(|e| SimError::Mismatch(format!("reference execution failed: {e}")))?;
    for (&addr, &want) in &golden.memory {
        match result.memory.get(&addr) {
            Some(&got) if got == want => {}
            Some(&got) => {
                return Err(SimError::Mismatch(format!(
                    "memory[{addr:#x}] = {got:#010x}, reference has {want:#010x}"
                )));
            }
            None => {
                return Err(SimError::Mismatch(format!(
                    "memory[{addr:#x}] missing, reference has {want:#010x}"
                )));
            }
        }
    }
    for r in 0..32u8 {
        let want = golden.reg(r);
        for (e, &w) in want.iter().enumerate() {
            if !golden.reg_initialized(r, e as u32) {
                continue;
            }
            if !result.final_regs.init[r as usize][e] {
                return Err(SimError::Mismatch(format!(
                    "v{r}[{e}] never written; reference has {w:#010x}"
                )));
            }
            let got = result.final_regs.words[r as usize][e];
            if got != w {
                return Err(SimError::Mismatch(format!(
                    "v{r}[{e}] = {got:#010x}, reference has {w:#010x}"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Toggles;
    use crate::kernel::{build_kernel, KernelName, KernelSpec};

    fn spec(name: KernelName, size: &[u64]) -> KernelSpec {
        KernelSpec { name, size: size.to_vec() }
    }

    fn cfg_with(t: Toggles) -> MachineConfig {
        let mut c = MachineConfig::default();
        c.toggles = t;
        c
    }

    #[test]
    fn scal_runs_and_matches_reference_both_ends() {
        let k = build_kernel(&spec(KernelName::Scal, &[256]), &MachineConfig::default()).unwrap();
        let base = run_kernel(&k, &cfg_with(Toggles::all_off())).unwrap();
        let opt = run_kernel(&k, &cfg_with(Toggles::all_on())).unwrap();
        assert!(opt.counters.cycles < base.counters.cycles);
    }

    #[test]
    fn every_kernel_small_matches_reference_for_extreme_toggles() {
        let shapes: &[(KernelName, &[u64])] = &[
            (KernelName::Scal, &[96]),
            (KernelName::Axpy, &[96]),
            (KernelName::Dotp, &[96]),
            (KernelName::Gemv, &[8, 64]),
            (KernelName::Ger, &[8, 64]),
            (KernelName::Gemm, &[8, 32, 8]),
            (KernelName::Spmv, &[16, 64]),
        ];
        for &(name, size) in shapes {
            let k = build_kernel(&spec(name, size), &MachineConfig::default()).unwrap();
            for t in [Toggles::all_off(), Toggles::all_on()] {
                let r = run_kernel(&k, &cfg_with(t));
                assert!(r.is_ok(), "{name:?} {t:?}: {}", r.err().unwrap());
            }
        }
    }

    #[test]
    fn same_configuration_reproduces_identical_counters() {
        let k = build_kernel(&spec(KernelName::Axpy, &[512]), &MachineConfig::default()).unwrap();
        let cfg = cfg_with(Toggles::all_on());
        let a = run_kernel(&k, &cfg).unwrap();
        let b = run_kernel(&k, &cfg).unwrap();
        assert_eq!(a.counters, b.counters);
        assert_eq!(a.issue_cycles, b.issue_cycles);
    }

    #[test]
    fn all_toggle_combinations_agree_on_results_for_one_kernel() {
        let k = build_kernel(&spec(KernelName::Dotp, &[128]), &MachineConfig::default()).unwrap();
        for bits in 0..64u8 {
            let cfg = cfg_with(Toggles::from_bits(bits));
            let r = run_kernel(&k, &cfg);
            assert!(r.is_ok(), "toggles {bits:#08b}: {}", r.err().unwrap());
        }
    }
}
