//! Global in-order sequencing: hazard tracking, the in-flight window, and
//! per-cycle issue decisions.
//!
//! At most one instruction issues per cycle. RAW never blocks issue
//! (consumers chain at element-group granularity through operand fetch);
//! WAW blocks until the older writer completes in every mode. WAR blocks
//! until the older reader completes, unless early read release is on, in
//! which case it clears once the reader has consumed every source element
//! group. Units report consumption and completion one cycle after the fact,
//! modeling the lane-report aggregation delay, so a dependence never clears
//! in the same cycle it becomes clearable.

use crate::config::MachineConfig;
use crate::isa::{Opcode, RegId, VectorInstruction};

pub type InstrId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstrState {
    Issued,
    /// Every source element group has been enqueued downstream; the values
    /// this instruction reads can no longer change under it.
    SourcesConsumed,
    Completed,
}

/// Execution resource an opcode occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuKind {
    MulFpu,
    Alu,
    Reduce,
    MemLoad,
    MemStore,
    Control,
}

pub fn fu_kind(op: Opcode) -> FuKind {
    match op {
        Opcode::Vmul | Opcode::Vmacc | Opcode::Vmulvf | Opcode::Vmaccvf => FuKind::MulFpu,
        Opcode::Vadd => FuKind::Alu,
        Opcode::Vredsum => FuKind::Reduce,
        Opcode::Vload => FuKind::MemLoad,
        Opcode::Vstore => FuKind::MemStore,
        Opcode::Vsetvl => FuKind::Control,
    }
}

/// Unit-to-sequencer notifications, applied one cycle after they occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqEvent {
    SourcesConsumed(InstrId),
    Completed(InstrId),
}

#[derive(Debug, Clone)]
pub struct InFlight {
    pub id: InstrId,
    pub pc: usize,
    pub kind: FuKind,
    pub reads: Vec<RegId>,
    pub writes: Option<RegId>,
    pub state: InstrState,
    pub issue_cycle: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Blocked {
    Raw,
    War,
    Waw,
    Structural,
}

impl Blocked {
    pub fn as_str(self) -> &'static str {
        match self {
            Blocked::Raw => "raw",
            Blocked::War => "war",
            Blocked::Waw => "waw",
            Blocked::Structural => "structural",
        }
    }
}

/// What the sequencer decided this cycle, for the caller to act on.
#[derive(Debug, Clone, Default)]
pub struct SeqStep {
    /// Instruction to hand to the lanes or the memory front end.
    pub dispatch: Option<(InstrId, usize)>,
    pub issued_pc: Option<usize>,
    pub blocked: Option<Blocked>,
}

#[derive(Debug)]
pub struct Sequencer {
    window: Vec<InFlight>,
    next_pc: usize,
    next_id: InstrId,
    window_cap: usize,
    per_kind_cap: usize,
    early_release: bool,
    pending: Vec<SeqEvent>,
    retired: usize,
    program_len: usize,
    /// Issue cycle per program position, for schedule comparisons.
    pub issue_cycles: Vec<u64>,
}

impl Sequencer {
    pub fn new(cfg: &MachineConfig, program_len: usize) -> Self {
        Sequencer {
            window: Vec::with_capacity(cfg.inflight_window),
            next_pc: 0,
            next_id: 0,
            window_cap: cfg.inflight_window,
            per_kind_cap: cfg.per_kind_inflight,
            early_release: cfg.toggles.early_read_release,
            pending: Vec::new(),
            retired: 0,
            program_len,
            issue_cycles: vec![0; program_len],
        }
    }

    pub fn all_done(&self) -> bool {
        self.retired == self.program_len
    }

    /// Program position at the issue head (== program length once drained).
    pub fn next_pc(&self) -> usize {
        self.next_pc
    }

    pub fn in_flight(&self) -> usize {
        self.window.len()
    }

    /// Queue a unit notification; it takes effect next cycle.
    pub fn report(&mut self, ev: SeqEvent) {
        self.pending.push(ev);
    }

    fn apply_pending(&mut self) {
        let events = std::mem::take(&mut self.pending);
        for ev in events {
            match ev {
                SeqEvent::SourcesConsumed(id) => {
                    if let Some(e) = self.window.iter_mut().find(|e| e.id == id) {
                        if e.state == InstrState::Issued {
                            e.state = InstrState::SourcesConsumed;
                        }
                    }
                }
                SeqEvent::Completed(id) => {
                    if let Some(pos) = self.window.iter().position(|e| e.id == id) {
                        self.window.remove(pos);
                        self.retired += 1;
                    }
                }
            }
        }
    }

    /// Hazard and structural check for the next program instruction.
    fn check_issue(&self, instr: &VectorInstruction, vlsu_can_accept: bool) -> Option<Blocked> {
        if self.window.len() >= self.window_cap {
            return Some(Blocked::Structural);
        }
        let kind = fu_kind(instr.opcode);
        match kind {
            FuKind::MemLoad | FuKind::MemStore => {
                if !vlsu_can_accept {
                    return Some(Blocked::Structural);
                }
            }
            FuKind::MulFpu | FuKind::Alu | FuKind::Reduce => {
                let busy = self.window.iter().filter(|e| e.kind == kind).count();
                if busy >= self.per_kind_cap {
                    return Some(Blocked::Structural);
                }
            }
            FuKind::Control => {}
        }
        if let Some(w) = instr.writes() {
            for e in &self.window {
                if e.writes == Some(w) && e.state != InstrState::Completed {
                    return Some(Blocked::Waw);
                }
                if e.reads.contains(&w) {
                    let released = match e.state {
                        InstrState::Completed => true,
                        InstrState::SourcesConsumed => self.early_release,
                        InstrState::Issued => false,
                    };
                    if !released {
                        return Some(Blocked::War);
                    }
                }
            }
        }
        None
    }

    /// Apply last cycle's unit reports, then try to issue one instruction.
    pub fn step(
        &mut self,
        cycle: u64,
        program: &[VectorInstruction],
        vlsu_can_accept: bool,
    ) -> SeqStep {
        self.apply_pending();
        let mut out = SeqStep::default();
        if self.next_pc >= program.len() {
            return out;
        }
        let instr = &program[self.next_pc];
        match self.check_issue(instr, vlsu_can_accept) {
            Some(reason) => {
                out.blocked = Some(reason);
            }
            None => {
                let id = self.next_id;
                let reads = instr.reads();
                let state = if reads.is_empty() && fu_kind(instr.opcode) != FuKind::Control {
                    InstrState::SourcesConsumed
                } else {
                    InstrState::Issued
                };
                self.window.push(InFlight {
                    id,
                    pc: self.next_pc,
                    kind: fu_kind(instr.opcode),
                    reads,
                    writes: instr.writes(),
                    state,
                    issue_cycle: cycle,
                });
                if fu_kind(instr.opcode) == FuKind::Control {
                    // A vl change occupies the issue slot and finishes next
                    // cycle; nothing downstream sees it.
                    self.pending.push(SeqEvent::Completed(id));
                } else {
                    out.dispatch = Some((id, self.next_pc));
                }
                self.issue_cycles[self.next_pc] = cycle;
                out.issued_pc = Some(self.next_pc);
                self.next_id += 1;
                self.next_pc += 1;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{AccessPattern, VectorInstruction as VI};

    fn seq(early: bool, len: usize) -> Sequencer {
        let mut cfg = MachineConfig::default();
        cfg.toggles.early_read_release = early;
        Sequencer::new(&cfg, len)
    }

    #[test]
    fn raw_chains_without_blocking() {
        // vadd reads what the older vmul writes: RAW must not block issue.
        let program =
            vec![VI::vmul(3, 1, 2, 32), VI::vadd(4, 3, 3, 32), VI::vstore(4, 0x100, AccessPattern::UnitStride, 32)];
        let mut s = seq(false, 3);
        assert!(s.step(1, &program, true).issued_pc.is_some());
        assert!(s.step(2, &program, true).issued_pc.is_some());
        assert!(s.step(3, &program, true).issued_pc.is_some());
    }

    #[test]
    fn waw_blocks_until_completion_in_both_modes() {
        let program = vec![VI::vmul(3, 1, 2, 32), VI::vadd(3, 1, 2, 32)];
        for early in [false, true] {
            let mut s = seq(early, 2);
            s.step(1, &program, true);
            let st = s.step(2, &program, true);
            assert_eq!(st.blocked, Some(Blocked::Waw), "early={early}");
            s.report(SeqEvent::SourcesConsumed(0));
            let st = s.step(3, &program, true);
            assert_eq!(st.blocked, Some(Blocked::Waw), "early={early}");
            s.report(SeqEvent::Completed(0));
            assert!(s.step(4, &program, true).issued_pc.is_some(), "early={early}");
        }
    }

    #[test]
    fn war_release_depends_on_toggle() {
        // Second instruction overwrites v1 while the store still reads it.
        let program =
            vec![VI::vstore(1, 0x100, AccessPattern::UnitStride, 32), VI::vmul(1, 2, 2, 32)];
        for (early, expect_issue) in [(false, false), (true, true)] {
            let mut s = seq(early, 2);
            s.step(1, &program, true);
            let st = s.step(2, &program, true);
            assert_eq!(st.blocked, Some(Blocked::War), "nothing reported yet");
            s.report(SeqEvent::SourcesConsumed(0));
            let st = s.step(3, &program, true);
            assert_eq!(st.issued_pc.is_some(), expect_issue, "early={early}");
            if !expect_issue {
                s.report(SeqEvent::Completed(0));
                assert!(s.step(4, &program, true).blocked.is_none());
            }
        }
    }

    #[test]
    fn reports_take_effect_one_cycle_later() {
        let program =
            vec![VI::vstore(1, 0x100, AccessPattern::UnitStride, 32), VI::vmul(1, 2, 2, 32)];
        let mut s = seq(true, 2);
        s.step(1, &program, true);
        // Report lands during cycle 2; the issue check the same cycle still
        // sees the un-released state because steps apply reports first and
        // the report arrives after this step ran.
        let st = s.step(2, &program, true);
        assert_eq!(st.blocked, Some(Blocked::War));
        s.report(SeqEvent::SourcesConsumed(0));
        assert!(s.step(3, &program, true).issued_pc.is_some());
    }

    #[test]
    fn window_and_kind_limits_are_structural() {
        let program: Vec<_> = (0..12).map(|i| VI::vmul(10 + i, 1, 2, 32)).collect();
        let mut s = seq(false, 12);
        assert!(s.step(1, &program, true).issued_pc.is_some());
        assert!(s.step(2, &program, true).issued_pc.is_some());
        // Default per-kind limit is 2.
        assert_eq!(s.step(3, &program, true).blocked, Some(Blocked::Structural));
    }

    #[test]
    fn vsetvl_occupies_one_issue_slot() {
        let program = vec![VI::vsetvl(32), VI::vmul(3, 1, 2, 32)];
        let mut s = seq(false, 2);
        let st = s.step(1, &program, true);
        assert_eq!(st.issued_pc, Some(0));
        assert!(st.dispatch.is_none());
        assert!(s.step(2, &program, true).issued_pc.is_some());
        s.step(3, &program, true);
        assert!(s.window.iter().all(|e| e.pc != 0), "vsetvl retired");
    }
}
