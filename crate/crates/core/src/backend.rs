//! Lane backend: the banked vector register file, per-instruction operand
//! fetch, the functional-unit pipelines, the reduction unit, and the store
//! data path.
//!
//! Values chain between instructions at element-group granularity. A
//! consumer's operand requesters pull each source group either from the
//! register file (a banked read, usable two cycles after the producer's
//! write-back) or, with `multi_source_forwarding` on, straight off the
//! write-back broadcast the cycle it happens — load write-backs forward the
//! same way as functional-unit results. Latched values live in small
//! per-source queues, so an instruction's sources count as consumed — and an
//! overwriter may proceed under early read release — once every group has
//! been latched, not when execution finishes.
//!
//! Bank mapping spreads consecutive groups of a register across banks:
//! `bank = (reg + group) % banks`, one read and one write port per bank.
//! Write-back priority is Reduce, then MulFpu, then Alu, then load
//! write-backs, older first within a class; denied read requesters age until
//! they win, so reads cannot starve.

use std::collections::VecDeque;

use crate::config::MachineConfig;
use crate::golden::tree_sum;
use crate::isa::{Opcode, Operand, RegId, VectorInstruction};
use crate::mem::LoadGroupDelivery;
use crate::seq::{InstrId, SeqEvent};
use crate::trace::{LaneEvent, TraceLog};

const WB_SKID_CAP: usize = 2;

#[derive(Debug, Default, Clone)]
pub struct BackendCounters {
    pub vrf_read_grants: u64,
    /// Read requests denied a bank port (one count per denied request-cycle).
    pub vrf_read_conflicts: u64,
    /// Write-back candidates denied a bank port.
    pub vrf_write_conflicts: u64,
    /// Source groups captured off the write-back broadcast.
    pub forward_hits: u64,
    /// Sum over latched source groups of (latch cycle - producer write-back
    /// cycle), counting only groups whose producer was still in flight at
    /// dispatch; with `operand_lat_n` this gives mean operand latency.
    pub operand_lat_sum: u64,
    pub operand_lat_n: u64,
    /// Cycles a requester idled because its queue looked full even though
    /// the head was draining that very cycle (toggle off).
    pub local_issue_bubbles: u64,
    /// Requests posted into a slot freed by a same-cycle dequeue (toggle on).
    pub local_issue_saves: u64,
    pub fu_group_starts: u64,
    pub reduce_consumes: u64,
}

/// What the lanes report back each cycle.
#[derive(Debug, Default)]
pub struct BackendOut {
    pub events: Vec<SeqEvent>,
    /// Store data headed for the memory front end, one element group per
    /// entry, element order within and across entries per store.
    pub store_data: Vec<(InstrId, Vec<u32>)>,
    /// True when any functional unit consumed or started work this cycle.
    pub fu_commit: bool,
    pub busy_mask: u8,
    pub conflict_mask: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitKind {
    Mul,
    Alu,
    Reduce,
    Store,
}

#[derive(Debug)]
struct SourceQueue {
    reg: RegId,
    total: u32,
    /// In-flight writer of each group, snapshot at our dispatch.
    producers: Vec<Option<InstrId>>,
    next_request: u32,
    /// Latched groups: (group, words, usable-from cycle).
    queue: VecDeque<(u32, Vec<u32>, u64)>,
    /// A granted register-file read, usable next cycle.
    pending: Option<(u32, Vec<u32>, u64)>,
    denied: u32,
}

impl SourceQueue {
    fn occupied(&self) -> usize {
        self.queue.len() + usize::from(self.pending.is_some())
    }

    fn all_latched(&self) -> bool {
        self.next_request >= self.total
    }

    fn head_ready(&self, cycle: u64) -> bool {
        self.queue.front().is_some_and(|&(_, _, r)| r <= cycle)
    }

    fn pop_head(&mut self) -> Vec<u32> {
        self.queue.pop_front().expect("pop from empty operand queue").1
    }
}

#[derive(Debug)]
struct OperandFetch {
    id: InstrId,
    unit: UnitKind,
    op: Opcode,
    vl: u32,
    groups: u32,
    scalar: Option<f32>,
    sources: Vec<SourceQueue>,
    consumed_reported: bool,
    drained: bool,
}

#[derive(Debug)]
struct PipeEntry {
    ready: u64,
    id: InstrId,
    reg: RegId,
    group: u32,
    /// First element index of the group.
    lo: u32,
    words: Vec<u32>,
    last: bool,
}

#[derive(Debug)]
struct FuPipe {
    latency: u64,
    /// Instructions this pipe executes, dispatch order.
    queue: VecDeque<InstrId>,
    next_group: u32,
    pipe: VecDeque<PipeEntry>,
    skid: VecDeque<PipeEntry>,
}

impl FuPipe {
    fn new(latency: u64) -> Self {
        FuPipe {
            latency,
            queue: VecDeque::new(),
            next_group: 0,
            pipe: VecDeque::new(),
            skid: VecDeque::new(),
        }
    }

    fn idle(&self) -> bool {
        self.queue.is_empty() && self.pipe.is_empty() && self.skid.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
enum ReduceState {
    Idle,
    Folding { acc: f32, groups_done: u32 },
    Tail { acc: f32, until: u64 },
}

#[derive(Debug)]
struct ReduceUnit {
    queue: VecDeque<InstrId>,
    state: ReduceState,
    base: u64,
    skid: Option<PipeEntry>,
}

pub fn groups_of(vl: u32, group_elems: u32) -> u32 {
    vl.div_ceil(group_elems).max(1)
}

#[derive(Debug)]
pub struct Backend {
    lanes: u32,
    group_elems: u32,
    banks: usize,
    queue_depth: usize,
    forwarding: bool,
    local_issue: bool,

    vrf: Vec<Vec<u32>>,
    vrf_init: Vec<Vec<bool>>,
    /// In-flight writer per (reg, group).
    owner: Vec<Vec<Option<InstrId>>>,
    /// Write-back cycle per instruction per group, grown on dispatch.
    wb_cycle: Vec<Vec<Option<u64>>>,
    /// Destination register per instruction id that writes one.
    dest_of: Vec<RegId>,

    fetches: Vec<OperandFetch>,
    mul_pipe: FuPipe,
    alu_pipe: FuPipe,
    reduce: ReduceUnit,
    load_wb: VecDeque<PipeEntryElems>,

    pub counters: BackendCounters,
}

/// A pending load write-back, which may cover only part of a group.
#[derive(Debug)]
struct PipeEntryElems {
    id: InstrId,
    reg: RegId,
    group: u32,
    elems: Vec<(u32, u32)>,
    last: bool,
}

impl Backend {
    pub fn new(cfg: &MachineConfig) -> Self {
        let regs = 32;
        let vlmax = cfg.vlmax() as usize;
        let max_groups = cfg.vlmax().div_ceil(cfg.elems_per_group()) as usize;
        Backend {
            lanes: cfg.lanes(),
            group_elems: cfg.elems_per_group(),
            banks: cfg.vrf_banks,
            queue_depth: cfg.operand_queue_depth,
            forwarding: cfg.toggles.multi_source_forwarding,
            local_issue: cfg.toggles.dynamic_local_issue,
            vrf: vec![vec![0; vlmax]; regs],
            vrf_init: vec![vec![false; vlmax]; regs],
            owner: vec![vec![None; max_groups]; regs],
            wb_cycle: Vec::new(),
            dest_of: Vec::new(),
            fetches: Vec::new(),
            mul_pipe: FuPipe::new(cfg.mul_latency),
            alu_pipe: FuPipe::new(cfg.add_latency),
            reduce: ReduceUnit {
                queue: VecDeque::new(),
                state: ReduceState::Idle,
                base: cfg.reduce_base,
                skid: None,
            },
            load_wb: VecDeque::new(),
            counters: BackendCounters::default(),
        }
    }

    /// Preload architectural register state (kernel inputs).
    pub fn preset_reg(&mut self, reg: RegId, words: &[u32]) {
        for (i, &w) in words.iter().enumerate() {
            self.vrf[reg as usize][i] = w;
            self.vrf_init[reg as usize][i] = true;
        }
    }

    pub fn reg_words(&self, reg: RegId) -> &[u32] {
        &self.vrf[reg as usize]
    }

    pub fn reg_written(&self, reg: RegId, elem: u32) -> bool {
        self.vrf_init[reg as usize][elem as usize]
    }

    /// Element value once no in-flight writer still owns its group
    /// (gather expansion reads index registers through this).
    pub fn reg_elem(&self, reg: RegId, elem: u32) -> Option<u32> {
        let g = (elem / self.group_elems) as usize;
        match self.owner[reg as usize][g] {
            None => Some(self.vrf[reg as usize][elem as usize]),
            Some(_) => None,
        }
    }

    pub fn idle(&self) -> bool {
        self.fetches.is_empty()
            && self.mul_pipe.idle()
            && self.alu_pipe.idle()
            && self.reduce.queue.is_empty()
            && matches!(self.reduce.state, ReduceState::Idle)
            && self.reduce.skid.is_none()
            && self.load_wb.is_empty()
    }

    fn ensure_wb_slot(&mut self, id: InstrId, dest: RegId, groups: u32) {
        let idx = id as usize;
        if self.wb_cycle.len() <= idx {
            self.wb_cycle.resize_with(idx + 1, Vec::new);
            self.dest_of.resize(idx + 1, 0);
        }
        self.wb_cycle[idx] = vec![None; groups as usize];
        self.dest_of[idx] = dest;
    }

    fn snapshot_source(&self, reg: RegId, groups: u32) -> SourceQueue {
        let producers = (0..groups).map(|g| self.owner[reg as usize][g as usize]).collect();
        SourceQueue {
            reg,
            total: groups,
            producers,
            next_request: 0,
            queue: VecDeque::new(),
            pending: None,
            denied: 0,
        }
    }

    /// Accept a dispatched instruction. Loads only claim their destination;
    /// their data arrives through [`Backend::step`]'s deliveries.
    pub fn dispatch(&mut self, id: InstrId, instr: &VectorInstruction) {
        let groups = groups_of(instr.vl, self.group_elems);
        match instr.opcode {
            Opcode::Vload => {
                if instr.vl == 0 {
                    return;
                }
                self.ensure_wb_slot(id, instr.dest, groups);
                for g in 0..groups {
                    self.owner[instr.dest as usize][g as usize] = Some(id);
                }
            }
            Opcode::Vstore => {
                let src = self.snapshot_source(instr.dest, groups);
                self.fetches.push(OperandFetch {
                    id,
                    unit: UnitKind::Store,
                    op: instr.opcode,
                    vl: instr.vl,
                    groups,
                    scalar: None,
                    sources: vec![src],
                    consumed_reported: false,
                    drained: false,
                });
            }
            Opcode::Vmul | Opcode::Vadd | Opcode::Vmacc | Opcode::Vmulvf | Opcode::Vmaccvf => {
                let mut sources = Vec::new();
                if matches!(instr.opcode, Opcode::Vmacc | Opcode::Vmaccvf) {
                    sources.push(self.snapshot_source(instr.dest, groups));
                }
                let mut scalar = None;
                match instr.src1 {
                    Operand::Reg(r) => sources.push(self.snapshot_source(r, groups)),
                    Operand::Scalar(s) => scalar = Some(s.value),
                    Operand::None => {}
                }
                if let Operand::Reg(r) = instr.src2 {
                    sources.push(self.snapshot_source(r, groups));
                }
                let unit = if instr.opcode == Opcode::Vadd { UnitKind::Alu } else { UnitKind::Mul };
                self.fetches.push(OperandFetch {
                    id,
                    unit,
                    op: instr.opcode,
                    vl: instr.vl,
                    groups,
                    scalar,
                    sources,
                    consumed_reported: false,
                    drained: false,
                });
                self.ensure_wb_slot(id, instr.dest, groups);
                for g in 0..groups {
                    self.owner[instr.dest as usize][g as usize] = Some(id);
                }
                match unit {
                    UnitKind::Mul => self.mul_pipe.queue.push_back(id),
                    UnitKind::Alu => self.alu_pipe.queue.push_back(id),
                    _ => unreachable!(),
                }
            }
            Opcode::Vredsum => {
                let (Operand::Reg(init), Operand::Reg(data)) = (instr.src1, instr.src2) else {
                    panic!("reduction without register sources");
                };
                let init_src = self.snapshot_source(init, 1);
                let data_src = self.snapshot_source(data, groups);
                self.fetches.push(OperandFetch {
                    id,
                    unit: UnitKind::Reduce,
                    op: instr.opcode,
                    vl: instr.vl,
                    groups,
                    scalar: None,
                    sources: vec![init_src, data_src],
                    consumed_reported: false,
                    drained: false,
                });
                // A reduction writes a single element in group 0.
                self.ensure_wb_slot(id, instr.dest, 1);
                self.owner[instr.dest as usize][0] = Some(id);
                self.reduce.queue.push_back(id);
            }
            Opcode::Vsetvl => {}
        }
    }

    fn lane_mask(&self, lo: u32, n: usize) -> u8 {
        let per_lane = (self.group_elems / self.lanes).max(1);
        let mut m = 0u8;
        for e in lo..lo + n as u32 {
            m |= 1 << ((e % self.group_elems) / per_lane);
        }
        m
    }

    fn bank(&self, reg: RegId, group: u32) -> usize {
        (reg as usize + group as usize) % self.banks
    }

    /// One backend cycle. `deliveries` are load groups arriving from the
    /// memory front end this cycle.
    pub fn step(
        &mut self,
        cycle: u64,
        deliveries: &[LoadGroupDelivery],
        trace: &mut TraceLog,
    ) -> BackendOut {
        let mut out = BackendOut::default();

        // --- Phase A: write-back arbitration and forward broadcast -------
        for d in deliveries {
            let groups_total = self.wb_cycle[d.id as usize].len() as u32;
            self.load_wb.push_back(PipeEntryElems {
                id: d.id,
                reg: self.dest_of[d.id as usize],
                group: d.group,
                elems: d.elems.clone(),
                last: d.group + 1 == groups_total,
            });
        }
        for pipe in [&mut self.mul_pipe, &mut self.alu_pipe] {
            while pipe.pipe.front().is_some_and(|e| e.ready <= cycle)
                && pipe.skid.len() < WB_SKID_CAP
            {
                pipe.skid.push_back(pipe.pipe.pop_front().unwrap());
            }
        }
        let forwards = self.arbitrate_writebacks(cycle, &mut out);

        // --- Phase B: operand queue management ----------------------------
        self.promote_pendings(cycle);
        if self.forwarding {
            self.capture_forwards(cycle, &forwards);
        }
        let will_dequeue = self.predict_dequeues(cycle);
        self.post_vrf_reads(cycle, &will_dequeue, &mut out);

        // --- Phase C: functional units ------------------------------------
        self.start_pipe_groups(cycle, UnitKind::Mul, &mut out);
        self.start_pipe_groups(cycle, UnitKind::Alu, &mut out);
        self.step_reduce(cycle, &mut out);
        self.drain_stores(cycle, &mut out);

        // --- Phase D: consumption reports and cleanup ----------------------
        for f in self.fetches.iter_mut() {
            if !f.consumed_reported && f.sources.iter().all(SourceQueue::all_latched) {
                f.consumed_reported = true;
                out.events.push(SeqEvent::SourcesConsumed(f.id));
            }
        }
        self.fetches.retain(|f| !(f.drained && f.consumed_reported));

        trace.lane(LaneEvent { cycle, busy_mask: out.busy_mask, conflict_mask: out.conflict_mask });
        out
    }

    /// Pick one write per bank from the per-class heads, honoring class
    /// priority, and perform the writes. Returns the forward broadcast.
    fn arbitrate_writebacks(
        &mut self,
        cycle: u64,
        out: &mut BackendOut,
    ) -> Vec<(InstrId, RegId, u32, Vec<(u32, u32)>)> {
        // Candidates: (class, id, reg, group, lane mask). Only the head of
        // each unit's output is eligible, keeping write-back in order per
        // unit.
        struct Cand {
            class: u8,
            id: InstrId,
            reg: RegId,
            group: u32,
            bank: usize,
        }
        let mut cands: Vec<Cand> = Vec::with_capacity(4);
        if let Some(e) = &self.reduce.skid {
            cands.push(Cand { class: 0, id: e.id, reg: e.reg, group: e.group, bank: self.bank(e.reg, e.group) });
        }
        if let Some(e) = self.mul_pipe.skid.front() {
            cands.push(Cand { class: 1, id: e.id, reg: e.reg, group: e.group, bank: self.bank(e.reg, e.group) });
        }
        if let Some(e) = self.alu_pipe.skid.front() {
            cands.push(Cand { class: 2, id: e.id, reg: e.reg, group: e.group, bank: self.bank(e.reg, e.group) });
        }
        if let Some(e) = self.load_wb.front() {
            cands.push(Cand { class: 3, id: e.id, reg: e.reg, group: e.group, bank: self.bank(e.reg, e.group) });
        }
        // Per bank: lowest (class, id, group) wins.
        let mut granted = [false; 4];
        for i in 0..cands.len() {
            let c = &cands[i];
            let win = cands.iter().all(|o| {
                o.bank != c.bank || (o.class, o.id, o.group) >= (c.class, c.id, c.group)
            });
            granted[i] = win;
        }
        let mut forwards = Vec::new();
        for (i, c) in cands.iter().enumerate() {
            if !granted[i] {
                self.counters.vrf_write_conflicts += 1;
                // Conflict lanes: approximate with the full group's lanes.
                out.conflict_mask |= self.lane_mask(c.group * self.group_elems, self.group_elems as usize);
                continue;
            }
            let (elems, last): (Vec<(u32, u32)>, bool) = match c.class {
                0 => {
                    let e = self.reduce.skid.take().unwrap();
                    (e.words.iter().enumerate().map(|(i, &w)| (e.lo + i as u32, w)).collect(), e.last)
                }
                1 => {
                    let e = self.mul_pipe.skid.pop_front().unwrap();
                    (e.words.iter().enumerate().map(|(i, &w)| (e.lo + i as u32, w)).collect(), e.last)
                }
                2 => {
                    let e = self.alu_pipe.skid.pop_front().unwrap();
                    (e.words.iter().enumerate().map(|(i, &w)| (e.lo + i as u32, w)).collect(), e.last)
                }
                _ => {
                    let e = self.load_wb.pop_front().unwrap();
                    (e.elems, e.last)
                }
            };
            for &(e, w) in &elems {
                self.vrf[c.reg as usize][e as usize] = w;
                self.vrf_init[c.reg as usize][e as usize] = true;
            }
            self.wb_cycle[c.id as usize][c.group as usize] = Some(cycle);
            if self.owner[c.reg as usize][c.group as usize] == Some(c.id) {
                self.owner[c.reg as usize][c.group as usize] = None;
            }
            if c.class < 3 {
                if let Some(&(lo, _)) = elems.first() {
                    out.busy_mask |= self.lane_mask(lo, elems.len());
                }
            }
            if last {
                out.events.push(SeqEvent::Completed(c.id));
            }
            forwards.push((c.id, c.reg, c.group, elems));
        }
        forwards
    }

    fn promote_pendings(&mut self, cycle: u64) {
        for f in self.fetches.iter_mut() {
            for s in f.sources.iter_mut() {
                if s.pending.as_ref().is_some_and(|&(_, _, r)| r <= cycle) {
                    let (g, words, r) = s.pending.take().unwrap();
                    if let Some(pid) = s.producers[g as usize] {
                        if let Some(wb) = self.wb_cycle[pid as usize][g as usize] {
                            self.counters.operand_lat_sum += r.saturating_sub(wb);
                            self.counters.operand_lat_n += 1;
                        }
                    }
                    s.queue.push_back((g, words, r));
                }
            }
        }
    }

    fn capture_forwards(
        &mut self,
        cycle: u64,
        forwards: &[(InstrId, RegId, u32, Vec<(u32, u32)>)],
    ) {
        for f in self.fetches.iter_mut() {
            for s in f.sources.iter_mut() {
                if s.all_latched() || s.occupied() >= self.queue_depth {
                    continue;
                }
                let g = s.next_request;
                let Some(pid) = s.producers[g as usize] else { continue };
                let Some((_, _, _, elems)) =
                    forwards.iter().find(|&&(fid, freg, fg, _)| {
                        fid == pid && freg == s.reg && fg == g
                    })
                else {
                    continue;
                };
                let words: Vec<u32> = elems.iter().map(|&(_, w)| w).collect();
                s.queue.push_back((g, words, cycle));
                s.next_request += 1;
                self.counters.forward_hits += 1;
                self.counters.operand_lat_n += 1;
            }
        }
    }

    /// Whether each fetch will have its source heads consumed this cycle.
    fn predict_dequeues(&self, cycle: u64) -> Vec<bool> {
        self.fetches
            .iter()
            .map(|f| match f.unit {
                UnitKind::Mul | UnitKind::Alu => {
                    let pipe = if f.unit == UnitKind::Mul { &self.mul_pipe } else { &self.alu_pipe };
                    pipe.queue.front() == Some(&f.id)
                        && pipe.skid.len() < WB_SKID_CAP
                        && f.sources.iter().all(|s| s.head_ready(cycle))
                }
                UnitKind::Reduce => {
                    self.reduce.queue.front() == Some(&f.id)
                        && match self.reduce.state {
                            ReduceState::Idle => f.sources.iter().all(|s| s.head_ready(cycle)),
                            ReduceState::Folding { .. } => f.sources[1].head_ready(cycle),
                            ReduceState::Tail { .. } => false,
                        }
                }
                UnitKind::Store => f.sources[0].head_ready(cycle),
            })
            .collect()
    }

    fn post_vrf_reads(&mut self, cycle: u64, will_dequeue: &[bool], out: &mut BackendOut) {
        struct Req {
            fetch: usize,
            source: usize,
            bank: usize,
            denied: u32,
            id: InstrId,
            used_slack: bool,
        }
        let mut reqs: Vec<Req> = Vec::new();
        for (fi, f) in self.fetches.iter().enumerate() {
            for (si, s) in f.sources.iter().enumerate() {
                if s.all_latched() || s.pending.is_some() {
                    continue;
                }
                let g = s.next_request;
                // Group must be architecturally final and visible.
                match s.producers[g as usize] {
                    Some(pid) => match self.wb_cycle[pid as usize][g as usize] {
                        Some(wb) if wb < cycle => {}
                        Some(_) => continue,
                        None => continue, // wait for write-back (or a forward capture)
                    },
                    None => {}
                }
                let mut used_slack = false;
                if s.occupied() >= self.queue_depth {
                    // Queue full. A same-cycle dequeue frees the head slot;
                    // only the dynamic check may use it.
                    if will_dequeue[fi] && s.queue.front().is_some() {
                        if self.local_issue {
                            used_slack = true;
                        } else {
                            self.counters.local_issue_bubbles += 1;
                            continue;
                        }
                    } else {
                        continue;
                    }
                }
                reqs.push(Req {
                    fetch: fi,
                    source: si,
                    bank: self.bank(s.reg, g),
                    denied: s.denied,
                    id: f.id,
                    used_slack,
                });
            }
        }
        // One read port per bank: highest denial count wins, then age.
        let mut winners: Vec<usize> = Vec::new();
        for i in 0..reqs.len() {
            let r = &reqs[i];
            let win = reqs.iter().enumerate().all(|(j, o)| {
                if o.bank != r.bank {
                    return true;
                }
                let a = (std::cmp::Reverse(r.denied), r.id, r.source);
                let b = (std::cmp::Reverse(o.denied), o.id, o.source);
                j == i || a <= b
            });
            if win {
                winners.push(i);
            }
        }
        for (i, r) in reqs.iter().enumerate() {
            let f = &mut self.fetches[r.fetch];
            let s = &mut f.sources[r.source];
            if winners.contains(&i) {
                let g = s.next_request;
                let lo = g * self.group_elems;
                let n = f.vl.saturating_sub(lo).min(self.group_elems) as usize;
                let words =
                    self.vrf[s.reg as usize][lo as usize..lo as usize + n].to_vec();
                s.pending = Some((g, words, cycle + 1));
                s.next_request += 1;
                s.denied = 0;
                self.counters.vrf_read_grants += 1;
                if r.used_slack {
                    self.counters.local_issue_saves += 1;
                }
            } else {
                s.denied += 1;
                self.counters.vrf_read_conflicts += 1;
                let g = s.next_request;
                let lo = g * self.group_elems;
                let n = (f.vl.saturating_sub(lo)).min(self.group_elems) as usize;
                out.conflict_mask |= self.lane_mask(lo, n.max(1));
            }
        }
    }

    fn start_pipe_groups(&mut self, cycle: u64, unit: UnitKind, out: &mut BackendOut) {
        let pipe = match unit {
            UnitKind::Mul => &mut self.mul_pipe,
            UnitKind::Alu => &mut self.alu_pipe,
            _ => unreachable!(),
        };
        let Some(&id) = pipe.queue.front() else { return };
        if pipe.skid.len() >= WB_SKID_CAP {
            return;
        }
        let Some(f) = self.fetches.iter_mut().find(|f| f.id == id) else { return };
        if !f.sources.iter().all(|s| s.head_ready(cycle)) {
            return;
        }
        let g = pipe.next_group;
        debug_assert!(f.sources.iter().all(|s| s.queue.front().unwrap().0 == g));
        let popped: Vec<Vec<u32>> = f.sources.iter_mut().map(SourceQueue::pop_head).collect();
        let lo = g * self.group_elems;
        let n = popped.iter().map(Vec::len).min().unwrap_or(0);
        let at = |v: &[u32], i: usize| f32::from_bits(v[i]);
        let mut words = Vec::with_capacity(n);
        for i in 0..n {
            let r = match f.op {
                Opcode::Vmul => at(&popped[0], i) * at(&popped[1], i),
                Opcode::Vadd => at(&popped[0], i) + at(&popped[1], i),
                Opcode::Vmacc => {
                    let p = at(&popped[1], i) * at(&popped[2], i);
                    at(&popped[0], i) + p
                }
                Opcode::Vmulvf => f.scalar.unwrap() * at(&popped[0], i),
                Opcode::Vmaccvf => {
                    let p = f.scalar.unwrap() * at(&popped[1], i);
                    at(&popped[0], i) + p
                }
                _ => unreachable!("non-pipeline opcode in pipe"),
            };
            words.push(r.to_bits());
        }
        let last = g + 1 == f.groups;
        let reg = self.dest_of[id as usize];
        pipe.pipe.push_back(PipeEntry { ready: cycle + pipe.latency, id, reg, group: g, lo, words, last });
        pipe.next_group += 1;
        self.counters.fu_group_starts += 1;
        out.fu_commit = true;
        if last {
            pipe.queue.pop_front();
            pipe.next_group = 0;
            f.drained = true;
        }
    }

    fn step_reduce(&mut self, cycle: u64, out: &mut BackendOut) {
        let Some(&id) = self.reduce.queue.front() else { return };
        let fi = self.fetches.iter().position(|f| f.id == id);
        let Some(fi) = fi else { return };
        match self.reduce.state {
            ReduceState::Idle => {
                let f = &mut self.fetches[fi];
                if !(f.sources[0].head_ready(cycle) && f.sources[1].head_ready(cycle)) {
                    return;
                }
                let init = f.sources[0].pop_head();
                let acc0 = f32::from_bits(init[0]);
                self.fold_group(fi, acc0, 0, cycle, out);
            }
            ReduceState::Folding { acc, groups_done } => {
                if !self.fetches[fi].sources[1].head_ready(cycle) {
                    return;
                }
                self.fold_group(fi, acc, groups_done, cycle, out);
            }
            ReduceState::Tail { acc, until } => {
                if cycle < until || self.reduce.skid.is_some() {
                    return;
                }
                let reg = self.dest_of[id as usize];
                self.reduce.skid = Some(PipeEntry {
                    ready: cycle,
                    id,
                    reg,
                    group: 0,
                    lo: 0,
                    words: vec![acc.to_bits()],
                    last: true,
                });
                self.reduce.queue.pop_front();
                self.reduce.state = ReduceState::Idle;
                self.fetches[fi].drained = true;
            }
        }
    }

    /// Fold one data group into the running sum; `g` is the group index
    /// being consumed.
    fn fold_group(&mut self, fi: usize, acc: f32, g: u32, cycle: u64, out: &mut BackendOut) {
        let group_elems = self.group_elems;
        let f = &mut self.fetches[fi];
        let data = f.sources[1].pop_head();
        let vals: Vec<f32> = data.iter().map(|&w| f32::from_bits(w)).collect();
        let new_acc = acc + tree_sum(&vals);
        let (groups, vl) = (f.groups, f.vl);
        self.counters.reduce_consumes += 1;
        out.fu_commit = true;
        out.busy_mask |= self.lane_mask(g * group_elems, vals.len());
        self.reduce.state = if g + 1 == groups {
            ReduceState::Tail { acc: new_acc, until: cycle + self.reduce.base + 2 * vl as u64 }
        } else {
            ReduceState::Folding { acc: new_acc, groups_done: g + 1 }
        };
    }

    fn drain_stores(&mut self, cycle: u64, out: &mut BackendOut) {
        for f in self.fetches.iter_mut() {
            if f.unit != UnitKind::Store || f.drained {
                continue;
            }
            if !f.sources[0].head_ready(cycle) {
                continue;
            }
            let (g, words, _) = f.sources[0].queue.pop_front().unwrap();
            out.store_data.push((f.id, words));
            if g + 1 == f.groups {
                f.drained = true;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::VectorInstruction as VI;

    fn backend(tog: crate::config::Toggles) -> Backend {
        let mut cfg = MachineConfig::default();
        cfg.toggles = tog;
        Backend::new(&cfg)
    }

    fn off() -> crate::config::Toggles {
        crate::config::Toggles::all_off()
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    /// Step until the given ids complete; returns completion cycles.
    fn run_until_done(
        b: &mut Backend,
        dispatches: &[(u64, InstrId, VI)],
        ids: &[InstrId],
        max: u64,
    ) -> Vec<(InstrId, u64)> {
        let mut trace = TraceLog::new(false);
        let mut done = Vec::new();
        let mut next_disp = 0;
        for t in 1..max {
            while next_disp < dispatches.len() && dispatches[next_disp].0 == t {
                let (_, id, ref i) = dispatches[next_disp];
                b.dispatch(id, i);
                next_disp += 1;
            }
            let out = b.step(t, &[], &mut trace);
            for ev in out.events {
                if let SeqEvent::Completed(id) = ev {
                    done.push((id, t));
                }
            }
            if ids.iter().all(|i| done.iter().any(|&(d, _)| d == *i)) {
                return done;
            }
        }
        panic!("instructions did not complete; got {done:?}");
    }

    #[test]
    fn vmul_writes_products_group_by_group() {
        let mut b = backend(off());
        let x: Vec<f32> = (0..32).map(|i| i as f32).collect();
        let y: Vec<f32> = (0..32).map(|i| (i + 1) as f32).collect();
        b.preset_reg(1, &bits(&x));
        b.preset_reg(2, &bits(&y));
        let done = run_until_done(&mut b, &[(1, 0, VI::vmul(3, 1, 2, 32))], &[0], 100);
        for i in 0..32 {
            assert_eq!(f32::from_bits(b.reg_words(3)[i]), x[i] * y[i]);
        }
        // 4 groups, reads granted from cycle 1, usable +1, start, latency 4.
        let (_, t) = done[0];
        assert!((8..=16).contains(&t), "completed at {t}");
    }

    #[test]
    fn chained_consumer_overlaps_producer() {
        // vadd consumes vmul's groups as they write back, well before a
        // full serialize would allow.
        let mut b = backend(off());
        b.preset_reg(1, &bits(&[1.0; 32]));
        b.preset_reg(2, &bits(&[2.0; 32]));
        let prog = [
            (1, 0, VI::vmul(3, 1, 2, 32)),
            (2, 1, VI::vadd(4, 3, 3, 32)),
        ];
        let done = run_until_done(&mut b, &prog, &[0, 1], 200);
        let t_mul = done.iter().find(|&&(id, _)| id == 0).unwrap().1;
        let t_add = done.iter().find(|&&(id, _)| id == 1).unwrap().1;
        assert!(t_add > t_mul, "consumer after producer");
        assert!(
            t_add <= t_mul + 8,
            "chaining broken: vadd finished {t_add}, vmul {t_mul}"
        );
        for i in 0..32 {
            assert_eq!(f32::from_bits(b.reg_words(4)[i]), 4.0);
        }
    }

    #[test]
    fn forwarding_cuts_register_file_reads() {
        let mk = |tog: crate::config::Toggles| {
            let mut b = backend(tog);
            b.preset_reg(1, &bits(&[1.5; 32]));
            b.preset_reg(2, &bits(&[2.0; 32]));
            let prog = [
                (1, 0, VI::vmul(3, 1, 2, 32)),
                (2, 1, VI::vadd(4, 3, 3, 32)),
            ];
            run_until_done(&mut b, &prog, &[0, 1], 200);
            b
        };
        let base = mk(off());
        let mut tog = off();
        tog.multi_source_forwarding = true;
        let fwd = mk(tog);
        assert!(fwd.counters.forward_hits > 0);
        assert!(
            fwd.counters.vrf_read_grants < base.counters.vrf_read_grants,
            "forwarding {} vs base {}",
            fwd.counters.vrf_read_grants,
            base.counters.vrf_read_grants
        );
        for i in 0..32 {
            assert_eq!(fwd.reg_words(4)[i], base.reg_words(4)[i]);
        }
    }

    #[test]
    fn macc_keeps_two_roundings() {
        let mut b = backend(off());
        let a = 1.0f32 + f32::EPSILON;
        let c = -(1.0f32 + 2f32.powi(-22));
        b.preset_reg(1, &bits(&[a; 8]));
        b.preset_reg(2, &bits(&[a; 8]));
        b.preset_reg(3, &bits(&[c; 8]));
        run_until_done(&mut b, &[(1, 0, VI::vmacc(3, 1, 2, 8))], &[0], 100);
        let got = f32::from_bits(b.reg_words(3)[0]);
        let expect = c + (a * a);
        assert_eq!(got, expect);
        assert_ne!(got, a.mul_add(a, c), "fused multiply-add would differ");
    }

    #[test]
    fn reduction_matches_golden_order_and_costs_tail_cycles() {
        let mut b = backend(off());
        let vals: Vec<f32> = (0..32).map(|i| (i as f32) * 0.37).collect();
        b.preset_reg(0, &bits(&[0.0; 32]));
        b.preset_reg(2, &bits(&vals));
        let done = run_until_done(&mut b, &[(1, 0, VI::vredsum(8, 0, 2, 32))], &[0], 300);
        let mut acc = 0.0f32;
        for g in 0..4 {
            acc += tree_sum(&vals[g * 8..(g + 1) * 8]);
        }
        assert_eq!(f32::from_bits(b.reg_words(8)[0]), acc);
        // 4 consume cycles plus a serial tail of base + 2*vl.
        let (_, t) = done[0];
        assert!(t as u32 >= 4 + 4 + 2 * 32, "tail too cheap: {t}");
    }

    #[test]
    fn store_data_drains_in_element_order() {
        let mut b = backend(off());
        let vals: Vec<f32> = (0..32).map(|i| i as f32).collect();
        b.preset_reg(5, &bits(&vals));
        b.dispatch(0, &VI::vstore(5, 0x1000, crate::isa::AccessPattern::UnitStride, 32));
        let mut trace = TraceLog::new(false);
        let mut words = Vec::new();
        let mut consumed_at = None;
        for t in 1..60 {
            let out = b.step(t, &[], &mut trace);
            for (id, w) in out.store_data {
                assert_eq!(id, 0);
                words.extend(w);
            }
            if out.events.contains(&SeqEvent::SourcesConsumed(0)) {
                consumed_at = Some(t);
            }
        }
        assert_eq!(words, bits(&vals));
        assert!(consumed_at.is_some(), "store never reported consumption");
    }

    #[test]
    fn load_delivery_writes_back_and_completes() {
        let mut b = backend(off());
        b.dispatch(0, &VI::vload(6, 0x1000, crate::isa::AccessPattern::UnitStride, 16));
        let mut trace = TraceLog::new(false);
        // Feed two groups over two cycles.
        let d0 = LoadGroupDelivery { id: 0, group: 0, elems: (0..8).map(|e| (e, e + 10)).collect() };
        let d1 = LoadGroupDelivery { id: 0, group: 1, elems: (8..16).map(|e| (e, e + 10)).collect() };
        let o0 = b.step(1, &[d0], &mut trace);
        assert!(o0.events.iter().all(|e| !matches!(e, SeqEvent::Completed(_))));
        let o1 = b.step(2, &[d1], &mut trace);
        assert!(o1.events.contains(&SeqEvent::Completed(0)));
        for e in 0..16 {
            assert_eq!(b.reg_words(6)[e], e as u32 + 10);
            assert!(b.reg_written(6, e as u32));
        }
        assert!(b.reg_elem(6, 3).is_some(), "owner cleared after write-back");
    }

    #[test]
    fn gather_index_visibility_follows_ownership() {
        let mut b = backend(off());
        b.preset_reg(3, &bits(&[7.0; 8]));
        assert!(b.reg_elem(3, 0).is_some());
        b.dispatch(0, &VI::vload(3, 0x1000, crate::isa::AccessPattern::UnitStride, 8));
        assert!(b.reg_elem(3, 0).is_none(), "in-flight writer must hide the group");
    }

    #[test]
    fn dynamic_local_issue_fills_the_drained_slot() {
        // Shallow queues: the producer outruns the consumer so its source
        // queue saturates; only the dynamic check may reuse the slot freed
        // in the same cycle.
        let run = |local: bool| {
            let mut cfg = MachineConfig::default();
            cfg.operand_queue_depth = 2;
            cfg.toggles = off();
            cfg.toggles.dynamic_local_issue = local;
            let mut b = Backend::new(&cfg);
            b.preset_reg(1, &bits(&[1.0; 32]));
            b.preset_reg(2, &bits(&[2.0; 32]));
            b.preset_reg(3, &bits(&[0.5; 32]));
            let prog = [
                (1, 0, VI::vmul(4, 1, 2, 32)),
                (2, 1, VI::vmacc(5, 4, 3, 32)),
            ];
            let done = run_until_done(&mut b, &prog, &[0, 1], 400);
            let t = done.iter().find(|&&(id, _)| id == 1).unwrap().1;
            (t, b.counters.local_issue_bubbles, b.counters.local_issue_saves)
        };
        let (t_off, bubbles, saves_off) = run(false);
        let (t_on, bubbles_on, saves) = run(true);
        assert_eq!(saves_off, 0);
        assert_eq!(bubbles_on, 0);
        assert!(bubbles > 0, "scenario failed to saturate the queue");
        assert!(saves > 0);
        assert!(t_on <= t_off);
    }
}
