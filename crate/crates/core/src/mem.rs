//! Memory front end and memory model.
//!
//! The front end turns dispatched loads and stores into bus transactions:
//! descriptor intake, address expansion, transaction staging, and the
//! per-class queues feeding a single-ported memory. A stream prefetcher
//! watches unit-stride load descriptors and runs ahead of demand within the
//! bounds each instruction declares for its stream.
//!
//! Memory moves at most one data beat per cycle in total, regardless of how
//! many channels have work. Demand reads beat prefetch reads; reads and
//! writes alternate when both contend. Within a class, transactions issue
//! and return strictly in order.
//!
//! Four of the machine toggles live here:
//! * `decoupled_frontend` — descriptor buffering past the head instruction
//!   plus multi-beat burst transactions (off: one instruction occupies the
//!   front end until its last transaction issues, one beat per transaction).
//! * `rw_channel_split` — separate read and write queues (off: one shared
//!   in-order queue, where a store transaction waiting on data blocks
//!   everything behind it).
//! * `next_vl_prefetch` — the stream prefetcher.
//! * `early_read_release` — not handled here (see the sequencer), but index
//!   consumption for gathers is reported from expansion so it can apply.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use crate::config::MachineConfig;
use crate::isa::{AccessPattern, Opcode, VectorInstruction};
use crate::seq::{InstrId, SeqEvent};
use crate::trace::{BusChannel, TraceLog, TxnClass};

pub const BEAT_BYTES: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemFault {
    UnmappedRead { addr: u64 },
}

impl std::fmt::Display for MemFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MemFault::UnmappedRead { addr } => write!(f, "read of unmapped address 0x{addr:x}"),
        }
    }
}

impl std::error::Error for MemFault {}

/// One element group of load data, ready for register write-back.
#[derive(Debug, Clone)]
pub struct LoadGroupDelivery {
    pub id: InstrId,
    pub group: u32,
    /// (element index, raw word) pairs, ascending by element index.
    pub elems: Vec<(u32, u32)>,
}

/// Everything the front end tells the rest of the machine this cycle.
#[derive(Debug, Default)]
pub struct VlsuOut {
    pub deliveries: Vec<LoadGroupDelivery>,
    pub events: Vec<SeqEvent>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, serde::Serialize)]
pub struct VlsuCounters {
    pub demand_read_beats: u64,
    pub prefetch_read_beats: u64,
    pub write_beats: u64,
    pub read_txns: u64,
    pub write_txns: u64,
    pub prefetch_txns: u64,
    /// Demand element words served straight from the prefetch buffer.
    pub prefetch_hit_words: u64,
    /// Demand beats merged onto an in-flight prefetch transaction.
    pub prefetch_merge_beats: u64,
    /// Planned prefetch beats cancelled because demand got there first.
    pub prefetch_cancelled_beats: u64,
    pub descriptor_accepts: u64,
    pub expand_stall_cycles: u64,
}

/// One bus beat's worth of element addresses.
#[derive(Debug, Clone)]
struct BeatReq {
    /// Beat-aligned base for unit stride; the element address otherwise.
    key: u64,
    elems: Vec<(u32, u64)>,
}

impl BeatReq {
    fn lo(&self) -> u64 {
        self.elems.first().map(|&(_, a)| a).unwrap_or(self.key)
    }
    fn hi(&self) -> u64 {
        self.elems.last().map(|&(_, a)| a + 3).unwrap_or(self.key)
    }
}

#[derive(Debug, Clone)]
struct Transaction {
    class: TxnClass,
    id: InstrId,
    beats: Vec<BeatReq>,
    lo: u64,
    hi: u64,
    /// Stores: number of leading data elements that must have arrived from
    /// the lanes before the transaction may issue (store-and-forward).
    data_end_elem: u32,
}

impl Transaction {
    fn from_beats(class: TxnClass, id: InstrId, beats: Vec<BeatReq>) -> Self {
        let lo = beats.iter().map(BeatReq::lo).min().unwrap();
        let hi = beats.iter().map(BeatReq::hi).max().unwrap();
        let data_end_elem = beats
            .iter()
            .flat_map(|b| b.elems.iter().map(|&(e, _)| e + 1))
            .max()
            .unwrap_or(0);
        Transaction { class, id, beats, lo, hi, data_end_elem }
    }
}

#[derive(Debug)]
struct InFlightRead {
    txn: Transaction,
    issue_cycle: u64,
    beats_served: usize,
}

#[derive(Debug)]
struct InFlightWrite {
    txn: Transaction,
    issue_cycle: u64,
    beats_served: usize,
    /// Per beat, the words to write, resolved at issue.
    words: Vec<Vec<u32>>,
}

/// Single-ported memory: at most one data beat per cycle across all classes.
#[derive(Debug)]
struct MemoryPort {
    demand: VecDeque<InFlightRead>,
    prefetch: VecDeque<InFlightRead>,
    writes: VecDeque<InFlightWrite>,
    /// Round-robin tie-breaker; true means a read won last time.
    last_was_read: bool,
    /// (due cycle, store id) write responses in flight.
    resps: VecDeque<(u64, InstrId)>,
    read_latency: u64,
}

#[derive(Debug)]
enum ServedBeat {
    Demand { id: InstrId, elems: Vec<(u32, u32)> },
    Prefetch { key: u64, start: u64, words: Vec<u32> },
    Write,
}

impl MemoryPort {
    fn new(read_latency: u64) -> Self {
        MemoryPort {
            demand: VecDeque::new(),
            prefetch: VecDeque::new(),
            writes: VecDeque::new(),
            last_was_read: false,
            resps: VecDeque::new(),
            read_latency,
        }
    }

    fn read_candidate(&self, cycle: u64) -> Option<bool> {
        // Returns Some(is_demand); demand wins over prefetch whenever both
        // heads are eligible.
        let elig = |f: &InFlightRead| cycle >= f.issue_cycle + self.read_latency;
        if self.demand.front().is_some_and(elig) {
            return Some(true);
        }
        if self.prefetch.front().is_some_and(elig) {
            return Some(false);
        }
        None
    }

    fn write_candidate(&self, cycle: u64) -> bool {
        // Address-to-data turnaround of one cycle.
        self.writes.front().is_some_and(|w| cycle > w.issue_cycle)
    }

    /// Serve at most one data beat, touching backing memory.
    fn service(
        &mut self,
        cycle: u64,
        mem: &mut BTreeMap<u64, u32>,
        trace: &mut TraceLog,
        counters: &mut VlsuCounters,
    ) -> Result<Option<ServedBeat>, MemFault> {
        let read = self.read_candidate(cycle);
        let write = self.write_candidate(cycle);
        let take_read = match (read, write) {
            (None, false) => return Ok(None),
            (Some(_), false) => true,
            (None, true) => false,
            (Some(_), true) => !self.last_was_read,
        };
        if take_read {
            self.last_was_read = true;
            let is_demand = read.unwrap();
            let fifo = if is_demand { &mut self.demand } else { &mut self.prefetch };
            let f = fifo.front_mut().unwrap();
            let beat = &f.txn.beats[f.beats_served];
            let served = if is_demand {
                let mut elems = Vec::with_capacity(beat.elems.len());
                for &(e, addr) in &beat.elems {
                    let w = *mem.get(&addr).ok_or(MemFault::UnmappedRead { addr })?;
                    elems.push((e, w));
                }
                trace.read_words(beat.elems.iter().map(|&(_, a)| a));
                trace.bus(cycle, BusChannel::ReadData, TxnClass::Demand, beat.key, 1);
                counters.demand_read_beats += 1;
                ServedBeat::Demand { id: f.txn.id, elems }
            } else {
                // Prefetch beats fetch every covered word.
                let start = beat.lo();
                let end = beat.hi() + 1;
                let mut words = Vec::new();
                let mut addr = start;
                while addr < end {
                    words.push(*mem.get(&addr).ok_or(MemFault::UnmappedRead { addr })?);
                    trace.read_words([addr]);
                    addr += 4;
                }
                trace.bus(cycle, BusChannel::ReadData, TxnClass::Prefetch, beat.key, 1);
                counters.prefetch_read_beats += 1;
                ServedBeat::Prefetch { key: beat.key, start, words }
            };
            f.beats_served += 1;
            if f.beats_served == f.txn.beats.len() {
                fifo.pop_front();
            }
            Ok(Some(served))
        } else {
            self.last_was_read = false;
            let w = self.writes.front_mut().unwrap();
            let beat = &w.txn.beats[w.beats_served];
            for (&(_, addr), &word) in beat.elems.iter().zip(&w.words[w.beats_served]) {
                mem.insert(addr, word);
            }
            trace.bus(cycle, BusChannel::WriteData, TxnClass::Write, beat.key, 1);
            counters.write_beats += 1;
            w.beats_served += 1;
            if w.beats_served == w.txn.beats.len() {
                let id = w.txn.id;
                self.resps.push_back((cycle + self.read_latency, id));
                self.writes.pop_front();
            }
            Ok(Some(ServedBeat::Write))
        }
    }

    fn due_resps(&mut self, cycle: u64) -> Vec<InstrId> {
        let mut out = Vec::new();
        while let Some(&(due, id)) = self.resps.front() {
            if due <= cycle {
                out.push(id);
                self.resps.pop_front();
            } else {
                break;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Prefetcher

#[derive(Debug)]
enum PfState {
    Planned,
    InFlight { waiters: Vec<(InstrId, Vec<(u32, u64)>)>, poisoned: bool },
    Buffered { start: u64, words: Vec<u32> },
}

#[derive(Debug)]
struct PfBeat {
    start: u64,
    end: u64,
    state: PfState,
}

#[derive(Debug)]
struct StreamEntry {
    expected_next: u64,
    frontier: u64,
    stream_end: u64,
    last_use: u64,
}

const STREAM_TABLE_ENTRIES: usize = 4;

#[derive(Debug, Default)]
struct Prefetcher {
    streams: Vec<StreamEntry>,
    tracked: BTreeMap<u64, PfBeat>,
    planned: VecDeque<u64>,
    /// Beats issued or buffered, counted against `prefetch_buffer_beats`.
    held_beats: usize,
}

impl Prefetcher {
    /// Observe an accepted unit-stride load descriptor and plan the next
    /// interval of its stream, clipped to the instruction's declared end.
    fn observe(&mut self, base: u64, bytes: u64, stream_end: u64, cycle: u64) {
        let desc_end = base + bytes;
        let idx = match self.streams.iter().position(|s| s.expected_next == base) {
            Some(i) => i,
            None => {
                if self.streams.len() < STREAM_TABLE_ENTRIES {
                    self.streams.push(StreamEntry {
                        expected_next: base,
                        frontier: base,
                        stream_end,
                        last_use: cycle,
                    });
                    self.streams.len() - 1
                } else {
                    let i = self
                        .streams
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, s)| s.last_use)
                        .map(|(i, _)| i)
                        .unwrap();
                    self.streams[i] = StreamEntry {
                        expected_next: base,
                        frontier: base,
                        stream_end,
                        last_use: cycle,
                    };
                    i
                }
            }
        };
        let s = &mut self.streams[idx];
        s.last_use = cycle;
        s.stream_end = stream_end;
        s.expected_next = desc_end;
        // Plan [frontier, desc_end + bytes), beat-aligned, clipped to the
        // stream end. Partial beats only appear at the very end of a stream.
        let mut lo = s.frontier.max(desc_end);
        let mut hi = (desc_end + bytes).min(stream_end);
        if lo % BEAT_BYTES != 0 {
            lo = (lo | (BEAT_BYTES - 1)) + 1;
        }
        if hi % BEAT_BYTES != 0 && hi != stream_end {
            hi &= !(BEAT_BYTES - 1);
        }
        if lo >= hi {
            s.frontier = s.frontier.max(desc_end);
            return;
        }
        s.frontier = hi;
        let mut key = lo;
        while key < hi {
            let end = (key + BEAT_BYTES).min(hi);
            // A beat raced ahead by demand may already be tracked; skip it.
            if !self.tracked.contains_key(&key) {
                self.tracked.insert(key, PfBeat { start: key, end, state: PfState::Planned });
                self.planned.push_back(key);
            }
            key += BEAT_BYTES;
        }
    }

    /// Drop or poison tracked beats overlapping a staged write.
    fn invalidate_range(&mut self, lo: u64, hi: u64, counters: &mut VlsuCounters) {
        let keys: Vec<u64> = self
            .tracked
            .range(..=hi)
            .filter(|(_, b)| b.start <= hi && lo < b.end)
            .map(|(&k, _)| k)
            .collect();
        for k in keys {
            match &mut self.tracked.get_mut(&k).unwrap().state {
                PfState::Planned => {
                    self.tracked.remove(&k);
                    self.planned.retain(|&p| p != k);
                    counters.prefetch_cancelled_beats += 1;
                }
                PfState::InFlight { poisoned, .. } => *poisoned = true,
                PfState::Buffered { .. } => {
                    self.tracked.remove(&k);
                    self.held_beats -= 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Expansion

#[derive(Debug)]
struct Descriptor {
    id: InstrId,
    instr: VectorInstruction,
}

#[derive(Debug)]
struct ActiveExpand {
    id: InstrId,
    instr: VectorInstruction,
    next_elem: u32,
}

#[derive(Debug)]
struct LoadAsm {
    id: InstrId,
    vl: u32,
    group_elems: u32,
    words: Vec<Option<u32>>,
    next_group: u32,
}

/// The vector load/store unit: front end plus memory port.
#[derive(Debug)]
pub struct Vlsu {
    decoupled: bool,
    split: bool,
    prefetch_on: bool,
    burst_beats: usize,
    /// The prefetch engine owns its transaction generation and always
    /// bursts, independent of the front-end coupling mode.
    pf_burst: usize,
    desc_buffer: usize,
    read_q_cap: usize,
    write_q_cap: usize,
    coupled_q_cap: usize,
    max_demand: usize,
    max_prefetch: usize,
    pf_capacity: usize,
    group_elems: u32,

    input: Option<(InstrId, VectorInstruction, u64)>,
    desc_q: VecDeque<Descriptor>,
    active: Option<ActiveExpand>,
    staging: Option<(bool, Vec<BeatReq>, InstrId)>,
    /// Staging holds a finished transaction that must flush before any
    /// further expansion.
    staging_sealed: bool,
    /// Completed transaction waiting for queue space.
    flush_pending: Option<Transaction>,
    read_q: VecDeque<Transaction>,
    write_q: VecDeque<Transaction>,
    shared_q: VecDeque<Transaction>,

    port: MemoryPort,
    pf: Prefetcher,

    loads: VecDeque<LoadAsm>,
    /// Buffered-hit deliveries waiting out the one-cycle buffer read.
    arrivals: VecDeque<(u64, InstrId, Vec<(u32, u32)>)>,
    store_words: BTreeMap<InstrId, Vec<u32>>,
    /// Store id -> write transactions not yet responded.
    store_resps: BTreeMap<InstrId, u32>,
    /// Store id -> write transactions not yet issued (for completion safety).
    store_unissued: BTreeMap<InstrId, u32>,

    pub counters: VlsuCounters,
}

impl Vlsu {
    pub fn new(cfg: &MachineConfig) -> Self {
        Vlsu {
            decoupled: cfg.toggles.decoupled_frontend,
            split: cfg.toggles.rw_channel_split,
            prefetch_on: cfg.toggles.next_vl_prefetch,
            burst_beats: if cfg.toggles.decoupled_frontend { cfg.burst_beats } else { 1 },
            pf_burst: cfg.burst_beats,
            desc_buffer: if cfg.toggles.decoupled_frontend { cfg.descriptor_buffer } else { 1 },
            read_q_cap: cfg.read_queue,
            write_q_cap: cfg.write_queue,
            coupled_q_cap: cfg.coupled_queue,
            max_demand: cfg.max_outstanding_demand,
            max_prefetch: cfg.max_outstanding_prefetch,
            pf_capacity: cfg.prefetch_buffer_beats,
            group_elems: cfg.elems_per_group(),
            input: None,
            desc_q: VecDeque::new(),
            active: None,
            staging: None,
            staging_sealed: false,
            flush_pending: None,
            read_q: VecDeque::new(),
            write_q: VecDeque::new(),
            shared_q: VecDeque::new(),
            port: MemoryPort::new(cfg.read_latency),
            pf: Prefetcher::default(),
            loads: VecDeque::new(),
            arrivals: VecDeque::new(),
            store_words: BTreeMap::new(),
            store_resps: BTreeMap::new(),
            store_unissued: BTreeMap::new(),
            counters: VlsuCounters::default(),
        }
    }

    /// Whether the sequencer may hand over another memory instruction.
    pub fn can_accept(&self) -> bool {
        if self.input.is_some() {
            return false;
        }
        if self.decoupled {
            self.desc_q.len() < self.desc_buffer
        } else {
            // Coupled: the front end is occupied until the previous
            // instruction's transactions have left it entirely.
            self.desc_q.is_empty()
                && self.active.is_none()
                && self.staging.is_none()
                && self.flush_pending.is_none()
                && (self.split || self.shared_q.is_empty())
        }
    }

    pub fn dispatch(&mut self, id: InstrId, instr: &VectorInstruction, cycle: u64) {
        debug_assert!(self.can_accept());
        debug_assert!(instr.opcode.is_memory());
        debug_assert!(
            !(instr.opcode == Opcode::Vstore
                && matches!(instr.access, Some(AccessPattern::Indexed { .. }))),
            "indexed stores are not modeled"
        );
        self.input = Some((id, instr.clone(), cycle));
        if instr.opcode == Opcode::Vload {
            self.loads.push_back(LoadAsm {
                id,
                vl: instr.vl,
                group_elems: self.group_elems,
                words: vec![None; instr.vl as usize],
                next_group: 0,
            });
        } else {
            self.store_words.insert(id, Vec::with_capacity(instr.vl as usize));
            self.store_resps.insert(id, 0);
            self.store_unissued.insert(id, 0);
        }
    }

    /// Store data from the lanes, one element group at a time, in order.
    pub fn push_store_data(&mut self, id: InstrId, words: Vec<u32>) {
        self.store_words.get_mut(&id).expect("store data for unknown id").extend(words);
    }

    /// True while any demand-class read transaction is outstanding.
    pub fn demand_read_in_flight(&self) -> bool {
        !self.port.demand.is_empty()
    }

    pub fn idle(&self) -> bool {
        self.input.is_none()
            && self.desc_q.is_empty()
            && self.active.is_none()
            && self.staging.is_none()
            && self.flush_pending.is_none()
            && self.read_q.is_empty()
            && self.write_q.is_empty()
            && self.shared_q.is_empty()
            && self.port.demand.is_empty()
            && self.port.writes.is_empty()
            && self.port.resps.is_empty()
            && self.loads.is_empty()
            && self.arrivals.is_empty()
    }

    fn all_write_ranges(&self) -> Vec<(u64, u64)> {
        let staged = self
            .staging
            .iter()
            .filter(|(is_store, ..)| *is_store)
            .flat_map(|(_, beats, _)| beats.iter().map(|b| (b.lo(), b.hi())));
        self.write_q
            .iter()
            .chain(self.shared_q.iter().filter(|t| t.class == TxnClass::Write))
            .chain(self.flush_pending.iter().filter(|t| t.class == TxnClass::Write))
            .map(|t| (t.lo, t.hi))
            .chain(self.port.writes.iter().map(|w| (w.txn.lo, w.txn.hi)))
            .chain(staged)
            .collect()
    }

    fn read_blocked_by_write(&self, lo: u64, hi: u64) -> bool {
        self.all_write_ranges().iter().any(|&(wl, wh)| wl <= hi && lo <= wh)
    }

    /// One cycle of the whole unit. `reg_elem` resolves an index-register
    /// element to its value once no in-flight writer still owns it.
    pub fn step(
        &mut self,
        cycle: u64,
        mem: &mut BTreeMap<u64, u32>,
        reg_elem: &dyn Fn(crate::isa::RegId, u32) -> Option<u32>,
        trace: &mut TraceLog,
    ) -> Result<VlsuOut, MemFault> {
        let mut out = VlsuOut::default();

        // 1. Memory port: serve one beat, then deliver due write responses.
        match self.port.service(cycle, mem, trace, &mut self.counters)? {
            Some(ServedBeat::Demand { id, elems }) => self.fill_load(id, &elems),
            Some(ServedBeat::Prefetch { key, start, words }) => {
                let beat = self.pf.tracked.remove(&key).expect("untracked prefetch return");
                let PfState::InFlight { waiters, poisoned } = beat.state else {
                    panic!("prefetch return in state other than in-flight");
                };
                let mut merged = Vec::new();
                for (wid, elems) in waiters {
                    let filled: Vec<(u32, u32)> = elems
                        .iter()
                        .map(|&(e, addr)| (e, words[((addr - start) / 4) as usize]))
                        .collect();
                    merged.push((wid, filled));
                }
                if merged.is_empty() && !poisoned {
                    self.pf.tracked.insert(
                        key,
                        PfBeat { start, end: beat.end, state: PfState::Buffered { start, words } },
                    );
                } else {
                    self.pf.held_beats -= 1;
                }
                for (wid, elems) in merged {
                    self.fill_load(wid, &elems);
                }
            }
            Some(ServedBeat::Write) | None => {}
        }
        for id in self.port.due_resps(cycle) {
            let left = self.store_resps.get_mut(&id).expect("resp for unknown store");
            *left -= 1;
            if *left == 0 && self.store_unissued[&id] == 0 && self.store_done_expanding(id) {
                self.finish_store(id, &mut out);
            }
        }

        // 2. Buffered-hit arrivals that finished their buffer read.
        while self.arrivals.front().is_some_and(|&(ready, ..)| ready <= cycle) {
            let (_, id, elems) = self.arrivals.pop_front().unwrap();
            self.fill_load(id, &elems);
        }

        // 3. In-order group delivery, at most one group per load per cycle.
        let mut done = Vec::new();
        for asm in self.loads.iter_mut() {
            let lo = asm.next_group * asm.group_elems;
            if lo >= asm.vl {
                continue;
            }
            let hi = (lo + asm.group_elems).min(asm.vl);
            if (lo..hi).all(|e| asm.words[e as usize].is_some()) {
                let elems =
                    (lo..hi).map(|e| (e, asm.words[e as usize].unwrap())).collect::<Vec<_>>();
                out.deliveries.push(LoadGroupDelivery { id: asm.id, group: asm.next_group, elems });
                asm.next_group += 1;
                if asm.next_group * asm.group_elems >= asm.vl {
                    done.push(asm.id);
                }
            }
        }
        self.loads.retain(|a| !done.contains(&a.id));

        // 4. Descriptor intake (one cycle after dispatch).
        if let Some((_, _, t0)) = self.input {
            if cycle > t0 && self.desc_q.len() < self.desc_buffer {
                let (id, instr, _) = self.input.take().unwrap();
                self.counters.descriptor_accepts += 1;
                if self.prefetch_on && instr.opcode == Opcode::Vload {
                    if let (Some(AccessPattern::UnitStride), Some(end)) =
                        (instr.access, instr.stream_end)
                    {
                        let base = instr.base_address.unwrap();
                        self.pf.observe(base, instr.vl as u64 * 4, end, cycle);
                    }
                }
                self.desc_q.push_back(Descriptor { id, instr });
            }
        }

        // 5. Expansion: retry parked flushes, then expand one beat's worth.
        if let Some(txn) = self.flush_pending.take() {
            self.enqueue_txn(txn);
        }
        if self.flush_pending.is_none() && self.staging_sealed && self.staging.is_some() {
            self.flush_staging();
        }
        if self.flush_pending.is_none() && !(self.staging_sealed && self.staging.is_some()) {
            self.expand_one(cycle, reg_elem, &mut out)?;
        } else {
            self.counters.expand_stall_cycles += 1;
        }

        // 6. Transaction issue: one read-channel and one write-channel
        //    handshake per cycle (a single shared handshake when not split).
        self.issue_txns(cycle, trace, &mut out);

        Ok(out)
    }

    fn store_done_expanding(&self, id: InstrId) -> bool {
        if self.input.as_ref().is_some_and(|(i, ..)| *i == id) {
            return false;
        }
        if self.desc_q.iter().any(|d| d.id == id) {
            return false;
        }
        if self.active.as_ref().is_some_and(|a| a.id == id) {
            return false;
        }
        if self.staging.as_ref().is_some_and(|(_, _, sid)| *sid == id) {
            return false;
        }
        true
    }

    fn finish_store(&mut self, id: InstrId, out: &mut VlsuOut) {
        self.store_words.remove(&id);
        self.store_resps.remove(&id);
        self.store_unissued.remove(&id);
        out.events.push(SeqEvent::Completed(id));
    }

    fn fill_load(&mut self, id: InstrId, elems: &[(u32, u32)]) {
        if let Some(asm) = self.loads.iter_mut().find(|a| a.id == id) {
            for &(e, w) in elems {
                asm.words[e as usize] = Some(w);
            }
        }
    }

    /// Absorb one expanded beat into staging. Callers guarantee no flush is
    /// parked, so at most one transaction can end up parked per cycle and
    /// the beat is always absorbed.
    fn stage_beat(&mut self, is_store: bool, id: InstrId, beat: BeatReq) {
        debug_assert!(self.flush_pending.is_none());
        match &mut self.staging {
            Some((sstore, beats, sid)) if *sid == id && *sstore == is_store => {
                let contiguous = beats.last().unwrap().key + BEAT_BYTES == beat.key;
                let full = beats.last().unwrap().elems.len() == (BEAT_BYTES / 4) as usize;
                if contiguous && full && beats.len() < self.burst_beats {
                    beats.push(beat);
                    if beats.len() == self.burst_beats {
                        self.seal_staging();
                    }
                } else {
                    self.flush_staging();
                    self.staging = Some((is_store, vec![beat], id));
                }
            }
            Some(_) => {
                self.flush_staging();
                self.staging = Some((is_store, vec![beat], id));
            }
            None => {
                self.staging = Some((is_store, vec![beat], id));
            }
        }
        if self.burst_beats == 1 {
            self.seal_staging();
        }
    }

    /// The staged transaction is finished; flush it now if possible, or
    /// mark it so the next cycles retry before expanding further.
    fn seal_staging(&mut self) {
        if self.staging.is_none() {
            return;
        }
        if self.flush_pending.is_none() {
            self.flush_staging();
        } else {
            self.staging_sealed = true;
        }
    }

    fn flush_staging(&mut self) {
        if let Some((is_store, beats, id)) = self.staging.take() {
            self.staging_sealed = false;
            let class = if is_store { TxnClass::Write } else { TxnClass::Demand };
            let txn = Transaction::from_beats(class, id, beats);
            if is_store {
                *self.store_unissued.get_mut(&id).unwrap() += 1;
                self.pf.invalidate_range(txn.lo, txn.hi, &mut self.counters);
            }
            self.enqueue_txn(txn);
        }
    }

    fn enqueue_txn(&mut self, txn: Transaction) {
        let (q, cap) = if !self.split {
            (&mut self.shared_q, self.coupled_q_cap)
        } else if txn.class == TxnClass::Write {
            (&mut self.write_q, self.write_q_cap)
        } else {
            (&mut self.read_q, self.read_q_cap)
        };
        if q.len() < cap {
            q.push_back(txn);
        } else {
            debug_assert!(self.flush_pending.is_none());
            self.flush_pending = Some(txn);
        }
    }

    fn expand_one(
        &mut self,
        cycle: u64,
        reg_elem: &dyn Fn(crate::isa::RegId, u32) -> Option<u32>,
        out: &mut VlsuOut,
    ) -> Result<(), MemFault> {
        if self.active.is_none() {
            if let Some(d) = self.desc_q.pop_front() {
                self.active = Some(ActiveExpand { id: d.id, instr: d.instr, next_elem: 0 });
            } else {
                return Ok(());
            }
        }
        let a = self.active.as_mut().unwrap();
        let is_store = a.instr.opcode == Opcode::Vstore;
        let vl = a.instr.vl;
        if vl == 0 {
            let id = a.id;
            self.active = None;
            if is_store {
                // Degenerate store: nothing to write, complete immediately.
                if self.store_resps[&id] == 0 {
                    self.finish_store(id, out);
                }
            } else {
                out.events.push(SeqEvent::Completed(id));
            }
            return Ok(());
        }
        let base = a.instr.base_address.expect("memory instruction without base");
        let mut index_consumed = false;
        let beat = match a.instr.access.expect("memory instruction without pattern") {
            AccessPattern::UnitStride => {
                let mut elems = Vec::new();
                let first = base + a.next_elem as u64 * 4;
                let key = first & !(BEAT_BYTES - 1);
                let mut e = a.next_elem;
                while e < vl && elems.len() < (BEAT_BYTES / 4) as usize {
                    let addr = base + e as u64 * 4;
                    if addr & !(BEAT_BYTES - 1) != key {
                        break;
                    }
                    elems.push((e, addr));
                    e += 1;
                }
                a.next_elem = e;
                BeatReq { key, elems }
            }
            AccessPattern::Strided { stride } => {
                let addr = (base as i64 + a.next_elem as i64 * stride) as u64;
                let e = a.next_elem;
                a.next_elem += 1;
                BeatReq { key: addr, elems: vec![(e, addr)] }
            }
            AccessPattern::Indexed { index_reg } => {
                let e = a.next_elem;
                let Some(idx_word) = reg_elem(index_reg, e) else {
                    // Index element still owned by an in-flight writer.
                    self.counters.expand_stall_cycles += 1;
                    return Ok(());
                };
                let addr = base + (idx_word as u64) * 4;
                a.next_elem += 1;
                index_consumed = a.next_elem == vl;
                BeatReq { key: addr, elems: vec![(e, addr)] }
            }
        };
        let id = a.id;
        let done = a.next_elem >= vl;
        if index_consumed {
            // Whole index register consumed by expansion.
            out.events.push(SeqEvent::SourcesConsumed(id));
        }

        // Demand reads consult the prefetch buffer before becoming
        // transactions of their own.
        if !is_store && self.prefetch_on {
            if let Some(pf_beat) = self.pf.tracked.get_mut(&beat.key) {
                let covers =
                    beat.elems.iter().all(|&(_, adr)| adr >= pf_beat.start && adr < pf_beat.end);
                match &mut pf_beat.state {
                    PfState::Buffered { start, words } if covers => {
                        let start = *start;
                        let elems: Vec<(u32, u32)> = beat
                            .elems
                            .iter()
                            .map(|&(e, adr)| (e, words[((adr - start) / 4) as usize]))
                            .collect();
                        self.counters.prefetch_hit_words += elems.len() as u64;
                        self.pf.tracked.remove(&beat.key);
                        self.pf.held_beats -= 1;
                        self.arrivals.push_back((cycle + 1, id, elems));
                        self.finish_expand(done);
                        return Ok(());
                    }
                    PfState::InFlight { waiters, poisoned } if covers && !*poisoned => {
                        waiters.push((id, beat.elems.clone()));
                        self.counters.prefetch_merge_beats += 1;
                        self.finish_expand(done);
                        return Ok(());
                    }
                    PfState::Planned => {
                        // Demand won the race: drop the plan, fetch on demand.
                        self.pf.tracked.remove(&beat.key);
                        self.pf.planned.retain(|&p| p != beat.key);
                        self.counters.prefetch_cancelled_beats += 1;
                    }
                    _ => {}
                }
            }
        }

        self.stage_beat(is_store, id, beat);
        self.finish_expand(done);
        Ok(())
    }

    fn finish_expand(&mut self, done: bool) {
        if done {
            self.active = None;
            self.seal_staging();
        }
    }

    fn issue_txns(&mut self, cycle: u64, trace: &mut TraceLog, _out: &mut VlsuOut) {
        if self.split {
            // Prefetch only takes read-channel cycles demand leaves idle.
            if !self.issue_read_channel(cycle, trace) {
                self.issue_prefetch(cycle, trace);
            }
            self.issue_write_channel(cycle, trace);
        } else {
            // One shared handshake. A store at the head that has not yet
            // gathered its data blocks every demand transaction behind it;
            // the prefetch engine may still use the otherwise-idle cycle.
            let issued = match self.shared_q.front() {
                Some(t) if t.class == TxnClass::Write => {
                    if self.write_data_ready(t) && self.port.writes.len() < self.max_demand {
                        let txn = self.shared_q.pop_front().unwrap();
                        self.issue_write(txn, cycle, trace);
                        true
                    } else {
                        false
                    }
                }
                Some(t) => {
                    if self.port.demand.len() < self.max_demand
                        && !self.read_blocked_by_write(t.lo, t.hi)
                    {
                        let txn = self.shared_q.pop_front().unwrap();
                        self.issue_demand_read(txn, cycle, trace);
                        true
                    } else {
                        false
                    }
                }
                None => false,
            };
            if !issued {
                self.issue_prefetch(cycle, trace);
            }
        }
    }

    fn issue_read_channel(&mut self, cycle: u64, trace: &mut TraceLog) -> bool {
        if let Some(t) = self.read_q.front() {
            if self.port.demand.len() < self.max_demand
                && !self.read_blocked_by_write(t.lo, t.hi)
            {
                let txn = self.read_q.pop_front().unwrap();
                self.issue_demand_read(txn, cycle, trace);
                return true;
            }
        }
        false
    }

    fn issue_write_channel(&mut self, cycle: u64, trace: &mut TraceLog) {
        if let Some(t) = self.write_q.front() {
            if self.write_data_ready(t) && self.port.writes.len() < self.max_demand {
                let txn = self.write_q.pop_front().unwrap();
                self.issue_write(txn, cycle, trace);
            }
        }
    }

    fn write_data_ready(&self, t: &Transaction) -> bool {
        self.store_words
            .get(&t.id)
            .is_some_and(|w| w.len() as u32 >= t.data_end_elem)
    }

    fn issue_demand_read(&mut self, txn: Transaction, cycle: u64, trace: &mut TraceLog) {
        trace.bus(cycle, BusChannel::ReadAddr, TxnClass::Demand, txn.lo, txn.beats.len() as u32);
        self.counters.read_txns += 1;
        self.port.demand.push_back(InFlightRead { txn, issue_cycle: cycle, beats_served: 0 });
    }

    fn issue_write(&mut self, txn: Transaction, cycle: u64, trace: &mut TraceLog) {
        trace.bus(cycle, BusChannel::WriteAddr, TxnClass::Write, txn.lo, txn.beats.len() as u32);
        self.counters.write_txns += 1;
        let data = &self.store_words[&txn.id];
        let words: Vec<Vec<u32>> = txn
            .beats
            .iter()
            .map(|b| b.elems.iter().map(|&(e, _)| data[e as usize]).collect())
            .collect();
        *self.store_unissued.get_mut(&txn.id).unwrap() -= 1;
        *self.store_resps.get_mut(&txn.id).unwrap() += 1;
        self.port.writes.push_back(InFlightWrite { txn, issue_cycle: cycle, beats_served: 0, words });
    }

    fn issue_prefetch(&mut self, cycle: u64, trace: &mut TraceLog) {
        if !self.prefetch_on || self.pf.planned.is_empty() {
            return;
        }
        if self.port.prefetch.len() >= self.max_prefetch {
            return;
        }
        // Gather a contiguous run of planned beats, up to one burst, within
        // the buffer budget.
        let budget = self.pf_capacity.saturating_sub(self.pf.held_beats);
        if budget == 0 {
            return;
        }
        let mut keys = Vec::new();
        let mut next = *self.pf.planned.front().unwrap();
        for &k in self.pf.planned.iter() {
            if k != next || keys.len() == self.pf_burst.min(budget) {
                break;
            }
            keys.push(k);
            next = k + BEAT_BYTES;
        }
        let beats: Vec<BeatReq> = keys
            .iter()
            .map(|&k| {
                let b = &self.pf.tracked[&k];
                let elems = (0..((b.end - b.start) / 4))
                    .map(|i| (i as u32, b.start + i * 4))
                    .collect();
                BeatReq { key: k, elems }
            })
            .collect();
        let txn = Transaction::from_beats(TxnClass::Prefetch, u32::MAX, beats);
        if self.read_blocked_by_write(txn.lo, txn.hi) {
            return;
        }
        for &k in &keys {
            self.pf.planned.pop_front();
            self.pf.tracked.get_mut(&k).unwrap().state =
                PfState::InFlight { waiters: Vec::new(), poisoned: false };
            self.pf.held_beats += 1;
        }
        trace.bus(cycle, BusChannel::ReadAddr, TxnClass::Prefetch, txn.lo, txn.beats.len() as u32);
        self.counters.prefetch_txns += 1;
        self.port.prefetch.push_back(InFlightRead { txn, issue_cycle: cycle, beats_served: 0 });
    }
}
