//! Optional event capture for debugging and schedule comparisons.
//!
//! Collection is off by default; the simulator runs with a disabled log and
//! every record call is a cheap branch. When enabled, events accumulate in
//! memory and can be dumped as CSV.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusChannel {
    ReadAddr,
    WriteAddr,
    ReadData,
    WriteData,
    WriteResp,
}

impl BusChannel {
    fn as_str(self) -> &'static str {
        match self {
            BusChannel::ReadAddr => "ra",
            BusChannel::WriteAddr => "wa",
            BusChannel::ReadData => "rd",
            BusChannel::WriteData => "wd",
            BusChannel::WriteResp => "b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnClass {
    Demand,
    Prefetch,
    Write,
}

impl TxnClass {
    fn as_str(self) -> &'static str {
        match self {
            TxnClass::Demand => "demand",
            TxnClass::Prefetch => "prefetch",
            TxnClass::Write => "write",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BusEvent {
    pub cycle: u64,
    pub channel: BusChannel,
    pub class: TxnClass,
    pub addr: u64,
    pub beats: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct IssueEvent {
    pub cycle: u64,
    pub pc: usize,
    pub issued: bool,
    /// Stall reason when not issued ("war", "waw", "structural").
    pub blocked: Option<&'static str>,
}

/// One row per cycle: which lanes committed a result and which saw a
/// register-file bank conflict.
#[derive(Debug, Clone, Copy)]
pub struct LaneEvent {
    pub cycle: u64,
    pub busy_mask: u8,
    pub conflict_mask: u8,
}

#[derive(Debug, Default)]
pub struct TraceLog {
    pub enabled: bool,
    pub bus: Vec<BusEvent>,
    pub issue: Vec<IssueEvent>,
    pub lanes: Vec<LaneEvent>,
    /// Element addresses read from memory, one entry per word fetched,
    /// demand and prefetch alike. Order follows bus service order.
    pub read_elems: Vec<u64>,
}

impl TraceLog {
    pub fn new(enabled: bool) -> Self {
        TraceLog { enabled, ..Default::default() }
    }

    pub fn bus(&mut self, cycle: u64, channel: BusChannel, class: TxnClass, addr: u64, beats: u32) {
        if self.enabled {
            self.bus.push(BusEvent { cycle, channel, class, addr, beats });
        }
    }

    pub fn read_words(&mut self, addrs: impl IntoIterator<Item = u64>) {
        if self.enabled {
            self.read_elems.extend(addrs);
        }
    }

    pub fn issue(&mut self, ev: IssueEvent) {
        if self.enabled {
            self.issue.push(ev);
        }
    }

    pub fn lane(&mut self, ev: LaneEvent) {
        if self.enabled && (ev.busy_mask != 0 || ev.conflict_mask != 0) {
            self.lanes.push(ev);
        }
    }

    /// Sorted multiset of all element addresses read from memory.
    pub fn read_multiset(&self) -> Vec<u64> {
        let mut v = self.read_elems.clone();
        v.sort_unstable();
        v
    }

    pub fn bus_csv(&self) -> String {
        let mut s = String::from("cycle,channel,class,addr,beats\n");
        for e in &self.bus {
            let _ = writeln!(
                s,
                "{},{},{},0x{:x},{}",
                e.cycle,
                e.channel.as_str(),
                e.class.as_str(),
                e.addr,
                e.beats
            );
        }
        s
    }

    pub fn issue_csv(&self) -> String {
        let mut s = String::from("cycle,pc,issued,blocked\n");
        for e in &self.issue {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.cycle,
                e.pc,
                e.issued as u8,
                e.blocked.unwrap_or("")
            );
        }
        s
    }

    pub fn lanes_csv(&self) -> String {
        let mut s = String::from("cycle,busy_mask,conflict_mask\n");
        for e in &self.lanes {
            let _ = writeln!(s, "{},0x{:x},0x{:x}", e.cycle, e.busy_mask, e.conflict_mask);
        }
        s
    }

    pub fn write_csv_files(&self, dir: &Path, stem: &str) -> io::Result<()> {
        std::fs::write(dir.join(format!("{stem}_bus.csv")), self.bus_csv())?;
        std::fs::write(dir.join(format!("{stem}_issue.csv")), self.issue_csv())?;
        std::fs::write(dir.join(format!("{stem}_lanes.csv")), self.lanes_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disabled_log_records_nothing() {
        let mut t = TraceLog::new(false);
        t.bus(1, BusChannel::ReadAddr, TxnClass::Demand, 0x100, 8);
        t.read_words([0x100, 0x104]);
        t.issue(IssueEvent { cycle: 1, pc: 0, issued: true, blocked: None });
        assert!(t.bus.is_empty() && t.read_elems.is_empty() && t.issue.is_empty());
    }

    #[test]
    fn csv_round_trip_shape() {
        let mut t = TraceLog::new(true);
        t.bus(3, BusChannel::WriteAddr, TxnClass::Write, 0x2000, 1);
        t.issue(IssueEvent { cycle: 4, pc: 7, issued: false, blocked: Some("war") });
        let bus = t.bus_csv();
        assert!(bus.lines().nth(1).unwrap().contains("wa,write,0x2000,1"));
        let issue = t.issue_csv();
        assert!(issue.lines().nth(1).unwrap().ends_with("7,0,war"));
    }

    #[test]
    fn read_multiset_sorts() {
        let mut t = TraceLog::new(true);
        t.read_words([0x10, 0x4, 0x10]);
        assert_eq!(t.read_multiset(), vec![0x4, 0x10, 0x10]);
    }
}
