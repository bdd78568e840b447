//! Machine description and optimization toggles.
//!
//! Defaults describe the reference machine: VLEN=1024, DLEN=256 (4 lanes of
//! 64-bit datapath), a 128-bit memory bus, and a 30-cycle memory read
//! latency. One simulated cycle is 1 ns, so FLOP/cycle and GFLOPS coincide.

use serde::{Deserialize, Serialize};
use std::fmt;

/// The six independently switchable backend/front-end optimizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Decouple descriptor acceptance from address expansion and transaction
    /// issue, and generate multi-beat burst transactions.
    pub decoupled_frontend: bool,
    /// Separate read and write transaction queues with independent address
    /// channels, so store data assembly never blocks a ready read.
    pub rw_channel_split: bool,
    /// Fetch the next vector-length interval of a predictable stream into a
    /// small buffer while the current interval is being served.
    pub next_vl_prefetch: bool,
    /// Release read dependences once an instruction has consumed all its
    /// source element groups instead of at completion.
    pub early_read_release: bool,
    /// Let an operand requester reuse its slot in the same cycle the
    /// downstream queue frees one.
    pub dynamic_local_issue: bool,
    /// Capture in-flight results off the write-back bus into operand queues,
    /// cancelling the corresponding register-file read.
    pub multi_source_forwarding: bool,
}

impl Toggles {
    pub fn all_on() -> Self {
        Toggles {
            decoupled_frontend: true,
            rw_channel_split: true,
            next_vl_prefetch: true,
            early_read_release: true,
            dynamic_local_issue: true,
            multi_source_forwarding: true,
        }
    }

    pub fn all_off() -> Self {
        Toggles::default()
    }

    /// Toggle set encoded as six bits in field declaration order, bit 0 =
    /// `decoupled_frontend`. Used by exhaustive sweeps.
    pub fn from_bits(bits: u8) -> Self {
        Toggles {
            decoupled_frontend: bits & 0x01 != 0,
            rw_channel_split: bits & 0x02 != 0,
            next_vl_prefetch: bits & 0x04 != 0,
            early_read_release: bits & 0x08 != 0,
            dynamic_local_issue: bits & 0x10 != 0,
            multi_source_forwarding: bits & 0x20 != 0,
        }
    }

    pub fn to_bits(self) -> u8 {
        (self.decoupled_frontend as u8)
            | (self.rw_channel_split as u8) << 1
            | (self.next_vl_prefetch as u8) << 2
            | (self.early_read_release as u8) << 3
            | (self.dynamic_local_issue as u8) << 4
            | (self.multi_source_forwarding as u8) << 5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    /// Vector register length in bits.
    pub vlen: u32,
    /// Combined lane datapath width in bits; lanes = dlen/64.
    pub dlen: u32,
    /// Memory bus width in bits.
    pub bus_width: u32,
    /// Cycles from read address issue to first data beat eligibility. Write
    /// responses use the same latency after the last data beat.
    pub read_latency: u64,
    /// Decoupled front-end descriptor buffer depth.
    pub descriptor_buffer: usize,
    /// Read transaction queue depth (split front end).
    pub read_queue: usize,
    /// Write transaction queue depth (split front end).
    pub write_queue: usize,
    /// Transaction queue depth of the coupled (baseline) front end.
    pub coupled_queue: usize,
    /// Maximum beats per burst transaction when the decoupled front end
    /// coalesces; the coupled front end issues single-beat transactions.
    pub burst_beats: usize,
    /// Prefetch buffer capacity in bus beats.
    pub prefetch_buffer_beats: usize,
    /// Outstanding demand-class transactions per direction.
    pub max_outstanding_demand: usize,
    /// Outstanding prefetch-class read transactions.
    pub max_outstanding_prefetch: usize,
    /// Prefetch look-ahead in vector-length intervals.
    pub prefetch_distance: usize,
    /// Per-source operand queue depth in element groups.
    pub operand_queue_depth: usize,
    /// Register-file banks per lane, each with one read and one write port.
    pub vrf_banks: usize,
    pub mul_latency: u64,
    pub add_latency: u64,
    pub macc_latency: u64,
    /// Reduction cost: `reduce_base + 2*vl` cycles after the last consumed
    /// group, on top of one consume cycle per element group.
    pub reduce_base: u64,
    /// Global in-flight instruction window.
    pub inflight_window: usize,
    /// In-flight instructions per functional-unit kind.
    pub per_kind_inflight: usize,
    pub toggles: Toggles,
    /// Seeds kernel input data and sparse pattern generation.
    pub seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            vlen: 1024,
            dlen: 256,
            bus_width: 128,
            read_latency: 30,
            descriptor_buffer: 4,
            read_queue: 8,
            write_queue: 8,
            coupled_queue: 2,
            burst_beats: 8,
            prefetch_buffer_beats: 16,
            max_outstanding_demand: 8,
            max_outstanding_prefetch: 4,
            prefetch_distance: 1,
            operand_queue_depth: 4,
            vrf_banks: 8,
            mul_latency: 4,
            add_latency: 2,
            macc_latency: 4,
            reduce_base: 4,
            inflight_window: 8,
            per_kind_inflight: 2,
            toggles: Toggles::default(),
            seed: 0xC0FFEE,
        }
    }
}

impl MachineConfig {
    pub fn default_with_toggles(toggles: Toggles) -> Self {
        MachineConfig {
            toggles,
            ..MachineConfig::default()
        }
    }

    pub fn lanes(&self) -> u32 {
        self.dlen / 64
    }

    /// Elements of the configured 32-bit width processed per cycle across
    /// all lanes; the unit of chaining ("element group").
    pub fn elems_per_group(&self) -> u32 {
        self.dlen / 32
    }

    pub fn vlmax(&self) -> u32 {
        self.vlen / 32
    }

    pub fn beat_bytes(&self) -> u64 {
        (self.bus_width / 8) as u64
    }

    pub fn elems_per_beat(&self) -> u32 {
        self.bus_width / 32
    }

    /// Peak FLOP/cycle: one multiply-accumulate per element slot.
    pub fn peak_flops_per_cycle(&self) -> f64 {
        2.0 * self.elems_per_group() as f64
    }

    /// Peak memory bandwidth in bytes per cycle.
    pub fn peak_bytes_per_cycle(&self) -> f64 {
        self.beat_bytes() as f64
    }

    /// Check structural invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |field: &str, why: String| {
            Err(ConfigError::Invalid { field: field.to_string(), why })
        };
        if self.dlen == 0 || self.dlen % 64 != 0 {
            return err("dlen", format!("{} is not a positive multiple of 64", self.dlen));
        }
        if self.vlen < self.dlen {
            return err("vlen", format!("{} is smaller than dlen {}", self.vlen, self.dlen));
        }
        if self.vlen % self.dlen != 0 {
            return err("vlen", format!("{} is not a multiple of dlen {}", self.vlen, self.dlen));
        }
        if self.bus_width == 0 || self.bus_width % 32 != 0 {
            return err("bus_width", format!("{} is not a positive multiple of 32", self.bus_width));
        }
        for (field, v) in [
            ("descriptor_buffer", self.descriptor_buffer),
            ("read_queue", self.read_queue),
            ("write_queue", self.write_queue),
            ("coupled_queue", self.coupled_queue),
            ("burst_beats", self.burst_beats),
            ("prefetch_buffer_beats", self.prefetch_buffer_beats),
            ("max_outstanding_demand", self.max_outstanding_demand),
            ("max_outstanding_prefetch", self.max_outstanding_prefetch),
            ("operand_queue_depth", self.operand_queue_depth),
            ("vrf_banks", self.vrf_banks),
            ("inflight_window", self.inflight_window),
            ("per_kind_inflight", self.per_kind_inflight),
        ] {
            if v == 0 {
                return err(field, "must be at least 1".to_string());
            }
        }
        if self.read_latency == 0 {
            return err("read_latency", "must be at least 1".to_string());
        }
        for (field, v) in [
            ("mul_latency", self.mul_latency),
            ("add_latency", self.add_latency),
            ("macc_latency", self.macc_latency),
        ] {
            if v == 0 {
                return err(field, "must be at least 1".to_string());
            }
        }
        Ok(())
    }

    /// Parse a JSON machine description. An empty file yields the defaults;
    /// missing fields take their default values.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: MachineConfig = if text.trim().is_empty() {
            MachineConfig::default()
        } else {
            serde_json::from_str(text)
                .map_err(|e| ConfigError::Parse { why: e.to_string() })?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse { why: String },
    Invalid { field: String, why: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { why } => write!(f, "config parse error: {why}"),
            ConfigError::Invalid { field, why } => write!(f, "config field `{field}`: {why}"),
        }
    }
}

impl std::error::Error for ConfigError {}
