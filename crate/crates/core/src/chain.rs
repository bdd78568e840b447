//! Analytical timing of an ideal chained instruction sequence.
//!
//! A chain of N stages passes element groups downstream at one group per
//! cycle once full. Completion decomposes into a prologue (the sum of
//! consecutive inter-stage startup delays plus a pipeline fill term), a
//! steady phase of one cycle per element group, and a fixed tail:
//!
//! ```text
//! prologue = sum(delay[i]) + fill_time
//! steady   = ceil(vl / lanes_elems)
//! total    = prologue + steady + tail_time
//! ```
//!
//! [`oracle_simulate_chain`] recomputes the total by stepping the stage
//! handoffs cycle by cycle instead of summing the closed form; the two must
//! agree exactly.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Oracle scale limits: beyond these the stepped model refuses to run.
pub const ORACLE_MAX_STAGES: usize = 8;
pub const ORACLE_MAX_VL: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Load,
    Multiply,
    Add,
    Reduce,
    Store,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub kind: StageKind,
    /// Cycles before this stage hands its first group to the next one,
    /// counted from receiving its own first group.
    pub startup: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub stages: Vec<Stage>,
    /// Delay between consecutive stages, `stages.len() - 1` entries.
    pub inter_stage_delays: Vec<u64>,
    pub fill_time: u64,
    pub tail_time: u64,
    /// Elements flowing through the chain.
    pub vl: u64,
    /// Elements moved per stage per cycle (lane count times elements per
    /// lane slice).
    pub lanes: u64,
}

impl ChainSpec {
    /// Build a chain whose inter-stage delays are the downstream stages'
    /// startup latencies.
    pub fn from_stages(
        stages: Vec<Stage>,
        fill_time: u64,
        tail_time: u64,
        vl: u64,
        lanes: u64,
    ) -> Result<Self, ChainError> {
        let delays = stages.iter().skip(1).map(|s| s.startup).collect();
        Self::with_delays(stages, delays, fill_time, tail_time, vl, lanes)
    }

    pub fn with_delays(
        stages: Vec<Stage>,
        inter_stage_delays: Vec<u64>,
        fill_time: u64,
        tail_time: u64,
        vl: u64,
        lanes: u64,
    ) -> Result<Self, ChainError> {
        let spec = ChainSpec { stages, inter_stage_delays, fill_time, tail_time, vl, lanes };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.stages.is_empty() {
            return Err(ChainError::EmptyChain);
        }
        if self.lanes == 0 {
            return Err(ChainError::ZeroLanes);
        }
        if self.inter_stage_delays.len() != self.stages.len() - 1 {
            return Err(ChainError::DelayCount {
                stages: self.stages.len(),
                delays: self.inter_stage_delays.len(),
            });
        }
        Ok(())
    }

    /// Element groups in flight: `ceil(vl / lanes)`.
    pub fn groups(&self) -> u64 {
        self.vl.div_ceil(self.lanes)
    }

    pub fn prologue_time(&self) -> u64 {
        self.inter_stage_delays.iter().sum::<u64>() + self.fill_time
    }

    pub fn steady_time(&self) -> u64 {
        self.groups()
    }

    pub fn total_time(&self) -> u64 {
        self.prologue_time() + self.steady_time() + self.tail_time
    }

    pub fn timing(&self) -> ChainTiming {
        ChainTiming {
            prologue: self.prologue_time(),
            steady: self.steady_time(),
            tail: self.tail_time,
            total: self.total_time(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTiming {
    pub prologue: u64,
    pub steady: u64,
    pub tail: u64,
    pub total: u64,
}

/// Steady-phase length for a vector of `vl` elements on `lanes` element
/// slots per cycle.
pub fn steady_time(vl: u64, lanes: u64) -> Result<u64, ChainError> {
    if lanes == 0 {
        return Err(ChainError::ZeroLanes);
    }
    Ok(vl.div_ceil(lanes))
}

/// Cycle-stepped re-derivation of [`ChainSpec::total_time`].
///
/// Each stage holds a next-group counter and a last-handoff cycle. Stage 1
/// sources one group per cycle; stage i hands group g on only after seeing
/// it from stage i-1 `delay` cycles earlier (the final stage additionally
/// waits out `fill_time`). The chain completes when the last stage has
/// handed off every group, plus the tail.
pub fn oracle_simulate_chain(spec: &ChainSpec) -> Result<u64, ChainError> {
    spec.validate()?;
    if spec.stages.len() > ORACLE_MAX_STAGES {
        return Err(ChainError::ScaleLimit {
            what: "stages",
            got: spec.stages.len() as u64,
            max: ORACLE_MAX_STAGES as u64,
        });
    }
    if spec.vl > ORACLE_MAX_VL {
        return Err(ChainError::ScaleLimit { what: "vl", got: spec.vl, max: ORACLE_MAX_VL });
    }

    let n = spec.stages.len();
    let groups = spec.groups();
    if groups == 0 {
        // Nothing flows; the chain still pays its prologue and drain.
        return Ok(spec.prologue_time() + spec.tail_time);
    }

    // Effective handoff delay into stage i >= 1; the final stage also waits
    // out the fill term.
    let eff_delay = |i: usize| -> u64 {
        let d = spec.inter_stage_delays[i - 1];
        if i == n - 1 {
            d + spec.fill_time
        } else {
            d
        }
    };

    // emit[i][g]: cycle stage i hands group g downstream.
    let mut emit: Vec<Vec<u64>> = vec![vec![0; groups as usize]; n];
    let mut next_group = vec![0u64; n];
    let mut last_emit = vec![0u64; n];

    let budget = spec.prologue_time() + groups + spec.tail_time + 16;
    let mut cycle: u64 = 0;
    while next_group[n - 1] < groups {
        cycle += 1;
        if cycle > budget {
            unreachable!("chain oracle exceeded its cycle budget");
        }
        for i in 0..n {
            let g = next_group[i];
            if g >= groups {
                continue;
            }
            if last_emit[i] == cycle {
                continue;
            }
            let upstream_ok = if i == 0 {
                true
            } else {
                next_group[i - 1] > g && emit[i - 1][g as usize] + eff_delay(i) <= cycle
            };
            if upstream_ok {
                emit[i][g as usize] = cycle;
                last_emit[i] = cycle;
                next_group[i] = g + 1;
            }
        }
    }

    let mut finish = emit[n - 1][groups as usize - 1];
    // A single-stage chain still pays its fill before draining.
    if n == 1 {
        finish += spec.fill_time;
    }
    Ok(finish + spec.tail_time)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainError {
    EmptyChain,
    ZeroLanes,
    DelayCount { stages: usize, delays: usize },
    ScaleLimit { what: &'static str, got: u64, max: u64 },
}

impl fmt::Display for ChainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainError::EmptyChain => write!(f, "chain has no stages"),
            ChainError::ZeroLanes => write!(f, "lanes must be nonzero"),
            ChainError::DelayCount { stages, delays } => {
                write!(f, "{stages} stages need {} delays, got {delays}", stages - 1)
            }
            ChainError::ScaleLimit { what, got, max } => {
                write!(f, "oracle limit: {what}={got} exceeds {max}")
            }
        }
    }
}

impl std::error::Error for ChainError {}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(startup: u64) -> Stage {
        Stage { kind: StageKind::Other, startup }
    }

    fn spec(delays: Vec<u64>, fill: u64, tail: u64, vl: u64, lanes: u64) -> ChainSpec {
        let stages = vec![stage(0); delays.len() + 1];
        ChainSpec::with_delays(stages, delays, fill, tail, vl, lanes).unwrap()
    }

    #[test]
    fn totals_decompose() {
        let s = spec(vec![3, 5], 4, 2, 64, 8);
        assert_eq!(s.prologue_time(), 12);
        assert_eq!(s.steady_time(), 8);
        assert_eq!(s.total_time(), 12 + 8 + 2);
    }

    #[test]
    fn steady_rounds_up() {
        assert_eq!(steady_time(0, 8).unwrap(), 0);
        assert_eq!(steady_time(1, 8).unwrap(), 1);
        assert_eq!(steady_time(64, 8).unwrap(), 8);
        assert_eq!(steady_time(65, 8).unwrap(), 9);
        assert!(matches!(steady_time(8, 0), Err(ChainError::ZeroLanes)));
    }

    #[test]
    fn oracle_matches_closed_form_on_fixed_cases() {
        for s in [
            spec(vec![], 0, 0, 8, 8),
            spec(vec![], 7, 3, 32, 8),
            spec(vec![0, 0, 0], 0, 0, 64, 8),
            spec(vec![4, 2, 9], 6, 5, 120, 8),
            spec(vec![30], 2, 1, 4096, 8),
            spec(vec![1; 7], 3, 2, 33, 4),
        ] {
            assert_eq!(oracle_simulate_chain(&s).unwrap(), s.total_time(), "{s:?}");
        }
    }

    #[test]
    fn empty_flow_still_pays_prologue_and_tail() {
        let s = spec(vec![5, 5], 3, 2, 0, 8);
        assert_eq!(s.total_time(), 15);
        assert_eq!(oracle_simulate_chain(&s).unwrap(), 15);
    }

    #[test]
    fn oracle_refuses_oversized_problems() {
        let s = spec(vec![0; 8], 0, 0, 8, 8);
        assert!(matches!(
            oracle_simulate_chain(&s),
            Err(ChainError::ScaleLimit { what: "stages", .. })
        ));
        let s = spec(vec![0], 0, 0, 4097, 8);
        assert!(matches!(oracle_simulate_chain(&s), Err(ChainError::ScaleLimit { what: "vl", .. })));
    }

    #[test]
    fn delay_count_must_match_stage_count() {
        let stages = vec![stage(0); 3];
        let err = ChainSpec::with_delays(stages, vec![1], 0, 0, 8, 8).unwrap_err();
        assert!(matches!(err, ChainError::DelayCount { stages: 3, delays: 1 }));
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn prop_oracle_agrees_with_closed_form(
            delays in proptest::collection::vec(0u64..48, 0..8),
            fill in 0u64..48,
            tail in 0u64..48,
            vl in 0u64..=ORACLE_MAX_VL,
            lanes_pow in 0u32..5,
        ) {
            let s = spec(delays, fill, tail, vl, 1 << lanes_pow);
            prop_assert_eq!(oracle_simulate_chain(&s).unwrap(), s.total_time());
        }
    }
}
