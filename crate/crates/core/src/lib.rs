//! Cycle-level model of a multi-lane chaining vector processor.
//!
//! The crate has three layers:
//!
//! * a functional layer: decoded instructions ([`isa`]), built-in kernels
//!   with concrete data ([`kernel`]), and the bit-exact reference executor
//!   ([`golden`]);
//! * analytical models: ideal chained timing ([`chain`]) and the roofline
//!   with derived run metrics ([`metrics`]);
//! * the timing model itself: memory front end ([`mem`]), lane backend
//!   ([`backend`]), global sequencing ([`seq`]), all driven by the cycle
//!   loop in [`sim`], with experiment orchestration in [`harness`] and
//!   focused single-mechanism scenarios in [`litmus`].
//!
//! Six optimizations are individually switchable through
//! [`config::Toggles`]; "baseline" is all off and "opt" is all on. Timing
//! never feeds back into computed values, so every toggle combination must
//! reproduce the reference executor's final state exactly.

pub mod backend;
pub mod chain;
pub mod config;
pub mod golden;
pub mod harness;
pub mod isa;
pub mod kernel;
pub mod litmus;
pub mod mem;
pub mod metrics;
pub mod seq;
pub mod sim;
pub mod trace;

pub use backend::{Backend, BackendCounters, BackendOut};
pub use chain::{oracle_simulate_chain, ChainError, ChainSpec, ChainTiming, Stage, StageKind};
pub use config::{ConfigError, MachineConfig, Toggles};
pub use golden::{GoldenError, GoldenMachine};
pub use harness::{run_experiment, ExperimentOutcome, ExperimentPlan, HarnessError, PairRow, PairedSummary, VariantSpec};
pub use isa::{AccessPattern, Opcode, Operand, ScalarOperand, VectorInstruction};
pub use kernel::{build_kernel, Kernel, KernelError, KernelName, KernelSpec, ALL_KERNELS};
pub use litmus::{run_litmus, LitmusError, LitmusOutcome, LITMUS_NAMES};
pub use mem::{LoadGroupDelivery, MemFault, Vlsu};
pub use metrics::{
    gap_closed, geomean, ideal_rate, plot_csv, plot_row, roofline, roofline_measured, speedup,
    GapClosed, MetricsError, PlotRow, RooflinePoint, RunReport,
};
pub use seq::{FuKind, InstrId, InstrState, SeqEvent, Sequencer};
pub use sim::{run_kernel, run_kernel_traced, run_program, RunCounters, RunResult, SimError};
pub use trace::TraceLog;
