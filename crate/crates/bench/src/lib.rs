//! Benchmark-only crate; see `benches/sim.rs`. Helpers here keep the bench
//! targets free of setup noise.

use lanesim_core::{build_kernel, Kernel, KernelName, KernelSpec, MachineConfig, Toggles};

/// A kernel and the configuration it was built for, ready to simulate.
pub fn prepared(name: KernelName, size: &[u64], toggles: Toggles) -> (Kernel, MachineConfig) {
    let cfg = MachineConfig::default_with_toggles(toggles);
    let spec = KernelSpec {
        name,
        size: size.to_vec(),
    };
    let kernel = build_kernel(&spec, &cfg).expect("benchmark kernel builds");
    (kernel, cfg)
}
