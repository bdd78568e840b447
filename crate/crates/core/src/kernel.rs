//! Built-in BLAS-style kernels expressed as fully strip-mined instruction
//! streams over concrete, seed-generated input data.
//!
//! Construction bakes everything needed to execute: the instruction stream,
//! the memory regions with their contents, and any register inputs (a zero
//! register for reduction seeds, an accumulator start value). Scalar
//! operands of the `.vf` forms carry their source address when the scalar
//! core would have loaded them from kernel data (a GER row scale, a GEMM
//! `A[i][k]`); loop-invariant constants such as the AXPY `a` do not.
//!
//! Byte accounting is unique compulsory traffic: four bytes per distinct
//! (element address, direction) pair over the whole stream, scalar sources
//! included. Re-reading the same address (GEMM reloads every B row per row
//! tile) does not grow `byte_count`; an address both read and written (AXPY
//! `y`) counts once per direction. Flop accounting is one per element for
//! multiply, add, and reduction accumulate, two for multiply-accumulate.
//!
//! Register budget: double-buffered strip registers plus preloaded operand
//! strips. Matrix kernels hold one operand row across at most four strips,
//! so columns are limited to `4 * vlmax`.

use crate::config::MachineConfig;
use crate::golden::{GoldenError, GoldenMachine};
use crate::isa::{AccessPattern, RegId, ScalarOperand, VectorInstruction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Scal,
    Axpy,
    Dotp,
    Gemv,
    Ger,
    Gemm,
    Spmv,
}

pub const ALL_KERNELS: [KernelName; 7] = [
    KernelName::Scal,
    KernelName::Axpy,
    KernelName::Dotp,
    KernelName::Gemv,
    KernelName::Ger,
    KernelName::Gemm,
    KernelName::Spmv,
];

impl KernelName {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelName::Scal => "scal",
            KernelName::Axpy => "axpy",
            KernelName::Dotp => "dotp",
            KernelName::Gemv => "gemv",
            KernelName::Ger => "ger",
            KernelName::Gemm => "gemm",
            KernelName::Spmv => "spmv",
        }
    }

    /// Expected dimension count of the size vector.
    pub fn arity(self) -> usize {
        match self {
            KernelName::Scal | KernelName::Axpy | KernelName::Dotp => 1,
            KernelName::Gemv | KernelName::Ger | KernelName::Spmv => 2,
            KernelName::Gemm => 3,
        }
    }
}

impl fmt::Display for KernelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelName {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, KernelError> {
        match s {
            "scal" => Ok(KernelName::Scal),
            "axpy" => Ok(KernelName::Axpy),
            "dotp" => Ok(KernelName::Dotp),
            "gemv" => Ok(KernelName::Gemv),
            "ger" => Ok(KernelName::Ger),
            "gemm" => Ok(KernelName::Gemm),
            "spmv" => Ok(KernelName::Spmv),
            other => Err(KernelError::UnknownKernel(other.to_string())),
        }
    }
}

/// A named, sized kernel request as it appears in experiment plans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: KernelName,
    pub size: Vec<u64>,
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.name)?;
        for (i, d) in self.size.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// A contiguous input or output array with its concrete word contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemRegion {
    pub name: &'static str,
    pub base: u64,
    pub data: Vec<u32>,
}

impl MemRegion {
    pub fn end(&self) -> u64 {
        self.base + 4 * self.data.len() as u64
    }
}

/// A register whose contents the kernel assumes at entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegInput {
    pub reg: RegId,
    pub data: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub spec: KernelSpec,
    pub instructions: Vec<VectorInstruction>,
    pub regions: Vec<MemRegion>,
    pub reg_inputs: Vec<RegInput>,
    pub flop_count: u64,
    pub byte_count: u64,
}

impl Kernel {
    /// Flops per byte of unique traffic.
    pub fn operational_intensity(&self) -> f64 {
        self.flop_count as f64 / self.byte_count as f64
    }

    /// A fresh reference machine with this kernel's regions and register
    /// inputs loaded, ready to execute or compare against.
    pub fn golden_machine(&self, cfg: &MachineConfig) -> GoldenMachine {
        let mut m = GoldenMachine::new(cfg.vlmax(), cfg.elems_per_group());
        for r in &self.regions {
            m.load_region(r.base, &r.data);
        }
        for ri in &self.reg_inputs {
            m.set_reg(ri.reg, &ri.data);
        }
        m
    }

    /// Execute on the reference machine and return its final state.
    pub fn execute_golden(&self, cfg: &MachineConfig) -> Result<GoldenMachine, GoldenError> {
        let mut m = self.golden_machine(cfg);
        m.execute(&self.instructions)?;
        Ok(m)
    }

    pub fn region(&self, name: &str) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// One instruction per line in the debug stream format.
    pub fn stream_text(&self) -> String {
        let mut s = String::new();
        for i in &self.instructions {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelError {
    UnknownKernel(String),
    BadSize { kernel: KernelName, why: String },
    Golden(GoldenError),
}

impl fmt::Display for KernelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelError::UnknownKernel(name) => write!(f, "unknown kernel `{name}`"),
            KernelError::BadSize { kernel, why } => write!(f, "bad {kernel} size: {why}"),
            KernelError::Golden(e) => write!(f, "kernel stream is not executable: {e}"),
        }
    }
}

impl std::error::Error for KernelError {}

impl From<GoldenError> for KernelError {
    fn from(e: GoldenError) -> Self {
        KernelError::Golden(e)
    }
}

/// Build a kernel for the given machine. Input data, sparse patterns, and
/// baked scalar operands derive deterministically from `cfg.seed`.
pub fn build_kernel(spec: &KernelSpec, cfg: &MachineConfig) -> Result<Kernel, KernelError> {
    if spec.size.len() != spec.name.arity() {
        return Err(KernelError::BadSize {
            kernel: spec.name,
            why: format!("expected {} dims, got {}", spec.name.arity(), spec.size.len()),
        });
    }
    if spec.size.iter().any(|&d| d == 0) {
        return Err(KernelError::BadSize { kernel: spec.name, why: "zero dimension".into() });
    }
    let mut b = Builder::new(spec.clone(), cfg);
    match spec.name {
        KernelName::Scal => b.scal(spec.size[0])?,
        KernelName::Axpy => b.axpy(spec.size[0])?,
        KernelName::Dotp => b.dotp(spec.size[0])?,
        KernelName::Gemv => b.gemv(spec.size[0], spec.size[1])?,
        KernelName::Ger => b.ger(spec.size[0], spec.size[1])?,
        KernelName::Gemm => b.gemm(spec.size[0], spec.size[1], spec.size[2])?,
        KernelName::Spmv => b.spmv(spec.size[0], spec.size[1])?,
    }
    b.finish(cfg)
}

/// Element-offset/length pairs covering `0..n` in `vlmax`-wide strips.
fn strips(n: u64, vlmax: u32) -> Vec<(u64, u32)> {
    let mut v = Vec::new();
    let mut off = 0;
    while off < n {
        let vl = (n - off).min(vlmax as u64) as u32;
        v.push((off, vl));
        off += vl as u64;
    }
    v
}

struct Builder {
    spec: KernelSpec,
    vlmax: u32,
    rng: ChaCha20Rng,
    instrs: Vec<VectorInstruction>,
    cur_vl: Option<u32>,
    regions: Vec<MemRegion>,
    reg_inputs: Vec<RegInput>,
    next_base: u64,
}

impl Builder {
    fn new(spec: KernelSpec, cfg: &MachineConfig) -> Self {
        Builder {
            spec,
            vlmax: cfg.vlmax(),
            rng: ChaCha20Rng::seed_from_u64(cfg.seed),
            instrs: Vec::new(),
            cur_vl: None,
            regions: Vec::new(),
            reg_inputs: Vec::new(),
            next_base: 0x1_0000,
        }
    }

    fn value(&mut self) -> u32 {
        let v: f32 = self.rng.gen_range(-1.0..1.0);
        v.to_bits()
    }

    fn random_region(&mut self, name: &'static str, elems: u64) -> usize {
        let data = (0..elems).map(|_| self.value()).collect();
        self.region(name, data)
    }

    fn zero_region(&mut self, name: &'static str, elems: u64) -> usize {
        self.region(name, vec![0u32; elems as usize])
    }

    fn region(&mut self, name: &'static str, data: Vec<u32>) -> usize {
        let base = self.next_base;
        self.next_base = (base + 4 * data.len() as u64 + 0xFFF) & !0xFFF;
        self.regions.push(MemRegion { name, base, data });
        self.regions.len() - 1
    }

    fn zero_reg(&mut self, reg: RegId) {
        self.reg_inputs.push(RegInput { reg, data: vec![0u32; self.vlmax as usize] });
    }

    fn f32_at(&self, region: usize, elem: u64) -> f32 {
        f32::from_bits(self.regions[region].data[elem as usize])
    }

    fn addr_of(&self, region: usize, elem: u64) -> u64 {
        self.regions[region].base + 4 * elem
    }

    fn end_of(&self, region: usize) -> u64 {
        self.regions[region].end()
    }

    /// Push an instruction, inserting a `VSETVL` whenever `vl` changes.
    fn push(&mut self, i: VectorInstruction) {
        if self.cur_vl != Some(i.vl) {
            self.instrs.push(VectorInstruction::vsetvl(i.vl));
            self.cur_vl = Some(i.vl);
        }
        self.instrs.push(i);
    }

    fn load(&mut self, dest: RegId, addr: u64, vl: u32, stream_end: u64) {
        let mut i = VectorInstruction::vload(dest, addr, AccessPattern::UnitStride, vl);
        i.stream_end = Some(stream_end);
        self.push(i);
    }

    fn store(&mut self, data: RegId, addr: u64, vl: u32) {
        self.push(VectorInstruction::vstore(data, addr, AccessPattern::UnitStride, vl));
    }

    fn check_columns(&self, name: KernelName, n: u64) -> Result<usize, KernelError> {
        let max = 4 * self.vlmax as u64;
        if n > max {
            return Err(KernelError::BadSize {
                kernel: name,
                why: format!("columns {n} exceed the {max} supported by the register budget"),
            });
        }
        Ok(strips(n, self.vlmax).len())
    }

    fn scal(&mut self, n: u64) -> Result<(), KernelError> {
        let x = self.random_region("x", n);
        let y = self.zero_region("y", n);
        let a = ScalarOperand::constant(f32::from_bits(self.value()));
        let x_end = self.end_of(x);
        for (s, (off, vl)) in strips(n, self.vlmax).into_iter().enumerate() {
            let xb = 1 + (s % 2) as RegId;
            let yb = 4 + (s % 2) as RegId;
            self.load(xb, self.addr_of(x, off), vl, x_end);
            self.push(VectorInstruction::vmulvf(yb, a, xb, vl));
            self.store(yb, self.addr_of(y, off), vl);
        }
        Ok(())
    }

    fn axpy(&mut self, n: u64) -> Result<(), KernelError> {
        let x = self.random_region("x", n);
        let y = self.random_region("y", n);
        let a = ScalarOperand::constant(f32::from_bits(self.value()));
        let (x_end, y_end) = (self.end_of(x), self.end_of(y));
        for (s, (off, vl)) in strips(n, self.vlmax).into_iter().enumerate() {
            let xb = 1 + (s % 2) as RegId;
            let yb = 4 + (s % 2) as RegId;
            self.load(xb, self.addr_of(x, off), vl, x_end);
            self.load(yb, self.addr_of(y, off), vl, y_end);
            self.push(VectorInstruction::vmaccvf(yb, a, xb, vl));
            self.store(yb, self.addr_of(y, off), vl);
        }
        Ok(())
    }

    fn dotp(&mut self, n: u64) -> Result<(), KernelError> {
        let x = self.random_region("x", n);
        let y = self.random_region("y", n);
        let out = self.zero_region("out", 1);
        self.zero_reg(8);
        let (x_end, y_end) = (self.end_of(x), self.end_of(y));
        for (s, (off, vl)) in strips(n, self.vlmax).into_iter().enumerate() {
            let xb = 1 + (s % 2) as RegId;
            let yb = 4 + (s % 2) as RegId;
            let pb = 6 + (s % 2) as RegId;
            self.load(xb, self.addr_of(x, off), vl, x_end);
            self.load(yb, self.addr_of(y, off), vl, y_end);
            self.push(VectorInstruction::vmul(pb, xb, yb, vl));
            self.push(VectorInstruction::vredsum(8, 8, pb, vl));
        }
        self.store(8, self.addr_of(out, 0), 1);
        Ok(())
    }

    fn gemv(&mut self, m: u64, n: u64) -> Result<(), KernelError> {
        self.check_columns(KernelName::Gemv, n)?;
        let a = self.random_region("a", m * n);
        let x = self.random_region("x", n);
        let y = self.zero_region("y", m);
        self.zero_reg(0);
        let (a_end, x_end) = (self.end_of(a), self.end_of(x));
        let col_strips = strips(n, self.vlmax);
        for (j, (off, vl)) in col_strips.iter().enumerate() {
            self.load(1 + j as RegId, self.addr_of(x, *off), *vl, x_end);
        }
        // Each row's strip products fold into a running scalar, chained
        // through a fresh accumulator register per strip (two rows' worth,
        // so nothing in row i waits on row i-1's registers). A row's result
        // is stored two rows late, after the later row's loads, since the
        // store's data only exists once the fold finishes.
        let acc = |i: u64, j: usize| if i % 2 == 0 { 8 + j as RegId } else { 28 + j as RegId };
        let prods = |i: u64, j: usize| if i % 2 == 0 { 12 + j as RegId } else { 24 + j as RegId };
        let last_j = col_strips.len() - 1;
        for i in 0..m {
            let rb = if i % 2 == 0 { 16 } else { 20 };
            for (j, (off, vl)) in col_strips.iter().enumerate() {
                self.load(rb + j as RegId, self.addr_of(a, i * n + off), *vl, a_end);
            }
            if i >= 2 {
                self.store(acc(i - 2, last_j), self.addr_of(y, i - 2), 1);
            }
            for (j, (_, vl)) in col_strips.iter().enumerate() {
                self.push(VectorInstruction::vmul(prods(i, j), rb + j as RegId, 1 + j as RegId, *vl));
                let init = if j == 0 { 0 } else { acc(i, j - 1) };
                self.push(VectorInstruction::vredsum(acc(i, j), init, prods(i, j), *vl));
            }
        }
        if m >= 2 {
            self.store(acc(m - 2, last_j), self.addr_of(y, m - 2), 1);
        }
        self.store(acc(m - 1, last_j), self.addr_of(y, m - 1), 1);
        Ok(())
    }

    fn ger(&mut self, m: u64, n: u64) -> Result<(), KernelError> {
        self.check_columns(KernelName::Ger, n)?;
        let a = self.random_region("a", m * n);
        let x = self.random_region("x", m);
        let y = self.random_region("y", n);
        let (a_end, y_end) = (self.end_of(a), self.end_of(y));
        let col_strips = strips(n, self.vlmax);
        for (j, (off, vl)) in col_strips.iter().enumerate() {
            self.load(1 + j as RegId, self.addr_of(y, *off), *vl, y_end);
        }
        for i in 0..m {
            let rb = if i % 2 == 0 { 16 } else { 20 };
            let xi = ScalarOperand::loaded(self.f32_at(x, i), self.addr_of(x, i));
            for (j, (off, vl)) in col_strips.iter().enumerate() {
                let row = rb + j as RegId;
                let addr = self.addr_of(a, i * n + off);
                self.load(row, addr, *vl, a_end);
                self.push(VectorInstruction::vmaccvf(row, xi, 1 + j as RegId, *vl));
                self.store(row, addr, *vl);
            }
        }
        Ok(())
    }

    fn gemm(&mut self, m: u64, n: u64, k: u64) -> Result<(), KernelError> {
        let ns = self.check_columns(KernelName::Gemm, n)?;
        let a = self.random_region("a", m * k);
        let bm = self.random_region("b", k * n);
        let c = self.zero_region("c", m * n);
        let (b_end, c_end) = (self.end_of(bm), self.end_of(c));
        let col_strips = strips(n, self.vlmax);
        let creg = |r: usize, j: usize| (8 + r * ns + j) as RegId;
        let mut i0 = 0;
        while i0 < m {
            let rows = (m - i0).min(4);
            for r in 0..rows as usize {
                for (j, (off, vl)) in col_strips.iter().enumerate() {
                    self.load(creg(r, j), self.addr_of(c, (i0 + r as u64) * n + off), *vl, c_end);
                }
            }
            for kk in 0..k {
                let bb = if kk % 2 == 0 { 1 } else { 25 };
                for (j, (off, vl)) in col_strips.iter().enumerate() {
                    self.load(bb + j as RegId, self.addr_of(bm, kk * n + off), *vl, b_end);
                }
                // Column-major macc order: consecutive write-backs land four
                // banks apart, so a trailing load write-back crosses the macc
                // stream instead of riding the same bank with it.
                for (j, (_, vl)) in col_strips.iter().enumerate() {
                    for r in 0..rows as usize {
                        let i = i0 + r as u64;
                        let aik = ScalarOperand::loaded(
                            self.f32_at(a, i * k + kk),
                            self.addr_of(a, i * k + kk),
                        );
                        self.push(VectorInstruction::vmaccvf(creg(r, j), aik, bb + j as RegId, *vl));
                    }
                }
            }
            for r in 0..rows as usize {
                for (j, (off, vl)) in col_strips.iter().enumerate() {
                    self.store(creg(r, j), self.addr_of(c, (i0 + r as u64) * n + off), *vl);
                }
            }
            i0 += rows;
        }
        Ok(())
    }

    fn spmv(&mut self, m: u64, n: u64) -> Result<(), KernelError> {
        let nnz = n.min(8);
        let vals = self.random_region("vals", m * nnz);
        let idx_data: Vec<u32> = {
            let mut all = Vec::with_capacity((m * nnz) as usize);
            for _ in 0..m {
                let mut cols =
                    rand::seq::index::sample(&mut self.rng, n as usize, nnz as usize).into_vec();
                cols.sort_unstable();
                all.extend(cols.into_iter().map(|c| c as u32));
            }
            all
        };
        let idx = self.region("col_idx", idx_data);
        let x = self.random_region("x", n);
        let y = self.zero_region("y", m);
        self.zero_reg(0);
        let (vals_end, idx_end) = (self.end_of(vals), self.end_of(idx));
        let vl = nnz as u32;
        for i in 0..m {
            let p = (i % 2) as RegId;
            let (vv, vi, vg, vp, vo) = (1 + p, 3 + p, 5 + p, 7 + p, 9 + p);
            self.load(vv, self.addr_of(vals, i * nnz), vl, vals_end);
            self.load(vi, self.addr_of(idx, i * nnz), vl, idx_end);
            let mut gather = VectorInstruction::vload(
                vg,
                self.regions[x].base,
                AccessPattern::Indexed { index_reg: vi },
                vl,
            );
            gather.stream_end = None;
            self.push(gather);
            self.push(VectorInstruction::vmul(vp, vv, vg, vl));
            self.push(VectorInstruction::vredsum(vo, 0, vp, vl));
            self.store(vo, self.addr_of(y, i), 1);
        }
        Ok(())
    }

    fn finish(self, cfg: &MachineConfig) -> Result<Kernel, KernelError> {
        let mut kernel = Kernel {
            spec: self.spec,
            instructions: self.instrs,
            regions: self.regions,
            reg_inputs: self.reg_inputs,
            flop_count: 0,
            byte_count: 0,
        };
        kernel.flop_count = GoldenMachine::flop_count(&kernel.instructions);
        // Executing validates the stream (no uninitialized reads, no
        // unmapped addresses) and yields the touched-address sets.
        let m = kernel.execute_golden(cfg)?;
        kernel.byte_count = m.byte_count();
        Ok(kernel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(name: KernelName, size: &[u64]) -> Kernel {
        let cfg = MachineConfig::default();
        build_kernel(&KernelSpec { name, size: size.to_vec() }, &cfg).unwrap()
    }

    #[test]
    fn scal_counts() {
        let k = build(KernelName::Scal, &[1024]);
        assert_eq!(k.flop_count, 1024);
        assert_eq!(k.byte_count, 8192);
        assert_eq!(k.operational_intensity(), 0.125);
    }

    #[test]
    fn axpy_counts_y_in_both_directions() {
        let k = build(KernelName::Axpy, &[1024]);
        assert_eq!(k.flop_count, 2048);
        assert_eq!(k.byte_count, 12288);
        assert!((k.operational_intensity() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dotp_counts() {
        let k = build(KernelName::Dotp, &[1024]);
        assert_eq!(k.flop_count, 2048);
        assert_eq!(k.byte_count, 8196);
    }

    #[test]
    fn dotp_of_ones_is_the_length() {
        let cfg = MachineConfig::default();
        let mut k =
            build_kernel(&KernelSpec { name: KernelName::Dotp, size: vec![1024] }, &cfg).unwrap();
        for r in &mut k.regions {
            if r.name == "x" || r.name == "y" {
                r.data.fill(1.0f32.to_bits());
            }
        }
        let m = k.execute_golden(&cfg).unwrap();
        let out = k.region("out").unwrap().base;
        assert_eq!(f32::from_bits(m.memory[&out]), 1024.0);
    }

    #[test]
    fn gemv_counts() {
        let k = build(KernelName::Gemv, &[32, 128]);
        assert_eq!(k.flop_count, 8192);
        assert_eq!(k.byte_count, 16384 + 512 + 128);
    }

    #[test]
    fn ger_counts_include_scalar_rows() {
        let k = build(KernelName::Ger, &[128, 128]);
        assert_eq!(k.flop_count, 32768);
        assert_eq!(k.byte_count, 65536 + 65536 + 512 + 512);
        assert!((k.operational_intensity() - 0.24806).abs() < 1e-4);
    }

    #[test]
    fn gemm_counts_are_exact_2nnn() {
        let k = build(KernelName::Gemm, &[128, 128, 128]);
        assert_eq!(k.flop_count, 2 * 128 * 128 * 128);
        assert_eq!(k.byte_count, 4 * (128 * 128 + 128 * 128 + 2 * 128 * 128));
        assert_eq!(k.operational_intensity(), 16.0);
    }

    #[test]
    fn gemm_matches_direct_matrix_product() {
        let cfg = MachineConfig::default();
        let k = build(KernelName::Gemm, &[8, 32, 8]);
        let (m, n, kd) = (8usize, 32usize, 8usize);
        let a = k.region("a").unwrap();
        let b = k.region("b").unwrap();
        let gm = k.execute_golden(&cfg).unwrap();
        let c_base = k.region("c").unwrap().base;
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0f64;
                for kk in 0..kd {
                    let av = f32::from_bits(a.data[i * kd + kk]) as f64;
                    let bv = f32::from_bits(b.data[kk * n + j]) as f64;
                    want += av * bv;
                }
                let got =
                    f32::from_bits(gm.memory[&(c_base + 4 * (i * n + j) as u64)]) as f64;
                assert!((got - want).abs() < 1e-4, "c[{i}][{j}] got {got} want {want}");
            }
        }
    }

    #[test]
    fn gemv_matches_direct_product() {
        let cfg = MachineConfig::default();
        let k = build(KernelName::Gemv, &[16, 64]);
        let a = k.region("a").unwrap();
        let x = k.region("x").unwrap();
        let gm = k.execute_golden(&cfg).unwrap();
        let y_base = k.region("y").unwrap().base;
        for i in 0..16usize {
            let mut want = 0.0f64;
            for j in 0..64usize {
                want += f32::from_bits(a.data[i * 64 + j]) as f64
                    * f32::from_bits(x.data[j]) as f64;
            }
            let got = f32::from_bits(gm.memory[&(y_base + 4 * i as u64)]) as f64;
            assert!((got - want).abs() < 1e-4, "y[{i}] got {got} want {want}");
        }
    }

    #[test]
    fn ger_matches_direct_update() {
        let cfg = MachineConfig::default();
        let k = build(KernelName::Ger, &[8, 32]);
        let a0 = k.region("a").unwrap().data.clone();
        let x = k.region("x").unwrap().data.clone();
        let y = k.region("y").unwrap().data.clone();
        let a_base = k.region("a").unwrap().base;
        let gm = k.execute_golden(&cfg).unwrap();
        for i in 0..8usize {
            for j in 0..32usize {
                let want = f32::from_bits(a0[i * 32 + j]) as f64
                    + f32::from_bits(x[i]) as f64 * f32::from_bits(y[j]) as f64;
                let got = f32::from_bits(gm.memory[&(a_base + 4 * (i * 32 + j) as u64)]) as f64;
                assert!((got - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn spmv_matches_direct_row_sums() {
        let cfg = MachineConfig::default();
        let k = build(KernelName::Spmv, &[32, 32]);
        let vals = k.region("vals").unwrap().data.clone();
        let idx = k.region("col_idx").unwrap().data.clone();
        let x = k.region("x").unwrap().data.clone();
        let y_base = k.region("y").unwrap().base;
        let gm = k.execute_golden(&cfg).unwrap();
        for i in 0..32usize {
            let mut want = 0.0f64;
            for e in 0..8usize {
                let col = idx[i * 8 + e] as usize;
                want += f32::from_bits(vals[i * 8 + e]) as f64 * f32::from_bits(x[col]) as f64;
            }
            let got = f32::from_bits(gm.memory[&(y_base + 4 * i as u64)]) as f64;
            assert!((got - want).abs() < 1e-4, "y[{i}] got {got} want {want}");
        }
    }

    #[test]
    fn spmv_columns_are_sorted_and_distinct() {
        let k = build(KernelName::Spmv, &[16, 32]);
        let idx = &k.region("col_idx").unwrap().data;
        for row in idx.chunks(8) {
            for w in row.windows(2) {
                assert!(w[0] < w[1], "row indices {row:?} not strictly ascending");
            }
        }
    }

    #[test]
    fn tail_strips_get_their_own_vl() {
        let k = build(KernelName::Scal, &[40]);
        let setvls: Vec<u32> = k
            .instructions
            .iter()
            .filter(|i| i.opcode == crate::isa::Opcode::Vsetvl)
            .map(|i| i.vl)
            .collect();
        assert_eq!(setvls, vec![32, 8]);
        assert_eq!(k.flop_count, 40);
    }

    #[test]
    fn sizes_are_validated() {
        let cfg = MachineConfig::default();
        let err = build_kernel(&KernelSpec { name: KernelName::Scal, size: vec![0] }, &cfg);
        assert!(matches!(err, Err(KernelError::BadSize { .. })));
        let err = build_kernel(&KernelSpec { name: KernelName::Gemm, size: vec![8, 8] }, &cfg);
        assert!(matches!(err, Err(KernelError::BadSize { .. })));
        let err = build_kernel(&KernelSpec { name: KernelName::Gemv, size: vec![8, 4096] }, &cfg);
        assert!(matches!(err, Err(KernelError::BadSize { .. })));
    }

    #[test]
    fn all_kernels_build_and_validate_at_small_sizes() {
        let cfg = MachineConfig::default();
        for name in ALL_KERNELS {
            let size: Vec<u64> = match name.arity() {
                1 => vec![96],
                2 => vec![8, 64],
                _ => vec![8, 64, 8],
            };
            let k = build_kernel(&KernelSpec { name, size }, &cfg).unwrap();
            assert!(k.flop_count > 0);
            assert!(k.byte_count > 0);
        }
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = MachineConfig::default();
        let spec = KernelSpec { name: KernelName::Spmv, size: vec![16, 64] };
        let k1 = build_kernel(&spec, &cfg).unwrap();
        let k2 = build_kernel(&spec, &cfg).unwrap();
        assert_eq!(k1, k2);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let k3 = build_kernel(&spec, &cfg2).unwrap();
        assert_ne!(k1.region("col_idx").unwrap().data, k3.region("col_idx").unwrap().data);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn prop_strips_tile_the_row_exactly(n in 0u64..10_000, vlmax in 1u32..256) {
            let tiles = strips(n, vlmax);
            let mut off = 0u64;
            for (o, vl) in &tiles {
                prop_assert_eq!(*o, off);
                prop_assert!(*vl >= 1 && *vl <= vlmax);
                off += u64::from(*vl);
            }
            prop_assert_eq!(off, n);
            // Every strip but the last is full.
            for (_, vl) in tiles.iter().rev().skip(1) {
                prop_assert_eq!(*vl, vlmax);
            }
        }
    }
}
