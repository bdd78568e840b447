//! Reference executor: runs an instruction stream sequentially with no
//! timing, producing the architecturally correct final state.
//!
//! The timing model must match this executor bit for bit on memory and on
//! every initialized register element, for every toggle combination. All
//! arithmetic is plain IEEE f32 with separate rounding for multiply and add
//! (no fused multiply-add anywhere). Reductions fold each element group with
//! a balanced pairwise tree (first half rounded up), then accumulate group
//! partials in element order, starting from the init operand; the group
//! width is the machine's elements-per-group so the backend's serial
//! reduction unit can reproduce the exact same ordering.
//!
//! The executor also records the element addresses it reads and writes
//! (including scalar operands sourced from memory); kernel byte accounting
//! is defined over those sets.

use crate::isa::{AccessPattern, Opcode, Operand, VectorInstruction, NUM_REGS};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Balanced pairwise sum; the single documented reduction order.
pub fn tree_sum(vals: &[f32]) -> f32 {
    match vals.len() {
        0 => 0.0,
        1 => vals[0],
        n => {
            let mid = n.div_ceil(2);
            tree_sum(&vals[..mid]) + tree_sum(&vals[mid..])
        }
    }
}

#[derive(Debug, Clone)]
pub struct GoldenMachine {
    /// 4-byte words keyed by their (4-aligned) byte address.
    pub memory: BTreeMap<u64, u32>,
    regs: Vec<Vec<u32>>,
    init: Vec<Vec<bool>>,
    vlmax: u32,
    group_elems: u32,
    /// Element addresses read, including scalar operands with a memory source.
    pub reads: BTreeSet<u64>,
    /// Element addresses written.
    pub writes: BTreeSet<u64>,
}

impl GoldenMachine {
    pub fn new(vlmax: u32, group_elems: u32) -> Self {
        GoldenMachine {
            memory: BTreeMap::new(),
            regs: vec![vec![0; vlmax as usize]; NUM_REGS],
            init: vec![vec![false; vlmax as usize]; NUM_REGS],
            vlmax,
            group_elems,
            reads: BTreeSet::new(),
            writes: BTreeSet::new(),
        }
    }

    pub fn load_region(&mut self, base: u64, words: &[u32]) {
        for (i, w) in words.iter().enumerate() {
            self.memory.insert(base + 4 * i as u64, *w);
        }
    }

    pub fn set_reg(&mut self, reg: u8, words: &[u32]) {
        for (i, w) in words.iter().enumerate() {
            self.regs[reg as usize][i] = *w;
            self.init[reg as usize][i] = true;
        }
    }

    pub fn reg(&self, reg: u8) -> &[u32] {
        &self.regs[reg as usize]
    }

    pub fn reg_initialized(&self, reg: u8, elem: u32) -> bool {
        self.init[reg as usize][elem as usize]
    }

    fn read_elem(&mut self, reg: u8, elem: u32) -> Result<u32, GoldenError> {
        if !self.init[reg as usize][elem as usize] {
            return Err(GoldenError::UninitRegister { reg, elem });
        }
        Ok(self.regs[reg as usize][elem as usize])
    }

    fn write_elem(&mut self, reg: u8, elem: u32, value: u32) {
        self.regs[reg as usize][elem as usize] = value;
        self.init[reg as usize][elem as usize] = true;
    }

    /// Element byte addresses an access touches, in element order.
    pub fn element_addresses(
        &mut self,
        instr: &VectorInstruction,
    ) -> Result<Vec<u64>, GoldenError> {
        let base = instr
            .base_address
            .ok_or_else(|| GoldenError::BadInstruction("memory access without base".into()))?;
        let pattern = instr
            .access
            .ok_or_else(|| GoldenError::BadInstruction("memory access without pattern".into()))?;
        let mut addrs = Vec::with_capacity(instr.vl as usize);
        for e in 0..instr.vl {
            let addr = match pattern {
                AccessPattern::UnitStride => base as i128 + 4 * e as i128,
                AccessPattern::Strided { stride } => base as i128 + stride as i128 * e as i128,
                AccessPattern::Indexed { index_reg } => {
                    let idx = self.read_elem(index_reg, e)?;
                    base as i128 + 4 * idx as i128
                }
            };
            if addr < 0 || addr > u64::MAX as i128 {
                return Err(GoldenError::OutOfBounds { addr: addr as u64 });
            }
            let addr = addr as u64;
            if addr % 4 != 0 {
                return Err(GoldenError::Misaligned { addr });
            }
            addrs.push(addr);
        }
        Ok(addrs)
    }

    fn scalar_value(&mut self, op: Operand) -> Result<f32, GoldenError> {
        match op {
            Operand::Scalar(s) => {
                if let Some(addr) = s.source {
                    self.reads.insert(addr);
                }
                Ok(s.value)
            }
            _ => Err(GoldenError::BadInstruction("expected scalar operand".into())),
        }
    }

    fn reg_operand(op: Operand) -> Result<u8, GoldenError> {
        op.reg().ok_or_else(|| GoldenError::BadInstruction("expected register operand".into()))
    }

    pub fn execute(&mut self, instrs: &[VectorInstruction]) -> Result<(), GoldenError> {
        for instr in instrs {
            self.step(instr)?;
        }
        Ok(())
    }

    pub fn step(&mut self, instr: &VectorInstruction) -> Result<(), GoldenError> {
        let vl = instr.vl;
        if vl > self.vlmax && instr.opcode != Opcode::Vsetvl {
            return Err(GoldenError::BadInstruction(format!(
                "vl={vl} exceeds vlmax={}",
                self.vlmax
            )));
        }
        match instr.opcode {
            Opcode::Vsetvl => {}
            Opcode::Vload => {
                let addrs = self.element_addresses(instr)?;
                for (e, addr) in addrs.iter().enumerate() {
                    let word = *self
                        .memory
                        .get(addr)
                        .ok_or(GoldenError::OutOfBounds { addr: *addr })?;
                    self.reads.insert(*addr);
                    self.write_elem(instr.dest, e as u32, word);
                }
            }
            Opcode::Vstore => {
                let addrs = self.element_addresses(instr)?;
                for (e, addr) in addrs.iter().enumerate() {
                    let word = self.read_elem(instr.dest, e as u32)?;
                    self.memory.insert(*addr, word);
                    self.writes.insert(*addr);
                }
            }
            Opcode::Vmul | Opcode::Vadd => {
                let vs1 = Self::reg_operand(instr.src1)?;
                let vs2 = Self::reg_operand(instr.src2)?;
                for e in 0..vl {
                    let a = f32::from_bits(self.read_elem(vs1, e)?);
                    let b = f32::from_bits(self.read_elem(vs2, e)?);
                    let r = if instr.opcode == Opcode::Vmul { a * b } else { a + b };
                    self.write_elem(instr.dest, e, r.to_bits());
                }
            }
            Opcode::Vmacc => {
                let vs1 = Self::reg_operand(instr.src1)?;
                let vs2 = Self::reg_operand(instr.src2)?;
                for e in 0..vl {
                    let a = f32::from_bits(self.read_elem(vs1, e)?);
                    let b = f32::from_bits(self.read_elem(vs2, e)?);
                    let c = f32::from_bits(self.read_elem(instr.dest, e)?);
                    self.write_elem(instr.dest, e, (c + a * b).to_bits());
                }
            }
            Opcode::Vmulvf | Opcode::Vmaccvf => {
                let x = self.scalar_value(instr.src1)?;
                let vs2 = Self::reg_operand(instr.src2)?;
                for e in 0..vl {
                    let b = f32::from_bits(self.read_elem(vs2, e)?);
                    let r = if instr.opcode == Opcode::Vmulvf {
                        x * b
                    } else {
                        let c = f32::from_bits(self.read_elem(instr.dest, e)?);
                        c + x * b
                    };
                    self.write_elem(instr.dest, e, r.to_bits());
                }
            }
            Opcode::Vredsum => {
                let init_reg = Self::reg_operand(instr.src1)?;
                let data = Self::reg_operand(instr.src2)?;
                let mut acc = f32::from_bits(self.read_elem(init_reg, 0)?);
                let mut e = 0;
                while e < vl {
                    let count = (vl - e).min(self.group_elems);
                    let mut group = Vec::with_capacity(count as usize);
                    for k in 0..count {
                        group.push(f32::from_bits(self.read_elem(data, e + k)?));
                    }
                    acc += tree_sum(&group);
                    e += count;
                }
                self.write_elem(instr.dest, 0, acc.to_bits());
            }
        }
        Ok(())
    }

    /// Count of flops an instruction stream performs: one per element for
    /// multiplies, adds, and reduction accumulations, two per element for
    /// multiply-accumulate.
    pub fn flop_count(instrs: &[VectorInstruction]) -> u64 {
        instrs
            .iter()
            .map(|i| match i.opcode {
                Opcode::Vmul | Opcode::Vadd | Opcode::Vmulvf | Opcode::Vredsum => i.vl as u64,
                Opcode::Vmacc | Opcode::Vmaccvf => 2 * i.vl as u64,
                _ => 0,
            })
            .sum()
    }

    /// Unique-traffic byte count over the recorded address sets: four bytes
    /// per distinct (address, direction) pair.
    pub fn byte_count(&self) -> u64 {
        4 * (self.reads.len() as u64 + self.writes.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GoldenError {
    UninitRegister { reg: u8, elem: u32 },
    OutOfBounds { addr: u64 },
    Misaligned { addr: u64 },
    BadInstruction(String),
}

impl fmt::Display for GoldenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GoldenError::UninitRegister { reg, elem } => {
                write!(f, "read of uninitialized v{reg}[{elem}]")
            }
            GoldenError::OutOfBounds { addr } => {
                write!(f, "access to unmapped address {addr:#x}")
            }
            GoldenError::Misaligned { addr } => write!(f, "misaligned element address {addr:#x}"),
            GoldenError::BadInstruction(why) => write!(f, "malformed instruction: {why}"),
        }
    }
}

impl std::error::Error for GoldenError {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{ScalarOperand, VectorInstruction as VI};

    fn machine() -> GoldenMachine {
        GoldenMachine::new(32, 8)
    }

    fn f(v: f32) -> u32 {
        v.to_bits()
    }

    #[test]
    fn load_mul_store_round_trip() {
        let mut m = machine();
        m.load_region(0x1000, &(0..32).map(|i| f(i as f32)).collect::<Vec<_>>());
        m.execute(&[
            VI::vload(1, 0x1000, AccessPattern::UnitStride, 32),
            VI::vmulvf(2, ScalarOperand::constant(2.0), 1, 32),
            VI::vstore(2, 0x2000, AccessPattern::UnitStride, 32),
        ])
        .unwrap();
        assert_eq!(m.memory[&0x2000], f(0.0));
        assert_eq!(m.memory[&(0x2000 + 4 * 31)], f(62.0));
        assert_eq!(m.reads.len(), 32);
        assert_eq!(m.writes.len(), 32);
        assert_eq!(m.byte_count(), 256);
    }

    #[test]
    fn uninitialized_read_is_an_error() {
        let mut m = machine();
        let err = m.execute(&[VI::vmul(3, 1, 2, 8)]).unwrap_err();
        assert_eq!(err, GoldenError::UninitRegister { reg: 1, elem: 0 });
    }

    #[test]
    fn unmapped_load_is_out_of_bounds() {
        let mut m = machine();
        let err = m.execute(&[VI::vload(1, 0x9000, AccessPattern::UnitStride, 4)]).unwrap_err();
        assert_eq!(err, GoldenError::OutOfBounds { addr: 0x9000 });
    }

    #[test]
    fn indexed_load_uses_index_register_offsets() {
        let mut m = machine();
        m.load_region(0x1000, &[f(10.0), f(11.0), f(12.0), f(13.0)]);
        m.set_reg(3, &[3, 0, 2, 1]);
        m.execute(&[VI::vload(5, 0x1000, AccessPattern::Indexed { index_reg: 3 }, 4)]).unwrap();
        let got: Vec<f32> = m.reg(5)[..4].iter().map(|w| f32::from_bits(*w)).collect();
        assert_eq!(got, vec![13.0, 10.0, 12.0, 11.0]);
    }

    #[test]
    fn strided_addresses_step_in_bytes() {
        let mut m = machine();
        m.load_region(0x1000, &(0..16).map(|i| f(i as f32)).collect::<Vec<_>>());
        m.execute(&[VI::vload(1, 0x1000, AccessPattern::Strided { stride: 8 }, 4)]).unwrap();
        let got: Vec<f32> = m.reg(1)[..4].iter().map(|w| f32::from_bits(*w)).collect();
        assert_eq!(got, vec![0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn reduction_order_is_grouped_pairwise_then_serial() {
        let mut m = machine();
        let vals: Vec<f32> = (0..12).map(|i| (i as f32) * 0.1 + 1.0).collect();
        m.set_reg(6, &vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        m.set_reg(8, &[f(0.5)]);
        m.execute(&[VI::vredsum(9, 8, 6, 12)]).unwrap();

        let expected = {
            let g0 = tree_sum(&vals[..8]);
            let g1 = tree_sum(&vals[8..12]);
            0.5f32 + g0 + g1
        };
        assert_eq!(m.reg(9)[0], f(expected));
    }

    #[test]
    fn tree_sum_pairs_adjacent_elements() {
        let v = [1.0f32, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
        let manual = ((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]));
        assert_eq!(tree_sum(&v), manual);
    }

    #[test]
    fn macc_uses_two_roundings() {
        // a*a is inexact: fused would keep the 2^-46 residue, separate
        // rounding cancels to zero.
        let a = 1.0f32 + f32::EPSILON;
        let c = -(1.0f32 + 2.0f32.powi(-22));
        let mut m = machine();
        m.set_reg(1, &[f(a)]);
        m.set_reg(2, &[f(a)]);
        m.set_reg(3, &[f(c)]);
        m.execute(&[VI::vmacc(3, 1, 2, 1)]).unwrap();
        assert_eq!(m.reg(3)[0], f(0.0));
        assert_ne!(a.mul_add(a, c), 0.0);
    }

    #[test]
    fn scalar_memory_sources_count_as_reads() {
        let mut m = machine();
        m.set_reg(1, &[f(1.0); 8]);
        m.execute(&[VI::vmulvf(2, ScalarOperand::loaded(3.0, 0x4000), 1, 8)]).unwrap();
        assert!(m.reads.contains(&0x4000));
        assert_eq!(m.byte_count(), 4);
    }
}
