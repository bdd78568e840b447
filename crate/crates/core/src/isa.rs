//! Decoded vector instruction form shared by the golden executor and the
//! timing model.
//!
//! Instructions carry their effective `vl` directly: strip-mined loops are
//! emitted fully unrolled, so there is no architectural `vl` register to
//! track. `VSETVL` still appears in streams (it costs an issue slot) but is
//! otherwise a marker.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Architectural vector register index, 0..=31.
pub type RegId = u8;

pub const NUM_REGS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    Vsetvl,
    Vload,
    Vstore,
    Vmul,
    Vadd,
    Vmacc,
    Vredsum,
    Vmulvf,
    Vmaccvf,
}

impl Opcode {
    pub fn is_memory(self) -> bool {
        matches!(self, Opcode::Vload | Opcode::Vstore)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Vsetvl => "VSETVL",
            Opcode::Vload => "VLOAD",
            Opcode::Vstore => "VSTORE",
            Opcode::Vmul => "VMUL",
            Opcode::Vadd => "VADD",
            Opcode::Vmacc => "VMACC",
            Opcode::Vredsum => "VREDSUM",
            Opcode::Vmulvf => "VMULVF",
            Opcode::Vmaccvf => "VMACCVF",
        }
    }
}

/// Scalar operand broadcast to all elements (the `.vf` forms).
///
/// `source` is the memory address the scalar core loaded the value from, if
/// any. Byte accounting treats such scalars as kernel traffic; loop-invariant
/// constants held in an FP register for the whole kernel leave it `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarOperand {
    pub value: f32,
    pub source: Option<u64>,
}

impl ScalarOperand {
    pub fn constant(value: f32) -> Self {
        ScalarOperand { value, source: None }
    }

    pub fn loaded(value: f32, addr: u64) -> Self {
        ScalarOperand { value, source: Some(addr) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    None,
    Reg(RegId),
    Scalar(ScalarOperand),
}

impl Operand {
    pub fn reg(self) -> Option<RegId> {
        match self {
            Operand::Reg(r) => Some(r),
            _ => None,
        }
    }
}

/// Memory access shape for loads and stores.
///
/// `Strided` strides are in bytes and must be a nonzero multiple of the
/// element size. `Indexed` offsets are element counts read from `index_reg`
/// as unsigned integers and scaled by the element size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessPattern {
    UnitStride,
    Strided { stride: i64 },
    Indexed { index_reg: RegId },
}

impl fmt::Display for AccessPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessPattern::UnitStride => write!(f, "unit"),
            AccessPattern::Strided { stride } => write!(f, "strided({stride})"),
            AccessPattern::Indexed { index_reg } => write!(f, "indexed(v{index_reg})"),
        }
    }
}

/// One decoded instruction.
///
/// For `Vstore`, `dest` names the register whose contents are stored (it is
/// read, not written). `stream_end` bounds the logical stream a load belongs
/// to so a prefetcher never runs past the final address.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorInstruction {
    pub opcode: Opcode,
    pub dest: RegId,
    pub src1: Operand,
    pub src2: Operand,
    pub sew: u8,
    pub vl: u32,
    pub access: Option<AccessPattern>,
    pub base_address: Option<u64>,
    pub stream_end: Option<u64>,
}

impl VectorInstruction {
    fn new(opcode: Opcode, dest: RegId, src1: Operand, src2: Operand, vl: u32) -> Self {
        VectorInstruction {
            opcode,
            dest,
            src1,
            src2,
            sew: 32,
            vl,
            access: None,
            base_address: None,
            stream_end: None,
        }
    }

    pub fn vsetvl(vl: u32) -> Self {
        Self::new(Opcode::Vsetvl, 0, Operand::None, Operand::None, vl)
    }

    pub fn vload(dest: RegId, base: u64, pattern: AccessPattern, vl: u32) -> Self {
        let mut i = Self::new(Opcode::Vload, dest, Operand::None, Operand::None, vl);
        i.access = Some(pattern);
        i.base_address = Some(base);
        i
    }

    pub fn vstore(data: RegId, base: u64, pattern: AccessPattern, vl: u32) -> Self {
        let mut i = Self::new(Opcode::Vstore, data, Operand::None, Operand::None, vl);
        i.access = Some(pattern);
        i.base_address = Some(base);
        i
    }

    pub fn vmul(dest: RegId, vs1: RegId, vs2: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vmul, dest, Operand::Reg(vs1), Operand::Reg(vs2), vl)
    }

    pub fn vadd(dest: RegId, vs1: RegId, vs2: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vadd, dest, Operand::Reg(vs1), Operand::Reg(vs2), vl)
    }

    pub fn vmacc(dest: RegId, vs1: RegId, vs2: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vmacc, dest, Operand::Reg(vs1), Operand::Reg(vs2), vl)
    }

    pub fn vredsum(dest: RegId, init: RegId, data: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vredsum, dest, Operand::Reg(init), Operand::Reg(data), vl)
    }

    pub fn vmulvf(dest: RegId, scalar: ScalarOperand, vs2: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vmulvf, dest, Operand::Scalar(scalar), Operand::Reg(vs2), vl)
    }

    pub fn vmaccvf(dest: RegId, scalar: ScalarOperand, vs2: RegId, vl: u32) -> Self {
        Self::new(Opcode::Vmaccvf, dest, Operand::Scalar(scalar), Operand::Reg(vs2), vl)
    }

    /// Declare the last byte address (exclusive) of the stream this load
    /// walks, so a prefetcher can run ahead without over-reading.
    pub fn with_stream_end(mut self, end: u64) -> Self {
        self.stream_end = Some(end);
        self
    }

    /// Registers this instruction reads.
    ///
    /// `Vmacc`/`Vmaccvf` read their destination, stores read the stored
    /// register, and indexed accesses read the index register.
    pub fn reads(&self) -> Vec<RegId> {
        let mut r = Vec::with_capacity(3);
        if let Operand::Reg(x) = self.src1 {
            r.push(x);
        }
        if let Operand::Reg(x) = self.src2 {
            r.push(x);
        }
        match self.opcode {
            Opcode::Vmacc | Opcode::Vmaccvf | Opcode::Vstore => r.push(self.dest),
            _ => {}
        }
        if let Some(AccessPattern::Indexed { index_reg }) = self.access {
            r.push(index_reg);
        }
        r.dedup();
        r
    }

    /// Registers this instruction writes (at most one).
    pub fn writes(&self) -> Option<RegId> {
        match self.opcode {
            Opcode::Vsetvl | Opcode::Vstore => None,
            _ => Some(self.dest),
        }
    }

    /// Element index range written to the destination: reductions produce a
    /// single element, everything else writes `0..vl`.
    pub fn dest_elems(&self) -> u32 {
        match self.opcode {
            Opcode::Vredsum => 1,
            _ => self.vl,
        }
    }
}

impl fmt::Display for VectorInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.opcode.mnemonic())?;
        match self.opcode {
            Opcode::Vsetvl => {}
            _ => write!(f, " v{}", self.dest)?,
        }
        for op in [&self.src1, &self.src2] {
            match op {
                Operand::None => {}
                Operand::Reg(r) => write!(f, ", v{r}")?,
                Operand::Scalar(s) => write!(f, ", f{}", s.value)?,
            }
        }
        write!(f, ", vl={}", self.vl)?;
        if let Some(base) = self.base_address {
            write!(f, ", addr={base:#x}")?;
        }
        if let Some(pattern) = self.access {
            write!(f, ", pattern={pattern}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_reads_its_data_register() {
        let st = VectorInstruction::vstore(4, 0x1000, AccessPattern::UnitStride, 32);
        assert!(st.reads().contains(&4));
        assert_eq!(st.writes(), None);
    }

    #[test]
    fn macc_reads_destination() {
        let i = VectorInstruction::vmaccvf(5, ScalarOperand::constant(2.0), 1, 32);
        assert!(i.reads().contains(&5));
        assert!(i.reads().contains(&1));
        assert_eq!(i.writes(), Some(5));
    }

    #[test]
    fn indexed_load_reads_index_register() {
        let ld = VectorInstruction::vload(6, 0x2000, AccessPattern::Indexed { index_reg: 3 }, 8);
        assert_eq!(ld.reads(), vec![3]);
    }

    #[test]
    fn stream_text_round_trips_fields() {
        let ld = VectorInstruction::vload(1, 0x1000, AccessPattern::UnitStride, 32);
        let line = ld.to_string();
        assert_eq!(line, "VLOAD v1, vl=32, addr=0x1000, pattern=unit");
        let red = VectorInstruction::vredsum(8, 8, 6, 32);
        assert_eq!(red.to_string(), "VREDSUM v8, v8, v6, vl=32");
    }
}
