//! Static verifier.
//!
//! Jumps must be strictly forward, so the program counter increases on every
//! step and a run executes at most `len` instructions. Because every edge goes
//! forward, instruction order is a topological order of the control-flow graph
//! and a single pass suffices to propagate abstract register types: the state
//! at an instruction is the join of the states flowing into it from earlier
//! instructions.

use std::fmt;

use thiserror::Error;

use super::helpers::Helper;
use super::isa::{AluOp, Instruction, JmpOp, Opcode, Program, Source, FRAME_REG, MAX_PROGRAM_LEN, STACK_SIZE};
use super::map::MAP_VALUE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VerifyReason {
    BackwardJump,
    OutOfRangeJump,
    FallOffEnd,
    UnsafeMemory,
    UninitializedR0,
    UnknownHelper,
    HookMismatch,
    TooLong,
}

impl VerifyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            VerifyReason::BackwardJump => "BackwardJump",
            VerifyReason::OutOfRangeJump => "OutOfRangeJump",
            VerifyReason::FallOffEnd => "FallOffEnd",
            VerifyReason::UnsafeMemory => "UnsafeMemory",
            VerifyReason::UninitializedR0 => "UninitializedR0",
            VerifyReason::UnknownHelper => "UnknownHelper",
            VerifyReason::HookMismatch => "HookMismatch",
            VerifyReason::TooLong => "TooLong",
        }
    }

    /// Rules checked on every instruction regardless of reachability.
    pub fn is_structural(self) -> bool {
        matches!(
            self,
            VerifyReason::BackwardJump
                | VerifyReason::OutOfRangeJump
                | VerifyReason::UnknownHelper
                | VerifyReason::HookMismatch
                | VerifyReason::TooLong
        )
    }
}

impl fmt::Display for VerifyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("VerifyError({reason}){}", .pc.map(|p| format!(" at instruction {p}")).unwrap_or_default())]
pub struct VerifyError {
    pub reason: VerifyReason,
    pub pc: Option<usize>,
}

impl VerifyError {
    fn at(reason: VerifyReason, pc: usize) -> Self {
        VerifyError { reason, pc: Some(pc) }
    }
}

/// A program that passed verification. Only [`verify`] constructs one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedProgram {
    program: Program,
    max_steps: usize,
}

impl VerifiedProgram {
    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn name(&self) -> &str {
        &self.program.name
    }

    pub fn hook_kind(&self) -> super::HookKind {
        self.program.hook_kind
    }
}

/// Abstract type of a register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ty {
    Uninit,
    Scalar,
    /// Pointer to a live 64-byte scratch-map value.
    MapValue,
    /// Result of `map_lookup` before a null check.
    MapValueOrNull,
}

impl Ty {
    fn join(self, other: Ty) -> Ty {
        use Ty::*;
        match (self, other) {
            (a, b) if a == b => a,
            (Uninit, _) | (_, Uninit) => Uninit,
            (MapValue, MapValueOrNull) | (MapValueOrNull, MapValue) => MapValueOrNull,
            _ => Scalar,
        }
    }
}

/// Types of r0..r9; r10 is always the frame pointer.
type Regs = [Ty; 10];

fn join_into(slot: &mut Option<Regs>, incoming: Regs) {
    match slot {
        None => *slot = Some(incoming),
        Some(existing) => {
            for (e, i) in existing.iter_mut().zip(incoming) {
                *e = e.join(i);
            }
        }
    }
}

/// Checks a program and, on success, wraps it as a [`VerifiedProgram`] with
/// `max_steps` equal to its length.
pub fn verify(program: &Program) -> Result<VerifiedProgram, VerifyError> {
    let insns = &program.instructions;
    let len = insns.len();
    if len > MAX_PROGRAM_LEN {
        return Err(VerifyError { reason: VerifyReason::TooLong, pc: None });
    }
    if len == 0 {
        return Err(VerifyError { reason: VerifyReason::FallOffEnd, pc: None });
    }
    for (pc, insn) in insns.iter().enumerate() {
        check_structure(program, pc, insn)?;
    }

    let mut states: Vec<Option<Regs>> = vec![None; len];
    let mut entry = [Ty::Scalar; 10];
    entry[0] = Ty::Uninit;
    states[0] = Some(entry);

    for pc in 0..len {
        let Some(regs) = states[pc] else { continue };
        let insn = &insns[pc];
        match step(pc, insn, regs)? {
            Flow::Exit => {}
            Flow::Next(next) => {
                if pc + 1 >= len {
                    return Err(VerifyError::at(VerifyReason::FallOffEnd, pc));
                }
                join_into(&mut states[pc + 1], next);
            }
            Flow::Jump { target, taken, fallthrough } => {
                join_into(&mut states[target], taken);
                if let Some(ft) = fallthrough {
                    if pc + 1 >= len {
                        return Err(VerifyError::at(VerifyReason::FallOffEnd, pc));
                    }
                    join_into(&mut states[pc + 1], ft);
                }
            }
        }
    }
    Ok(VerifiedProgram { program: program.clone(), max_steps: len })
}

fn check_structure(program: &Program, pc: usize, insn: &Instruction) -> Result<(), VerifyError> {
    let len = program.instructions.len();
    match insn.opcode {
        Opcode::Jmp(..) => {
            if insn.offset <= 0 {
                return Err(VerifyError::at(VerifyReason::BackwardJump, pc));
            }
            let target = pc + 1 + insn.offset as usize;
            if target >= len {
                return Err(VerifyError::at(VerifyReason::OutOfRangeJump, pc));
            }
        }
        Opcode::Call => {
            let helper = Helper::from_id(insn.imm).ok_or(VerifyError::at(VerifyReason::UnknownHelper, pc))?;
            if !helper.allowed_for(program.hook_kind) {
                return Err(VerifyError::at(VerifyReason::HookMismatch, pc));
            }
        }
        Opcode::Alu(..) | Opcode::Ldx(_) if insn.dst.index() == FRAME_REG as usize => {
            return Err(VerifyError::at(VerifyReason::UnsafeMemory, pc));
        }
        _ => {}
    }
    Ok(())
}

enum Flow {
    Exit,
    Next(Regs),
    Jump { target: usize, taken: Regs, fallthrough: Option<Regs> },
}

fn read(regs: &Regs, reg: usize, pc: usize) -> Result<Ty, VerifyError> {
    if reg == FRAME_REG as usize {
        return Ok(Ty::Scalar);
    }
    match regs[reg] {
        Ty::Uninit => Err(VerifyError::at(VerifyReason::UninitializedR0, pc)),
        t => Ok(t),
    }
}

/// Validates a `[base + off, base + off + width)` access. Accesses must be
/// naturally aligned and lie inside the frame or a map-value window.
fn check_access(regs: &Regs, base: usize, off: i16, width: usize, pc: usize) -> Result<(), VerifyError> {
    let lo = off as i64;
    let hi = lo + width as i64;
    let aligned = lo.rem_euclid(width as i64) == 0;
    let ok = aligned
        && if base == FRAME_REG as usize {
            lo >= -(STACK_SIZE as i64) && hi <= 0
        } else {
            read(regs, base, pc)? == Ty::MapValue && lo >= 0 && hi <= MAP_VALUE_SIZE as i64
        };
    if ok {
        Ok(())
    } else {
        Err(VerifyError::at(VerifyReason::UnsafeMemory, pc))
    }
}

fn step(pc: usize, insn: &Instruction, mut regs: Regs) -> Result<Flow, VerifyError> {
    let dst = insn.dst.index();
    let src = insn.src.index();
    match insn.opcode {
        Opcode::Alu(op, source) => {
            let result = match (op, source) {
                (AluOp::Mov, Source::Reg) => read(&regs, src, pc)?,
                (AluOp::Mov, Source::Imm) => Ty::Scalar,
                (_, s) => {
                    read(&regs, dst, pc)?;
                    if s == Source::Reg {
                        read(&regs, src, pc)?;
                    }
                    Ty::Scalar
                }
            };
            regs[dst] = result;
            Ok(Flow::Next(regs))
        }
        Opcode::Jmp(op, source) => {
            let target = pc + 1 + insn.offset as usize;
            if op == JmpOp::Ja {
                return Ok(Flow::Jump { target, taken: regs, fallthrough: None });
            }
            let dst_ty = read(&regs, dst, pc)?;
            if source == Source::Reg {
                read(&regs, src, pc)?;
            }
            let mut taken = regs;
            let mut fallthrough = regs;
            let null_check = source == Source::Imm && insn.imm == 0 && dst_ty == Ty::MapValueOrNull;
            if null_check {
                match op {
                    JmpOp::Jeq => {
                        taken[dst] = Ty::Scalar;
                        fallthrough[dst] = Ty::MapValue;
                    }
                    JmpOp::Jne => {
                        taken[dst] = Ty::MapValue;
                        fallthrough[dst] = Ty::Scalar;
                    }
                    _ => {}
                }
            }
            Ok(Flow::Jump { target, taken, fallthrough: Some(fallthrough) })
        }
        Opcode::Ldx(w) => {
            check_access(&regs, src, insn.offset, w.bytes(), pc)?;
            regs[dst] = Ty::Scalar;
            Ok(Flow::Next(regs))
        }
        Opcode::Stx(w) => {
            check_access(&regs, dst, insn.offset, w.bytes(), pc)?;
            read(&regs, src, pc)?;
            Ok(Flow::Next(regs))
        }
        Opcode::St(w) => {
            check_access(&regs, dst, insn.offset, w.bytes(), pc)?;
            Ok(Flow::Next(regs))
        }
        Opcode::Call => {
            let helper = Helper::from_id(insn.imm).expect("checked structurally");
            if helper.mutates_map() {
                for t in regs.iter_mut() {
                    if matches!(t, Ty::MapValue | Ty::MapValueOrNull) {
                        *t = Ty::Scalar;
                    }
                }
            }
            regs[0] = if helper == Helper::MapLookup { Ty::MapValueOrNull } else { Ty::Scalar };
            for t in regs.iter_mut().take(6).skip(1) {
                *t = Ty::Scalar;
            }
            Ok(Flow::Next(regs))
        }
        Opcode::Exit => {
            if regs[0] == Ty::Uninit {
                return Err(VerifyError::at(VerifyReason::UninitializedR0, pc));
            }
            Ok(Flow::Exit)
        }
    }
}
