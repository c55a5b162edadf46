//! Appcode: the restricted bytecode that customizes storage hooks.
//!
//! Programs are written in `.gasm` assembly, checked once by [`verify`], and
//! executed by [`run`]. Verification guarantees termination within
//! `program.len()` steps and memory safety; runtime traps are limited to
//! division by zero and helper misuse.

mod asm;
pub mod helpers;
mod interp;
mod isa;
pub mod library;
mod map;
mod verifier;

pub use asm::{assemble, assemble_all, disassemble, AsmError, AsmErrorKind};
pub use helpers::{field, node_field, Helper};
pub use interp::{run, run_pipeline, ExecResult, HelperEnv, Outcome, TrapCode, OUTPUT_CAP, STATE_CAP};
pub use isa::{
    AluOp, HookKind, Instruction, JmpOp, Opcode, Program, Reg, Source, Width, FRAME_REG, MAX_PROGRAM_LEN, STACK_SIZE,
};
pub use map::{MapFull, ScratchMap, MAP_CAPACITY, MAP_VALUE_SIZE};
pub use verifier::{verify, VerifiedProgram, VerifyError, VerifyReason};

use thiserror::Error;

/// Failure to turn source text into a verified program.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error(transparent)]
    Asm(#[from] AsmError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Assembles and verifies a single-program source.
pub fn load(text: &str) -> Result<VerifiedProgram, LoadError> {
    Ok(verify(&assemble(text)?)?)
}

/// Assembles and verifies every program in a source.
pub fn load_all(text: &str) -> Result<Vec<VerifiedProgram>, LoadError> {
    let programs = assemble_all(text)?;
    programs.iter().map(|p| verify(p).map_err(LoadError::from)).collect()
}
