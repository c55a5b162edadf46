//! Interpreter for verified programs.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use super::helpers::{field, Helper};
use super::isa::{AluOp, JmpOp, Opcode, Source, FRAME_REG, STACK_SIZE};
use super::map::{ScratchMap, MAP_VALUE_SIZE};
use super::verifier::VerifiedProgram;
use crate::chain::NodeView;
use crate::ids::NodeId;

pub const STATE_CAP: usize = 256;
pub const OUTPUT_CAP: usize = 4096;

/// Runtime value of `r10`.
const STACK_TOP: u64 = 0x0000_0001_0000_0000;
/// Base of the address range used for scratch-map value pointers.
const MAP_PTR_BASE: u64 = 0x0000_4000_0000_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapCode {
    DivByZero,
    HelperFault,
}

impl TrapCode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrapCode::DivByZero => "DivByZero",
            TrapCode::HelperFault => "HelperFault",
        }
    }
}

impl fmt::Display for TrapCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Return(u64),
    Trap { code: TrapCode, pc: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub outcome: Outcome,
    pub output_nodes: Vec<NodeId>,
    pub output_bytes: Vec<u8>,
    pub new_state: Option<Vec<u8>>,
    pub steps: usize,
    pub log_codes: Vec<u64>,
}

impl ExecResult {
    pub fn r0(&self) -> Option<u64> {
        match self.outcome {
            Outcome::Return(v) => Some(v),
            Outcome::Trap { .. } => None,
        }
    }

    pub fn trap(&self) -> Option<TrapCode> {
        match self.outcome {
            Outcome::Return(_) => None,
            Outcome::Trap { code, .. } => Some(code),
        }
    }
}

/// Everything a program can observe, plus its scratch map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HelperEnv {
    pub ctx: BTreeMap<u32, u64>,
    pub nodes: Vec<NodeView>,
    /// Object bytes for `compute` / `gc_scan` hooks.
    pub object: Vec<u8>,
    /// Consistency state blob; `None` when the object has none.
    pub state: Option<Vec<u8>>,
    pub map: ScratchMap,
    pub now_ns: u64,
}

impl HelperEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_ctx(mut self, id: u32, value: u64) -> Self {
        self.ctx.insert(id, value);
        self
    }
}

struct Machine<'e> {
    regs: [u64; 11],
    stack: [u8; STACK_SIZE],
    env: &'e mut HelperEnv,
    output_nodes: Vec<NodeId>,
    output_bytes: Vec<u8>,
    new_state: Option<Vec<u8>>,
    log_codes: Vec<u64>,
}

type Fault = TrapCode;

fn stack_range(off: u64, len: u64) -> Result<Range<usize>, Fault> {
    let off = off as i64;
    if off >= 0 || len > STACK_SIZE as u64 {
        return Err(TrapCode::HelperFault);
    }
    let lo = STACK_SIZE as i64 + off;
    let hi = lo + len as i64;
    if lo < 0 || hi > STACK_SIZE as i64 {
        return Err(TrapCode::HelperFault);
    }
    Ok(lo as usize..hi as usize)
}

impl Machine<'_> {
    fn operand(&self, source: Source, src: usize, imm: i32) -> u64 {
        match source {
            Source::Imm => imm as i64 as u64,
            Source::Reg => self.regs[src],
        }
    }

    fn load(&self, base: usize, off: i16, width: usize) -> Result<u64, Fault> {
        let mut buf = [0u8; 8];
        if base == FRAME_REG as usize {
            let lo = (STACK_SIZE as i64 + off as i64) as usize;
            buf[..width].copy_from_slice(&self.stack[lo..lo + width]);
        } else {
            let (slot, inner) = self.map_ptr(self.regs[base], off, width)?;
            let bytes = self.env.map.slot_bytes(slot).ok_or(TrapCode::HelperFault)?;
            buf[..width].copy_from_slice(&bytes[inner..inner + width]);
        }
        Ok(u64::from_le_bytes(buf))
    }

    fn store(&mut self, base: usize, off: i16, width: usize, value: u64) -> Result<(), Fault> {
        let bytes = value.to_le_bytes();
        if base == FRAME_REG as usize {
            let lo = (STACK_SIZE as i64 + off as i64) as usize;
            self.stack[lo..lo + width].copy_from_slice(&bytes[..width]);
            Ok(())
        } else {
            let (slot, inner) = self.map_ptr(self.regs[base], off, width)?;
            if self.env.map.write_slot(slot, inner, &bytes[..width]) {
                Ok(())
            } else {
                Err(TrapCode::HelperFault)
            }
        }
    }

    fn map_ptr(&self, ptr: u64, off: i16, width: usize) -> Result<(usize, usize), Fault> {
        let rel = ptr.checked_sub(MAP_PTR_BASE).ok_or(TrapCode::HelperFault)?;
        let slot = (rel / MAP_VALUE_SIZE as u64) as usize;
        let inner = (rel % MAP_VALUE_SIZE as u64) as i64 + off as i64;
        if inner < 0 || inner as usize + width > MAP_VALUE_SIZE {
            return Err(TrapCode::HelperFault);
        }
        Ok((slot, inner as usize))
    }

    fn stack_key(&self, off: u64) -> Result<u64, Fault> {
        let r = stack_range(off, 8)?;
        Ok(u64::from_le_bytes(self.stack[r].try_into().expect("8 bytes")))
    }

    fn call(&mut self, helper: Helper) -> Result<u64, Fault> {
        let [_, a1, a2, a3, ..] = self.regs;
        let fault = Err(TrapCode::HelperFault);
        match helper {
            Helper::CtxU64 => Ok(u32::try_from(a1).ok().and_then(|f| self.env.ctx.get(&f).copied()).unwrap_or(0)),
            Helper::CtxNodeCount => Ok(self.env.nodes.len() as u64),
            Helper::CtxNodeU64 => {
                let node = usize::try_from(a1).ok().and_then(|i| self.env.nodes.get(i));
                node.and_then(|n| n.field(a2)).ok_or(TrapCode::HelperFault)
            }
            Helper::EmitNode => {
                let id = NodeId(a1);
                if !self.env.nodes.iter().any(|n| n.node_id == id) {
                    return fault;
                }
                if self.output_nodes.contains(&id) {
                    Ok(1)
                } else {
                    self.output_nodes.push(id);
                    Ok(0)
                }
            }
            Helper::StateRead => {
                if a2 > STATE_CAP as u64 {
                    return fault;
                }
                let range = stack_range(a1, a2)?;
                let state = self.env.state.as_deref().unwrap_or(&[]);
                let n = range.len().min(state.len());
                self.stack[range.start..range.start + n].copy_from_slice(&state[..n]);
                Ok(n as u64)
            }
            Helper::StateWrite => {
                if a2 > STATE_CAP as u64 {
                    return fault;
                }
                let range = stack_range(a1, a2)?;
                self.new_state = Some(self.stack[range].to_vec());
                Ok(0)
            }
            Helper::ObjRead => {
                let range = stack_range(a2, a3)?;
                let obj = &self.env.object;
                let Ok(start) = usize::try_from(a1) else { return Ok(0) };
                if start >= obj.len() {
                    return Ok(0);
                }
                let n = range.len().min(obj.len() - start);
                self.stack[range.start..range.start + n].copy_from_slice(&obj[start..start + n]);
                Ok(n as u64)
            }
            Helper::OutWrite => {
                let range = stack_range(a1, a2)?;
                if self.output_bytes.len() + range.len() > OUTPUT_CAP {
                    return fault;
                }
                self.output_bytes.extend_from_slice(&self.stack[range]);
                Ok(self.output_bytes.len() as u64)
            }
            Helper::NowNs => Ok(self.env.now_ns),
            Helper::Log => {
                self.log_codes.push(a1);
                Ok(0)
            }
            Helper::MapLookup => {
                let key = self.stack_key(a1)?;
                Ok(match self.env.map.slot_of(key) {
                    Some(slot) => MAP_PTR_BASE + (slot * MAP_VALUE_SIZE) as u64,
                    None => 0,
                })
            }
            Helper::MapUpdate => {
                let key = self.stack_key(a1)?;
                if a3 > MAP_VALUE_SIZE as u64 {
                    return fault;
                }
                let range = stack_range(a2, a3)?;
                let value = self.stack[range].to_vec();
                Ok(match self.env.map.update(key, &value) {
                    Ok(()) => 0,
                    Err(_) => u64::MAX,
                })
            }
            Helper::MapDelete => {
                let key = self.stack_key(a1)?;
                Ok(if self.env.map.delete(key) { 0 } else { u64::MAX })
            }
        }
    }
}

fn alu(op: AluOp, a: u64, b: u64) -> Result<u64, Fault> {
    Ok(match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Div => a.checked_div(b).ok_or(TrapCode::DivByZero)?,
        AluOp::Mod => a.checked_rem(b).ok_or(TrapCode::DivByZero)?,
        AluOp::And => a & b,
        AluOp::Or => a | b,
        AluOp::Xor => a ^ b,
        AluOp::Lsh => a << (b & 63),
        AluOp::Rsh => a >> (b & 63),
        AluOp::Arsh => ((a as i64) >> (b & 63)) as u64,
        AluOp::Mov => b,
        AluOp::Neg => (a as i64).wrapping_neg() as u64,
    })
}

/// Executes `vp` against `env`. Only `env.map` may be modified, and a trapped
/// run leaves it exactly as it was.
pub fn run(vp: &VerifiedProgram, env: &mut HelperEnv) -> ExecResult {
    let map_before = env.map.clone();
    let insns = &vp.program().instructions;
    let mut m = Machine {
        regs: [0; 11],
        stack: [0; STACK_SIZE],
        env,
        output_nodes: Vec::new(),
        output_bytes: Vec::new(),
        new_state: None,
        log_codes: Vec::new(),
    };
    m.regs[FRAME_REG as usize] = STACK_TOP;
    let mut pc = 0usize;
    let mut steps = 0usize;

    let outcome = loop {
        let insn = insns[pc];
        steps += 1;
        let dst = insn.dst.index();
        let src = insn.src.index();
        let mut next = pc + 1;
        let res: Result<Option<u64>, Fault> = (|| {
            match insn.opcode {
                Opcode::Alu(op, source) => {
                    let b = m.operand(source, src, insn.imm);
                    m.regs[dst] = alu(op, m.regs[dst], b)?;
                }
                Opcode::Jmp(op, source) => {
                    let b = m.operand(source, src, insn.imm);
                    if op == JmpOp::Ja || op.taken(m.regs[dst], b) {
                        next = pc + 1 + insn.offset as usize;
                    }
                }
                Opcode::Ldx(w) => m.regs[dst] = m.load(src, insn.offset, w.bytes())?,
                Opcode::Stx(w) => m.store(dst, insn.offset, w.bytes(), m.regs[src])?,
                Opcode::St(w) => m.store(dst, insn.offset, w.bytes(), insn.imm as i64 as u64)?,
                Opcode::Call => {
                    let helper = Helper::from_id(insn.imm).ok_or(TrapCode::HelperFault)?;
                    m.regs[0] = m.call(helper)?;
                }
                Opcode::Exit => return Ok(Some(m.regs[0])),
            }
            Ok(None)
        })();
        match res {
            Ok(Some(r0)) => break Outcome::Return(r0),
            Ok(None) => pc = next,
            Err(code) => break Outcome::Trap { code, pc },
        }
    };
    debug_assert!(steps <= vp.max_steps());

    let Machine { output_nodes, output_bytes, new_state, log_codes, env, .. } = m;
    match outcome {
        Outcome::Return(_) => ExecResult { outcome, output_nodes, output_bytes, new_state, steps, log_codes },
        Outcome::Trap { .. } => {
            env.map = map_before;
            ExecResult {
                outcome,
                output_nodes: Vec::new(),
                output_bytes: Vec::new(),
                new_state: None,
                steps,
                log_codes,
            }
        }
    }
}

/// Runs compute programs in sequence; each stage sees the previous stage's
/// output buffer as its object bytes. Stops at the first trap.
pub fn run_pipeline(stages: &[VerifiedProgram], env: &mut HelperEnv) -> ExecResult {
    assert!(!stages.is_empty(), "pipeline needs at least one stage");
    let mut last = None;
    for (i, vp) in stages.iter().enumerate() {
        if let Some(prev) = last.take() {
            let prev: ExecResult = prev;
            env.object = prev.output_bytes;
        }
        env.ctx.insert(field::CMP_STAGE, i as u64);
        env.ctx.insert(field::CMP_VALUE_LEN, env.object.len() as u64);
        let res = run(vp, env);
        if res.trap().is_some() {
            return res;
        }
        last = Some(res);
    }
    last.expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appcode::{assemble, verify, HookKind};

    fn exec(src: &str, env: &mut HelperEnv) -> ExecResult {
        let vp = verify(&assemble(src).unwrap()).unwrap();
        run(&vp, env)
    }

    #[test]
    fn add_program() {
        let r = exec("mov r0, 5\nadd r0, 3\nexit", &mut HelperEnv::new());
        assert_eq!(r.r0(), Some(8));
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn div_by_zero_traps() {
        let r = exec("mov r1, 0\nmov r0, 4\ndiv r0, r1\nexit", &mut HelperEnv::new());
        assert_eq!(r.outcome, Outcome::Trap { code: TrapCode::DivByZero, pc: 2 });
        assert_eq!(r.r0(), None);
    }

    #[test]
    fn trap_rolls_back_map_and_state() {
        let src = "
            .program t consistency_write
            stdw [r10-8], 42
            mov r1, -8
            mov r2, -8
            mov r3, 8
            call map_update
            mov r1, -8
            mov r2, 8
            call state_write
            mov r0, 1
            mov r1, 0
            mod r0, r1
            exit";
        let mut env = HelperEnv::new();
        let r = exec(src, &mut env);
        assert_eq!(r.trap(), Some(TrapCode::DivByZero));
        assert!(env.map.is_empty());
        assert_eq!(r.new_state, None);
    }

    #[test]
    fn shifts_mask_to_six_bits() {
        let r = exec("mov r0, 1\nlsh r0, 65\nexit", &mut HelperEnv::new());
        assert_eq!(r.r0(), Some(2));
        let r = exec("mov r0, -8\narsh r0, 1\nexit", &mut HelperEnv::new());
        assert_eq!(r.r0(), Some((-4i64) as u64));
        let r = exec("mov r0, -8\nrsh r0, 60\nexit", &mut HelperEnv::new());
        assert_eq!(r.r0(), Some(0xf));
    }

    #[test]
    fn map_value_pointer_reads_and_writes() {
        let src = "
            stdw [r10-8], 5
            stdw [r10-16], 100
            mov r1, -8
            mov r2, -16
            mov r3, 8
            call map_update
            mov r1, -8
            call map_lookup
            jeq r0, 0, +4
            ldxdw r6, [r0+0]
            add r6, 1
            stxdw [r0+8], r6
            mov r0, r6
            exit";
        let mut env = HelperEnv::new();
        let r = exec(&format!("{src}\nmov r0, 0\nexit"), &mut env);
        assert_eq!(r.r0(), Some(101));
        let stored = env.map.get(5).unwrap();
        assert_eq!(stored.len(), 16);
        assert_eq!(u64::from_le_bytes(stored[8..16].try_into().unwrap()), 101);
    }

    #[test]
    fn emit_unknown_node_faults() {
        let mut env = HelperEnv::new();
        env.nodes = vec![NodeView::new(NodeId(1))];
        let src = ".program p replica_place\nmov r1, 2\ncall emit_node\nexit";
        let r = exec(src, &mut env);
        assert_eq!(r.trap(), Some(TrapCode::HelperFault));
        let src = ".program p replica_place\nmov r1, 1\ncall emit_node\nmov r1, 1\ncall emit_node\nexit";
        let r = exec(src, &mut env);
        assert_eq!(r.output_nodes, vec![NodeId(1)]);
        assert_eq!(r.r0(), Some(1));
    }

    #[test]
    fn pipeline_feeds_output_forward() {
        let double = verify(&assemble(
            ".program d compute\nmov r1, 0\nmov r2, -8\nmov r3, 8\ncall obj_read\nldxb r6, [r10-8]\nlsh r6, 1\nstxb [r10-8], r6\nmov r1, -8\nmov r2, 1\ncall out_write\nmov r0, r6\nexit",
        ).unwrap())
        .unwrap();
        assert_eq!(double.hook_kind(), HookKind::Compute);
        let mut env = HelperEnv::new();
        env.object = vec![3];
        let r = run_pipeline(&[double.clone(), double.clone(), double], &mut env);
        assert_eq!(r.r0(), Some(24));
        assert_eq!(r.output_bytes, vec![24]);
    }
}
