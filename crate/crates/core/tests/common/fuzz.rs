//! Random program generation for the termination fuzz.

use gryphon::appcode::{Helper, HelperEnv, HookKind, Instruction, Opcode, Program, Reg, Source, Width};
use gryphon::chain::NodeView;
use gryphon::ids::NodeId;
use rand::seq::SliceRandom;
use rand::Rng;

fn reg(r: &mut impl Rng) -> Reg {
    let i = if r.gen_bool(0.005) { 10 } else { r.gen_range(0..10) };
    Reg::new(i).expect("in range")
}

fn base(r: &mut impl Rng) -> Reg {
    if r.gen_bool(0.99) {
        Reg::R10
    } else {
        reg(r)
    }
}

fn mem_offset(r: &mut impl Rng, w: Width) -> i16 {
    if r.gen_bool(0.98) {
        let slots = 512 / w.bytes() as i16;
        -(r.gen_range(1..=slots) * w.bytes() as i16)
    } else {
        r.gen_range(-600..64)
    }
}

/// A mostly well-formed program: forward jumps, r10-relative memory and
/// known helpers dominate, with a sprinkling of everything else.
pub fn program(r: &mut impl Rng) -> Program {
    let len = r.gen_range(1..=48usize);
    let ops = Opcode::all();
    let hook = *HookKind::ALL.choose(r).expect("non-empty");
    let mut insns = Vec::with_capacity(len);
    for pc in 0..len {
        let last = pc + 1 == len;
        if (pc == 0 && r.gen_bool(0.8)) || (last && r.gen_bool(0.3)) {
            insns.push(Instruction::new(
                Opcode::Alu(gryphon::appcode::AluOp::Mov, Source::Imm),
                Reg::R0,
                Reg::R0,
                0,
                r.gen(),
            ));
            continue;
        }
        if last && r.gen_bool(0.9) {
            insns.push(Instruction::new(Opcode::Exit, Reg::R0, Reg::R0, 0, 0));
            continue;
        }
        let op = *ops.choose(r).expect("non-empty");
        let remaining = (len - pc - 1) as i16;
        let insn = match op {
            Opcode::Jmp(..) => {
                let off =
                    if r.gen_bool(0.98) && remaining > 0 { r.gen_range(0..remaining) } else { r.gen_range(-4..8) };
                Instruction::new(op, reg(r), reg(r), off, r.gen_range(-4..16))
            }
            Opcode::Ldx(w) => Instruction::new(op, reg(r), base(r), mem_offset(r, w), 0),
            Opcode::Stx(w) | Opcode::St(w) => Instruction::new(op, base(r), reg(r), mem_offset(r, w), r.gen()),
            Opcode::Call => {
                let allowed: Vec<i32> = Helper::ALL.iter().filter(|h| h.allowed_for(hook)).map(|h| h.id()).collect();
                let id = if r.gen_bool(0.98) {
                    *allowed.choose(r).expect("every hook has helpers")
                } else {
                    r.gen_range(0..16)
                };
                Instruction::new(op, Reg::R0, Reg::R0, 0, id)
            }
            _ => {
                let imm = if r.gen_bool(0.5) { r.gen_range(-8..600) } else { r.gen() };
                Instruction::new(op, reg(r), reg(r), 0, imm)
            }
        };
        insns.push(insn);
    }
    Program::new("fuzz", hook, insns)
}

/// An arbitrary context for running a program.
pub fn env(r: &mut impl Rng) -> HelperEnv {
    let mut env = HelperEnv::new();
    for id in 0..24u32 {
        if r.gen_bool(0.5) {
            env.ctx.insert(id, if r.gen_bool(0.5) { r.gen_range(0..600) } else { r.gen() });
        }
    }
    for i in 0..r.gen_range(0..6u64) {
        let mut v = NodeView::new(NodeId(i + 1));
        v.free_bytes = r.gen_range(0..1_000_000);
        v.load_milli = r.gen_range(0..1000);
        v.healthy = r.gen_bool(0.8);
        env.nodes.push(v);
    }
    env.object = (0..r.gen_range(0..64)).map(|_| r.gen()).collect();
    if r.gen_bool(0.5) {
        env.state = Some((0..r.gen_range(0..32)).map(|_| r.gen()).collect());
    }
    env.now_ns = r.gen();
    env
}
