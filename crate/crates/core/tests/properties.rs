mod common;

use std::collections::BTreeSet;
use std::path::Path;

use gryphon::appcode::{
    run, verify, AluOp, HelperEnv, HookKind, Instruction, JmpOp, Opcode, Outcome, Program, Reg, Source,
};
use gryphon::harness::{check, parse_trace, render_trace, run_scenario, Scenario};
use gryphon::ids::NodeId;
use gryphon::simnet::{Entity, Sim};
use proptest::prelude::*;

/// Straight-line arithmetic, conditional jumps and exits on r0..r9.
fn small_insn(len: usize) -> impl Strategy<Value = Instruction> {
    let reg = (0u8..10).prop_map(|i| Reg::new(i).unwrap());
    let off = -2i16..(len as i16 + 2);
    prop_oneof![
        4 => (prop::sample::select(AluOp::ALL.to_vec()), any::<bool>(), reg.clone(), reg.clone(), -4i32..64)
            .prop_map(|(op, imm, d, s, k)| {
                Instruction::new(Opcode::Alu(op, if imm { Source::Imm } else { Source::Reg }), d, s, 0, k)
            }),
        2 => (prop::sample::select(JmpOp::ALL.to_vec()), any::<bool>(), reg.clone(), reg, off, -4i32..8)
            .prop_map(|(op, imm, d, s, o, k)| {
                Instruction::new(Opcode::Jmp(op, if imm { Source::Imm } else { Source::Reg }), d, s, o, k)
            }),
        1 => Just(Instruction::new(Opcode::Exit, Reg::R0, Reg::R0, 0, 0)),
    ]
}

fn small_program() -> impl Strategy<Value = Program> {
    (1usize..14).prop_flat_map(|len| {
        prop::collection::vec(small_insn(len), len).prop_map(|insns| Program::new("p", HookKind::Compute, insns))
    })
}

/// Registers an instruction reads before writing.
fn reads(insn: &Instruction) -> Vec<usize> {
    let (d, s) = (insn.dst.index(), insn.src.index());
    match insn.opcode {
        Opcode::Alu(AluOp::Mov, Source::Imm) => vec![],
        Opcode::Alu(AluOp::Mov, Source::Reg) => vec![s],
        Opcode::Alu(_, Source::Imm) => vec![d],
        Opcode::Alu(_, Source::Reg) => vec![d, s],
        Opcode::Jmp(JmpOp::Ja, _) => vec![],
        Opcode::Jmp(_, Source::Imm) => vec![d],
        Opcode::Jmp(_, Source::Reg) => vec![d, s],
        Opcode::Exit => vec![0],
        _ => unreachable!("not generated"),
    }
}

/// Walks every path from the entry and accepts only if none of them reads
/// r0 before it is written or runs past the last instruction.
fn path_oracle(p: &Program) -> bool {
    let insns = &p.instructions;
    let len = insns.len();
    for (pc, insn) in insns.iter().enumerate() {
        if let Opcode::Jmp(..) = insn.opcode {
            if insn.offset <= 0 || pc + 1 + insn.offset as usize >= len {
                return false;
            }
        }
    }
    fn walk(insns: &[Instruction], pc: usize, r0: bool) -> bool {
        let Some(insn) = insns.get(pc) else { return false };
        if !r0 && reads(insn).contains(&0) {
            return false;
        }
        let r0 = r0 || matches!(insn.opcode, Opcode::Alu(..)) && insn.dst.index() == 0;
        match insn.opcode {
            Opcode::Exit => true,
            Opcode::Jmp(op, _) => {
                let target = pc + 1 + insn.offset as usize;
                walk(insns, target, r0) && (op == JmpOp::Ja || walk(insns, pc + 1, r0))
            }
            _ => walk(insns, pc + 1, r0),
        }
    }
    walk(insns, 0, false)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, ..ProptestConfig::default() })]

    #[test]
    fn verifier_matches_path_oracle(p in small_program()) {
        prop_assert_eq!(verify(&p).is_ok(), path_oracle(&p), "{}", gryphon::appcode::disassemble(&p));
    }

    #[test]
    fn verified_programs_finish_within_len_steps(p in small_program(), ctx in prop::collection::vec(any::<u64>(), 0..4)) {
        if let Ok(vp) = verify(&p) {
            let mut env = HelperEnv::new();
            for (i, v) in ctx.into_iter().enumerate() {
                env = env.with_ctx(i as u32, v);
            }
            let res = run(&vp, &mut env);
            prop_assert!(res.steps <= p.len());
            if let Outcome::Trap { pc, .. } = res.outcome {
                prop_assert!(pc < p.len());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn random_scenarios_satisfy_every_invariant(seed in any::<u64>()) {
        let sc = Scenario::parse(&common::random_scenario(seed)).unwrap();
        let out = run_scenario(&sc, Path::new(".")).unwrap();
        let report = check(&out.trace, &sc).unwrap();
        prop_assert!(report.passed(), "seed {}:\n{}", seed, report);
    }

    #[test]
    fn scenario_display_round_trips(seed in any::<u64>()) {
        let sc = Scenario::parse(&common::random_scenario(seed)).unwrap();
        let again = Scenario::parse(&sc.to_string()).unwrap();
        prop_assert_eq!(sc, again);
    }

    #[test]
    fn trace_render_round_trips(seed in any::<u64>()) {
        let sc = Scenario::parse(&common::random_scenario(seed)).unwrap();
        let out = run_scenario(&sc, Path::new(".")).unwrap();
        prop_assert_eq!(parse_trace(&render_trace(&out.trace)).unwrap(), out.trace);
    }

    #[test]
    fn same_seed_same_trace(seed in any::<u64>(), run_seed in any::<u64>()) {
        let mut sc = Scenario::parse(&common::random_scenario(seed)).unwrap();
        sc.sim.seed = run_seed;
        let a = run_scenario(&sc, Path::new(".")).unwrap();
        let b = run_scenario(&sc, Path::new(".")).unwrap();
        prop_assert_eq!(render_trace(&a.trace), render_trace(&b.trace));
    }
}

proptest! {
    #[test]
    fn simnet_pops_in_time_then_schedule_order(
        delays in prop::collection::vec(0u64..50, 1..60),
        cancels in prop::collection::btree_set(0usize..60, 0..20),
    ) {
        let mut sim: Sim<usize> = Sim::new(7);
        let handles: Vec<_> = delays
            .iter()
            .enumerate()
            .map(|(i, d)| sim.schedule(*d, Entity::Node(NodeId(1)), i))
            .collect();
        let cancelled: BTreeSet<usize> = cancels.into_iter().filter(|c| *c < handles.len()).collect();
        for c in &cancelled {
            prop_assert!(sim.cancel(handles[*c]));
        }
        let mut expect: Vec<(u64, usize)> =
            delays.iter().enumerate().filter(|(i, _)| !cancelled.contains(i)).map(|(i, d)| (*d, i)).collect();
        expect.sort();
        let mut got = Vec::new();
        while let Some(ev) = sim.pop() {
            prop_assert_eq!(sim.now(), ev.t);
            got.push((ev.t, ev.payload));
        }
        prop_assert_eq!(got, expect);
    }
}

#[test]
fn oracle_agrees_on_hand_picked_programs() {
    use gryphon::appcode::assemble;
    for (src, ok) in [
        ("mov r0, 1\nexit", true),
        ("exit", false),
        ("jeq r1, 0, +1\nmov r0, 1\nexit", false),
        ("mov r0, 0\njeq r1, 0, +1\nadd r0, 1\nexit", true),
        ("mov r0, 0\nja +1\nmov r0, 1", false),
        ("mov r0, 0\nja +1\nadd r0, r5\nexit", true),
    ] {
        let p = assemble(src).unwrap();
        assert_eq!(path_oracle(&p), ok, "{src}");
        assert_eq!(verify(&p).is_ok(), ok, "{src}");
    }
}
