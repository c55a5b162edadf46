//! Textual `.gasm` assembler and disassembler.
//!
//! One instruction per line. Operands are comma separated; memory operands
//! are written `[rN+off]` / `[rN-off]`; jump targets are either a signed
//! displacement (`+3`) or a label defined as `name:` (alone on its line or
//! in front of an instruction). `;` starts a comment. A file may hold several
//! programs, each introduced by `.program <name> <hook_kind>`; a file without
//! that header is a single `compute` program named `main`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use super::helpers::Helper;
use super::isa::{AluOp, HookKind, Instruction, JmpOp, Opcode, Program, Reg, Source, Width};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("label `{0}` resolves to a non-forward offset")]
    BackwardLabel(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unknown helper `{0}`")]
    UnknownHelper(String),
    #[error("expected exactly one program, found {0}")]
    ProgramCount(usize),
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    err(line, AsmErrorKind::Syntax(msg.into()))
}

/// Assembles a source holding exactly one program.
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    let mut programs = assemble_all(text)?;
    if programs.len() != 1 {
        return Err(err(0, AsmErrorKind::ProgramCount(programs.len())));
    }
    Ok(programs.remove(0))
}

/// Assembles every program in a source file, in order.
pub fn assemble_all(text: &str) -> Result<Vec<Program>, AsmError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find(';') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('.') {
            let mut parts = rest.split_whitespace();
            match parts.next().map(|d| d.to_ascii_lowercase()).as_deref() {
                Some("program") => {
                    let name = parts.next().ok_or_else(|| syntax(line_no, ".program needs a name"))?;
                    let hook = parts
                        .next()
                        .ok_or_else(|| syntax(line_no, ".program needs a hook kind"))?
                        .parse::<HookKind>()
                        .map_err(|e| syntax(line_no, e))?;
                    if parts.next().is_some() {
                        return Err(syntax(line_no, "trailing tokens after .program"));
                    }
                    sections.push(Section::new(name, hook, line_no));
                }
                _ => return Err(syntax(line_no, format!("unknown directive `.{rest}`"))),
            }
            continue;
        }
        if sections.is_empty() {
            sections.push(Section::new("main", HookKind::Compute, line_no));
        }
        let section = sections.last_mut().expect("section exists");
        let mut body = line;
        if let Some(colon) = body.find(':') {
            let label = body[..colon].trim();
            if is_ident(label) {
                if section.labels.insert(label.to_string(), section.lines.len()).is_some() {
                    return Err(err(line_no, AsmErrorKind::DuplicateLabel(label.into())));
                }
                body = body[colon + 1..].trim();
                if body.is_empty() {
                    continue;
                }
            }
        }
        section.lines.push((line_no, body.to_string()));
    }
    sections.into_iter().map(Section::finish).collect()
}

struct Section {
    name: String,
    hook: HookKind,
    labels: BTreeMap<String, usize>,
    lines: Vec<(usize, String)>,
}

impl Section {
    fn new(name: &str, hook: HookKind, _line: usize) -> Self {
        Section { name: name.to_string(), hook, labels: BTreeMap::new(), lines: Vec::new() }
    }

    fn finish(self) -> Result<Program, AsmError> {
        let mut instructions = Vec::with_capacity(self.lines.len());
        for (pc, (line_no, text)) in self.lines.iter().enumerate() {
            instructions.push(parse_instruction(*line_no, pc, text, &self.labels)?);
        }
        Ok(Program::new(self.name, self.hook, instructions))
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_reg(line: usize, tok: &str) -> Result<Reg, AsmError> {
    let t = tok.trim();
    let digits = t
        .strip_prefix('r')
        .or_else(|| t.strip_prefix('R'))
        .ok_or_else(|| syntax(line, format!("expected register, found `{t}`")))?;
    digits.parse::<u8>().ok().and_then(Reg::new).ok_or_else(|| syntax(line, format!("bad register `{t}`")))
}

fn is_reg(tok: &str) -> bool {
    let t = tok.trim();
    (t.starts_with('r') || t.starts_with('R')) && t[1..].parse::<u8>().is_ok()
}

fn parse_int(line: usize, tok: &str) -> Result<i64, AsmError> {
    let t = tok.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16)
    } else {
        body.parse::<i64>()
    }
    .map_err(|_| syntax(line, format!("bad integer `{t}`")))?;
    Ok(if neg { -magnitude } else { magnitude })
}

fn parse_imm(line: usize, tok: &str) -> Result<i32, AsmError> {
    let v = parse_int(line, tok)?;
    if let Ok(i) = i32::try_from(v) {
        Ok(i)
    } else if let Ok(u) = u32::try_from(v) {
        Ok(u as i32)
    } else {
        Err(syntax(line, format!("immediate `{}` out of 32-bit range", tok.trim())))
    }
}

fn parse_mem(line: usize, tok: &str) -> Result<(Reg, i16), AsmError> {
    let t = tok.trim();
    let inner = t
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("expected memory operand, found `{t}`")))?;
    let split = inner.find(['+', '-']);
    let (reg, off) = match split {
        Some(p) => (&inner[..p], parse_int(line, &inner[p..])?),
        None => (inner, 0),
    };
    let off = i16::try_from(off).map_err(|_| syntax(line, "memory offset out of 16-bit range"))?;
    Ok((parse_reg(line, reg)?, off))
}

fn parse_target(line: usize, pc: usize, tok: &str, labels: &BTreeMap<String, usize>) -> Result<i16, AsmError> {
    let t = tok.trim();
    if t.starts_with('+') || t.starts_with('-') || t.chars().next().is_some_and(|c| c.is_ascii_digit()) {
        let v = parse_int(line, t)?;
        return i16::try_from(v).map_err(|_| syntax(line, "jump offset out of 16-bit range"));
    }
    let target = *labels.get(t).ok_or_else(|| err(line, AsmErrorKind::UndefinedLabel(t.into())))?;
    let off = target as i64 - pc as i64 - 1;
    if off <= 0 {
        return Err(err(line, AsmErrorKind::BackwardLabel(t.into())));
    }
    i16::try_from(off).map_err(|_| syntax(line, "jump offset out of 16-bit range"))
}

fn width_from_suffix(s: &str) -> Option<Width> {
    match s {
        "b" => Some(Width::B),
        "h" => Some(Width::H),
        "w" => Some(Width::W),
        "dw" => Some(Width::DW),
        _ => None,
    }
}

fn parse_instruction(
    line: usize,
    pc: usize,
    text: &str,
    labels: &BTreeMap<String, usize>,
) -> Result<Instruction, AsmError> {
    let (mnemonic, rest) = match text.find(char::is_whitespace) {
        Some(p) => (&text[..p], text[p..].trim()),
        None => (text, ""),
    };
    let m = mnemonic.to_ascii_lowercase();
    let ops: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
    let arity = |n: usize| -> Result<(), AsmError> {
        if ops.len() == n {
            Ok(())
        } else {
            Err(syntax(line, format!("`{m}` takes {n} operand(s), found {}", ops.len())))
        }
    };
    let r0 = Reg::R0;

    if let Some(op) = AluOp::ALL.into_iter().find(|op| op.mnemonic() == m) {
        if op == AluOp::Neg {
            arity(1)?;
            return Ok(Instruction::new(Opcode::Alu(op, Source::Imm), parse_reg(line, ops[0])?, r0, 0, 0));
        }
        arity(2)?;
        let dst = parse_reg(line, ops[0])?;
        return if is_reg(ops[1]) {
            Ok(Instruction::new(Opcode::Alu(op, Source::Reg), dst, parse_reg(line, ops[1])?, 0, 0))
        } else {
            Ok(Instruction::new(Opcode::Alu(op, Source::Imm), dst, r0, 0, parse_imm(line, ops[1])?))
        };
    }
    if let Some(op) = JmpOp::ALL.into_iter().find(|op| op.mnemonic() == m) {
        if op == JmpOp::Ja {
            arity(1)?;
            let off = parse_target(line, pc, ops[0], labels)?;
            return Ok(Instruction::new(Opcode::Jmp(op, Source::Imm), r0, r0, off, 0));
        }
        arity(3)?;
        let dst = parse_reg(line, ops[0])?;
        let off = parse_target(line, pc, ops[2], labels)?;
        return if is_reg(ops[1]) {
            Ok(Instruction::new(Opcode::Jmp(op, Source::Reg), dst, parse_reg(line, ops[1])?, off, 0))
        } else {
            Ok(Instruction::new(Opcode::Jmp(op, Source::Imm), dst, r0, off, parse_imm(line, ops[1])?))
        };
    }
    if let Some(w) = m.strip_prefix("ldx").and_then(width_from_suffix) {
        arity(2)?;
        let dst = parse_reg(line, ops[0])?;
        let (src, off) = parse_mem(line, ops[1])?;
        return Ok(Instruction::new(Opcode::Ldx(w), dst, src, off, 0));
    }
    if let Some(w) = m.strip_prefix("stx").and_then(width_from_suffix) {
        arity(2)?;
        let (dst, off) = parse_mem(line, ops[0])?;
        return Ok(Instruction::new(Opcode::Stx(w), dst, parse_reg(line, ops[1])?, off, 0));
    }
    if let Some(w) = m.strip_prefix("st").and_then(width_from_suffix) {
        arity(2)?;
        let (dst, off) = parse_mem(line, ops[0])?;
        return Ok(Instruction::new(Opcode::St(w), dst, r0, off, parse_imm(line, ops[1])?));
    }
    match m.as_str() {
        "call" => {
            arity(1)?;
            let tok = ops[0];
            let imm = if tok.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-') {
                parse_imm(line, tok)?
            } else {
                Helper::from_name(tok).ok_or_else(|| err(line, AsmErrorKind::UnknownHelper(tok.into())))?.id()
            };
            Ok(Instruction::new(Opcode::Call, r0, r0, 0, imm))
        }
        "exit" => {
            arity(0)?;
            Ok(Instruction::new(Opcode::Exit, r0, r0, 0, 0))
        }
        _ => Err(err(line, AsmErrorKind::UnknownMnemonic(mnemonic.into()))),
    }
}

fn mem(reg: Reg, off: i16) -> String {
    if off < 0 {
        format!("[{reg}-{}]", -(off as i32))
    } else {
        format!("[{reg}+{off}]")
    }
}

impl fmt::Display for Instruction {
    /// Canonical assembly form, accepted back by the assembler.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.opcode.mnemonic();
        match self.opcode {
            Opcode::Alu(AluOp::Neg, _) => write!(f, "{m} {}", self.dst),
            Opcode::Alu(_, Source::Imm) => write!(f, "{m} {}, {}", self.dst, self.imm),
            Opcode::Alu(_, Source::Reg) => write!(f, "{m} {}, {}", self.dst, self.src),
            Opcode::Jmp(JmpOp::Ja, _) => write!(f, "{m} {:+}", self.offset),
            Opcode::Jmp(_, Source::Imm) => write!(f, "{m} {}, {}, {:+}", self.dst, self.imm, self.offset),
            Opcode::Jmp(_, Source::Reg) => write!(f, "{m} {}, {}, {:+}", self.dst, self.src, self.offset),
            Opcode::Ldx(_) => write!(f, "{m} {}, {}", self.dst, mem(self.src, self.offset)),
            Opcode::Stx(_) => write!(f, "{m} {}, {}", mem(self.dst, self.offset), self.src),
            Opcode::St(_) => write!(f, "{m} {}, {}", mem(self.dst, self.offset), self.imm),
            Opcode::Call => match Helper::from_id(self.imm) {
                Some(h) => write!(f, "call {}", h.name()),
                None => write!(f, "call {}", self.imm),
            },
            Opcode::Exit => f.write_str("exit"),
        }
    }
}

/// Renders a program back to `.gasm` text with a `.program` header.
pub fn disassemble(program: &Program) -> String {
    let mut out = format!(".program {} {}\n", program.name, program.hook_kind);
    for insn in &program.instructions {
        out.push_str("    ");
        out.push_str(&insn.to_string());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_instruction_program() {
        let p = assemble("mov r0, 7\nexit").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.hook_kind, HookKind::Compute);
        assert_eq!(p.instructions[0].imm, 7);
    }

    #[test]
    fn forward_label_skips_one() {
        let p = assemble("ja fwd\nmov r0, 1\nfwd: mov r0, 2\nexit").unwrap();
        assert_eq!(p.instructions[0].offset, 1);
    }

    #[test]
    fn backward_label_is_an_error() {
        let e = assemble("back: mov r0, 1\nja back").unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(e.kind, AsmErrorKind::BackwardLabel("back".into()));
    }

    #[test]
    fn numeric_negative_offset_is_left_to_the_verifier() {
        let p = assemble("mov r0, 0\nja -2\nexit").unwrap();
        assert_eq!(p.instructions[1].offset, -2);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = assemble("mov r0, 1\n\nmov r0\nexit").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(matches!(e.kind, AsmErrorKind::Syntax(_)));
        let e = assemble("mov r0, 1\nfrob r1, 2").unwrap_err();
        assert_eq!(e, err(2, AsmErrorKind::UnknownMnemonic("frob".into())));
        assert!(matches!(assemble("mov r11, 1\nexit").unwrap_err().kind, AsmErrorKind::Syntax(_)));
    }

    #[test]
    fn mnemonics_are_case_insensitive_labels_are_not() {
        assert!(assemble("MOV r0, 1\nJA Out\nout: EXIT").is_err());
        assert!(assemble("MOV r0, 1\nJA +0\nEXIT").is_ok());
        let p = assemble("MOV r0, 1\nJA Out\nmov r0, 2\nOut: EXIT").unwrap();
        assert_eq!(p.instructions[1].offset, 1);
    }

    #[test]
    fn memory_and_call_forms() {
        let src = "
            .program t consistency_write
            stdw [r10-8], 1        ; store
            ldxdw r6, [r10-8]
            stxb [r10-1], r6
            call state_read
            call 9
            mov r0, 0
            exit
        ";
        let p = assemble(src).unwrap();
        assert_eq!(p.name, "t");
        assert_eq!(p.hook_kind, HookKind::ConsistencyWrite);
        assert_eq!(p.instructions[0].opcode, Opcode::St(Width::DW));
        assert_eq!(p.instructions[0].offset, -8);
        assert_eq!(p.instructions[3].imm, Helper::StateRead.id());
        assert_eq!(p.instructions[4].imm, 9);
    }

    #[test]
    fn multiple_programs() {
        let src = ".program a compute\nmov r0, 1\nexit\n.program b trigger\nmov r0, 2\nexit\n";
        let ps = assemble_all(src).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[1].hook_kind, HookKind::Trigger);
        assert_eq!(assemble(src).unwrap_err().kind, AsmErrorKind::ProgramCount(2));
    }

    #[test]
    fn hex_and_unsigned_immediates() {
        let p = assemble("mov r0, 0xffffffff\nmov r1, -0x10\nexit").unwrap();
        assert_eq!(p.instructions[0].imm, -1);
        assert_eq!(p.instructions[1].imm, -16);
    }

    #[test]
    fn disassembly_round_trips() {
        let src = ".program x gc_scan\nmov r6, r1\njsgt r6, -3, +1\nneg r6\nstxh [r10-4], r6\nldxw r0, [r10-4]\nexit\n";
        let p = assemble(src).unwrap();
        assert_eq!(assemble(&disassemble(&p)).unwrap(), p);
    }
}
