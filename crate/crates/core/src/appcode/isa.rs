//! Instruction set: an eBPF-shaped fixed-width encoding with 11 registers.

use std::fmt;
use std::str::FromStr;

/// Maximum number of instructions in a program.
pub const MAX_PROGRAM_LEN: usize = 4096;
/// Stack frame size addressable below `r10`.
pub const STACK_SIZE: usize = 512;
/// Frame pointer register; read-only.
pub const FRAME_REG: u8 = 10;

/// A register index, `r0` through `r10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R10: Reg = Reg(FRAME_REG);

    pub fn new(index: u8) -> Option<Reg> {
        (index <= FRAME_REG).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Access width of a memory instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Width {
    B,
    H,
    W,
    DW,
}

impl Width {
    pub fn bytes(self) -> usize {
        match self {
            Width::B => 1,
            Width::H => 2,
            Width::W => 4,
            Width::DW => 8,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Width::B => "b",
            Width::H => "h",
            Width::W => "w",
            Width::DW => "dw",
        }
    }

    const ALL: [Width; 4] = [Width::B, Width::H, Width::W, Width::DW];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    Lsh,
    Rsh,
    Arsh,
    Mov,
    Neg,
}

impl AluOp {
    pub const ALL: [AluOp; 13] = [
        AluOp::Add,
        AluOp::Sub,
        AluOp::Mul,
        AluOp::Div,
        AluOp::Mod,
        AluOp::And,
        AluOp::Or,
        AluOp::Xor,
        AluOp::Lsh,
        AluOp::Rsh,
        AluOp::Arsh,
        AluOp::Mov,
        AluOp::Neg,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Mod => "mod",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Arsh => "arsh",
            AluOp::Mov => "mov",
            AluOp::Neg => "neg",
        }
    }

    /// High nibble of the eBPF ALU opcode.
    fn code(self) -> u8 {
        match self {
            AluOp::Add => 0x00,
            AluOp::Sub => 0x10,
            AluOp::Mul => 0x20,
            AluOp::Div => 0x30,
            AluOp::Or => 0x40,
            AluOp::And => 0x50,
            AluOp::Lsh => 0x60,
            AluOp::Rsh => 0x70,
            AluOp::Neg => 0x80,
            AluOp::Mod => 0x90,
            AluOp::Xor => 0xa0,
            AluOp::Mov => 0xb0,
            AluOp::Arsh => 0xc0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JmpOp {
    Ja,
    Jeq,
    Jne,
    Jgt,
    Jge,
    Jlt,
    Jle,
    Jsgt,
    Jsge,
    Jslt,
    Jsle,
}

impl JmpOp {
    pub const ALL: [JmpOp; 11] = [
        JmpOp::Ja,
        JmpOp::Jeq,
        JmpOp::Jne,
        JmpOp::Jgt,
        JmpOp::Jge,
        JmpOp::Jlt,
        JmpOp::Jle,
        JmpOp::Jsgt,
        JmpOp::Jsge,
        JmpOp::Jslt,
        JmpOp::Jsle,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpOp::Ja => "ja",
            JmpOp::Jeq => "jeq",
            JmpOp::Jne => "jne",
            JmpOp::Jgt => "jgt",
            JmpOp::Jge => "jge",
            JmpOp::Jlt => "jlt",
            JmpOp::Jle => "jle",
            JmpOp::Jsgt => "jsgt",
            JmpOp::Jsge => "jsge",
            JmpOp::Jslt => "jslt",
            JmpOp::Jsle => "jsle",
        }
    }

    fn code(self) -> u8 {
        match self {
            JmpOp::Ja => 0x00,
            JmpOp::Jeq => 0x10,
            JmpOp::Jgt => 0x20,
            JmpOp::Jge => 0x30,
            JmpOp::Jne => 0x50,
            JmpOp::Jsgt => 0x60,
            JmpOp::Jsge => 0x70,
            JmpOp::Jlt => 0xa0,
            JmpOp::Jle => 0xb0,
            JmpOp::Jslt => 0xc0,
            JmpOp::Jsle => 0xd0,
        }
    }

    /// Evaluates the branch condition on two 64-bit operands.
    pub fn taken(self, a: u64, b: u64) -> bool {
        let (sa, sb) = (a as i64, b as i64);
        match self {
            JmpOp::Ja => true,
            JmpOp::Jeq => a == b,
            JmpOp::Jne => a != b,
            JmpOp::Jgt => a > b,
            JmpOp::Jge => a >= b,
            JmpOp::Jlt => a < b,
            JmpOp::Jle => a <= b,
            JmpOp::Jsgt => sa > sb,
            JmpOp::Jsge => sa >= sb,
            JmpOp::Jslt => sa < sb,
            JmpOp::Jsle => sa <= sb,
        }
    }
}

/// Second operand of ALU and conditional-jump instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Imm,
    Reg,
}

/// A decoded opcode. Every value of this type is a member of the defined set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    Alu(AluOp, Source),
    Jmp(JmpOp, Source),
    /// `dst = *(src + off)`
    Ldx(Width),
    /// `*(dst + off) = src`
    Stx(Width),
    /// `*(dst + off) = imm`
    St(Width),
    Call,
    Exit,
}

const CLASS_ALU64: u8 = 0x07;
const CLASS_JMP: u8 = 0x05;
const SRC_REG: u8 = 0x08;

fn width_code(w: Width) -> u8 {
    match w {
        Width::W => 0x00,
        Width::H => 0x08,
        Width::B => 0x10,
        Width::DW => 0x18,
    }
}

impl Opcode {
    /// The 8-bit eBPF-compatible opcode byte.
    pub fn code(self) -> u8 {
        match self {
            Opcode::Alu(op, src) => op.code() | CLASS_ALU64 | src_bit(src),
            Opcode::Jmp(op, src) => op.code() | CLASS_JMP | src_bit(src),
            Opcode::Ldx(w) => 0x61 | width_code(w),
            Opcode::St(w) => 0x62 | width_code(w),
            Opcode::Stx(w) => 0x63 | width_code(w),
            Opcode::Call => 0x85,
            Opcode::Exit => 0x95,
        }
    }

    pub fn is_jump(self) -> bool {
        matches!(self, Opcode::Jmp(..))
    }

    /// Every opcode in the defined set.
    pub fn all() -> Vec<Opcode> {
        let mut v = Vec::new();
        for op in AluOp::ALL {
            v.push(Opcode::Alu(op, Source::Imm));
            if op != AluOp::Neg {
                v.push(Opcode::Alu(op, Source::Reg));
            }
        }
        for op in JmpOp::ALL {
            v.push(Opcode::Jmp(op, Source::Imm));
            if op != JmpOp::Ja {
                v.push(Opcode::Jmp(op, Source::Reg));
            }
        }
        for w in Width::ALL {
            v.push(Opcode::Ldx(w));
            v.push(Opcode::Stx(w));
            v.push(Opcode::St(w));
        }
        v.push(Opcode::Call);
        v.push(Opcode::Exit);
        v
    }

    pub fn mnemonic(self) -> String {
        match self {
            Opcode::Alu(op, _) => op.mnemonic().to_string(),
            Opcode::Jmp(op, _) => op.mnemonic().to_string(),
            Opcode::Ldx(w) => format!("ldx{}", w.suffix()),
            Opcode::Stx(w) => format!("stx{}", w.suffix()),
            Opcode::St(w) => format!("st{}", w.suffix()),
            Opcode::Call => "call".into(),
            Opcode::Exit => "exit".into(),
        }
    }
}

fn src_bit(src: Source) -> u8 {
    match src {
        Source::Imm => 0,
        Source::Reg => SRC_REG,
    }
}

impl TryFrom<u8> for Opcode {
    type Error = u8;

    fn try_from(code: u8) -> Result<Self, u8> {
        Opcode::all().into_iter().find(|op| op.code() == code).ok_or(code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: Reg,
    pub src: Reg,
    /// Jump displacement in instructions, relative to the next instruction;
    /// byte displacement for memory instructions.
    pub offset: i16,
    pub imm: i32,
}

impl Instruction {
    pub fn new(opcode: Opcode, dst: Reg, src: Reg, offset: i16, imm: i32) -> Self {
        Instruction { opcode, dst, src, offset, imm }
    }

    /// Packs into the 8-byte eBPF layout: opcode, regs (src<<4|dst), offset, imm.
    pub fn encode(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[0] = self.opcode.code();
        out[1] = ((self.src.0 & 0x0f) << 4) | (self.dst.0 & 0x0f);
        out[2..4].copy_from_slice(&self.offset.to_le_bytes());
        out[4..8].copy_from_slice(&self.imm.to_le_bytes());
        out
    }

    pub fn decode(bytes: [u8; 8]) -> Option<Instruction> {
        let opcode = Opcode::try_from(bytes[0]).ok()?;
        let dst = Reg::new(bytes[1] & 0x0f)?;
        let src = Reg::new(bytes[1] >> 4)?;
        let offset = i16::from_le_bytes([bytes[2], bytes[3]]);
        let imm = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        Some(Instruction { opcode, dst, src, offset, imm })
    }
}

/// Attachment point class of a program; fixes its context and allowed helpers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookKind {
    ReplicaPlace,
    LoadBalance,
    ConsistencyWrite,
    ConsistencyRead,
    Migration,
    Trigger,
    Compute,
    GcScan,
}

impl HookKind {
    pub const ALL: [HookKind; 8] = [
        HookKind::ReplicaPlace,
        HookKind::LoadBalance,
        HookKind::ConsistencyWrite,
        HookKind::ConsistencyRead,
        HookKind::Migration,
        HookKind::Trigger,
        HookKind::Compute,
        HookKind::GcScan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HookKind::ReplicaPlace => "replica_place",
            HookKind::LoadBalance => "load_balance",
            HookKind::ConsistencyWrite => "consistency_write",
            HookKind::ConsistencyRead => "consistency_read",
            HookKind::Migration => "migration",
            HookKind::Trigger => "trigger",
            HookKind::Compute => "compute",
            HookKind::GcScan => "gc_scan",
        }
    }
}

impl fmt::Display for HookKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HookKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        HookKind::ALL.into_iter().find(|h| h.as_str() == lower).ok_or_else(|| format!("unknown hook kind `{s}`"))
    }
}

/// An unverified appcode unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub hook_kind: HookKind,
    pub instructions: Vec<Instruction>,
}

impl Program {
    pub fn new(name: impl Into<String>, hook_kind: HookKind, instructions: Vec<Instruction>) -> Self {
        Program { name: name.into(), hook_kind, instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}
