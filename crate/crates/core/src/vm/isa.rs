//! Instruction set, assembler and disassembler for the toy register machine.
//!
//! Source is line oriented. A `;` starts a comment, `name:` defines a label
//! at the next instruction, `.name <ident>` sets the program name and
//! `.entry <label>` selects the entry point (default: first instruction).
//!
//! ```text
//!         .name example
//! start:  IN    r0, 0          ; load input word 0
//!         LOAD  r1, [r0+8]
//!         BEQ   r1, r2, start
//!         HALT
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

pub const REGISTER_COUNT: usize = 16;

/// Code offsets are instruction indices, so programs are bounded by the
/// size of the code area of the image.
pub const MAX_INSTRUCTIONS: usize = 0x1_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Option<Reg> {
        (usize::from(index) < REGISTER_COUNT).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl AluOp {
    const ALL: [(AluOp, &'static str); 8] = [
        (AluOp::Add, "ADD"),
        (AluOp::Sub, "SUB"),
        (AluOp::Mul, "MUL"),
        (AluOp::And, "AND"),
        (AluOp::Or, "OR"),
        (AluOp::Xor, "XOR"),
        (AluOp::Shl, "SHL"),
        (AluOp::Shr, "SHR"),
    ];

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Shl => a.wrapping_shl((b & 63) as u32),
            AluOp::Shr => a.wrapping_shr((b & 63) as u32),
        }
    }

    fn mnemonic(self) -> &'static str {
        Self::ALL.iter().find(|(op, _)| *op == self).map(|(_, m)| *m).unwrap()
    }
}

/// Branch conditions; `Lt` compares unsigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
}

impl Cond {
    pub fn holds(self, a: u64, b: u64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => a < b,
        }
    }

    fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "BEQ",
            Cond::Ne => "BNE",
            Cond::Lt => "BLT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    LoadImm { dst: Reg, imm: u64 },
    Mov { dst: Reg, src: Reg },
    Alu { op: AluOp, dst: Reg, a: Reg, b: Reg },
    Load { dst: Reg, base: Reg, disp: i64 },
    Store { base: Reg, disp: i64, src: Reg },
    Branch { cond: Cond, a: Reg, b: Reg, target: usize },
    Jmp { target: usize },
    Call { target: usize },
    Ret,
    Push { src: Reg },
    Pop { dst: Reg },
    Alloc { dst: Reg, size: Reg },
    Free { ptr: Reg },
    /// Loads input bytes `[idx*8, idx*8+8)`, zero-padded past the end.
    In { dst: Reg, idx: u32 },
    Rand { dst: Reg },
    Feat { dst: Reg, key: u32 },
    Halt,
}

impl Instruction {
    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::LoadImm { .. } => "LOADI",
            Instruction::Mov { .. } => "MOV",
            Instruction::Alu { op, .. } => op.mnemonic(),
            Instruction::Load { .. } => "LOAD",
            Instruction::Store { .. } => "STORE",
            Instruction::Branch { cond, .. } => cond.mnemonic(),
            Instruction::Jmp { .. } => "JMP",
            Instruction::Call { .. } => "CALL",
            Instruction::Ret => "RET",
            Instruction::Push { .. } => "PUSH",
            Instruction::Pop { .. } => "POP",
            Instruction::Alloc { .. } => "ALLOC",
            Instruction::Free { .. } => "FREE",
            Instruction::In { .. } => "IN",
            Instruction::Rand { .. } => "RAND",
            Instruction::Feat { .. } => "FEAT",
            Instruction::Halt => "HALT",
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            Instruction::Branch { target, .. }
            | Instruction::Jmp { target }
            | Instruction::Call { target } => Some(target),
            _ => None,
        }
    }

    fn with_target(self, new: usize) -> Self {
        match self {
            Instruction::Branch { cond, a, b, .. } => Instruction::Branch { cond, a, b, target: new },
            Instruction::Jmp { .. } => Instruction::Jmp { target: new },
            Instruction::Call { .. } => Instruction::Call { target: new },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub name: String,
    pub instructions: Vec<Instruction>,
    pub entry: usize,
    /// Label name to instruction index, kept for disassembly and symbolization.
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("bad register `{0}`")]
    BadRegister(String),
    #[error("bad operand `{0}`")]
    BadOperand(String),
    #[error("{mnemonic} takes {expected} operand(s), found {found}")]
    OperandCount { mnemonic: String, expected: usize, found: usize },
    #[error("label `{0}` defined twice")]
    DuplicateLabel(String),
    #[error("bad directive `{0}`")]
    BadDirective(String),
    #[error("program has no instructions")]
    Empty,
    #[error("program exceeds {MAX_INSTRUCTIONS} instructions")]
    TooLarge,
    #[error("{0} HALT instructions reachable from the entry point, expected exactly one")]
    HaltCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct AsmError {
    /// 1-based source line, when the error is tied to one.
    pub line: Option<usize>,
    pub kind: AsmErrorKind,
}

impl fmt::Display for AsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {}: {}", line, self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line: Some(line), kind }
}

fn is_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_reg(s: &str, line: usize) -> Result<Reg, AsmError> {
    let bad = || err(line, AsmErrorKind::BadRegister(s.to_string()));
    let digits = s.strip_prefix('r').or_else(|| s.strip_prefix('R')).ok_or_else(bad)?;
    if digits.is_empty() || digits.len() > 2 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    digits.parse::<u8>().ok().and_then(Reg::new).ok_or_else(bad)
}

fn parse_u64(s: &str) -> Option<u64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if let Some(bin) = body.strip_prefix("0b") {
        u64::from_str_radix(&bin.replace('_', ""), 2).ok()?
    } else {
        body.replace('_', "").parse::<u64>().ok()?
    };
    if neg {
        if value > 1u64 << 63 {
            return None;
        }
        Some(value.wrapping_neg())
    } else {
        Some(value)
    }
}

fn parse_imm(s: &str, line: usize) -> Result<u64, AsmError> {
    parse_u64(s).ok_or_else(|| err(line, AsmErrorKind::BadOperand(s.to_string())))
}

fn parse_small(s: &str, line: usize) -> Result<u32, AsmError> {
    parse_u64(s)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| err(line, AsmErrorKind::BadOperand(s.to_string())))
}

/// `[rN]`, `[rN+imm]` or `[rN-imm]`.
fn parse_mem(s: &str, line: usize) -> Result<(Reg, i64), AsmError> {
    let bad = || err(line, AsmErrorKind::BadOperand(s.to_string()));
    let inner = s.strip_prefix('[').and_then(|t| t.strip_suffix(']')).ok_or_else(bad)?;
    let inner: String = inner.chars().filter(|c| !c.is_whitespace()).collect();
    let split = inner.find(['+', '-']);
    let (reg, disp) = match split {
        Some(i) => (&inner[..i], &inner[i..]),
        None => (inner.as_str(), "0"),
    };
    let base = parse_reg(reg, line)?;
    let disp = parse_u64(disp).ok_or_else(bad)? as i64;
    Ok((base, disp))
}

enum PendingTarget {
    None,
    Label(String),
}

/// Parses assembly source into a program with resolved labels.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    let mut name = String::from("program");
    let mut entry_label: Option<(String, usize)> = None;
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut instrs: Vec<(Instruction, PendingTarget, usize)> = Vec::new();

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let mut line = raw_line.split(';').next().unwrap_or("").trim();

        // Any number of leading `label:` definitions.
        while let Some(colon) = line.find(':') {
            let candidate = line[..colon].trim();
            if !is_label_name(candidate) {
                break;
            }
            if labels.insert(candidate.to_string(), instrs.len()).is_some() {
                return Err(err(line_no, AsmErrorKind::DuplicateLabel(candidate.to_string())));
            }
            line = line[colon + 1..].trim();
        }
        if line.is_empty() {
            continue;
        }

        let (mnemonic, rest) = match line.find(char::is_whitespace) {
            Some(i) => (&line[..i], line[i..].trim()),
            None => (line, ""),
        };

        if let Some(directive) = mnemonic.strip_prefix('.') {
            match directive {
                "name" if !rest.is_empty() => name = rest.to_string(),
                "entry" if is_label_name(rest) => entry_label = Some((rest.to_string(), line_no)),
                _ => return Err(err(line_no, AsmErrorKind::BadDirective(line.to_string()))),
            }
            continue;
        }

        let ops: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        let upper = mnemonic.to_ascii_uppercase();
        let expect = |n: usize| -> Result<(), AsmError> {
            if ops.len() == n {
                Ok(())
            } else {
                Err(err(
                    line_no,
                    AsmErrorKind::OperandCount { mnemonic: upper.clone(), expected: n, found: ops.len() },
                ))
            }
        };
        let label_op = |s: &str| -> Result<PendingTarget, AsmError> {
            if is_label_name(s) {
                Ok(PendingTarget::Label(s.to_string()))
            } else {
                Err(err(line_no, AsmErrorKind::BadOperand(s.to_string())))
            }
        };

        let mut pending = PendingTarget::None;
        let instr = match upper.as_str() {
            "LOADI" => {
                expect(2)?;
                Instruction::LoadImm { dst: parse_reg(ops[0], line_no)?, imm: parse_imm(ops[1], line_no)? }
            }
            "MOV" => {
                expect(2)?;
                Instruction::Mov { dst: parse_reg(ops[0], line_no)?, src: parse_reg(ops[1], line_no)? }
            }
            m if AluOp::ALL.iter().any(|(_, n)| *n == m) => {
                expect(3)?;
                let op = AluOp::ALL.iter().find(|(_, n)| *n == m).unwrap().0;
                Instruction::Alu {
                    op,
                    dst: parse_reg(ops[0], line_no)?,
                    a: parse_reg(ops[1], line_no)?,
                    b: parse_reg(ops[2], line_no)?,
                }
            }
            "LOAD" => {
                expect(2)?;
                let (base, disp) = parse_mem(ops[1], line_no)?;
                Instruction::Load { dst: parse_reg(ops[0], line_no)?, base, disp }
            }
            "STORE" => {
                expect(2)?;
                let (base, disp) = parse_mem(ops[0], line_no)?;
                Instruction::Store { base, disp, src: parse_reg(ops[1], line_no)? }
            }
            "BEQ" | "BNE" | "BLT" => {
                expect(3)?;
                let cond = match upper.as_str() {
                    "BEQ" => Cond::Eq,
                    "BNE" => Cond::Ne,
                    _ => Cond::Lt,
                };
                pending = label_op(ops[2])?;
                Instruction::Branch {
                    cond,
                    a: parse_reg(ops[0], line_no)?,
                    b: parse_reg(ops[1], line_no)?,
                    target: 0,
                }
            }
            "JMP" => {
                expect(1)?;
                pending = label_op(ops[0])?;
                Instruction::Jmp { target: 0 }
            }
            "CALL" => {
                expect(1)?;
                pending = label_op(ops[0])?;
                Instruction::Call { target: 0 }
            }
            "RET" => {
                expect(0)?;
                Instruction::Ret
            }
            "PUSH" => {
                expect(1)?;
                Instruction::Push { src: parse_reg(ops[0], line_no)? }
            }
            "POP" => {
                expect(1)?;
                Instruction::Pop { dst: parse_reg(ops[0], line_no)? }
            }
            "ALLOC" => {
                expect(2)?;
                Instruction::Alloc { dst: parse_reg(ops[0], line_no)?, size: parse_reg(ops[1], line_no)? }
            }
            "FREE" => {
                expect(1)?;
                Instruction::Free { ptr: parse_reg(ops[0], line_no)? }
            }
            "IN" => {
                expect(2)?;
                Instruction::In { dst: parse_reg(ops[0], line_no)?, idx: parse_small(ops[1], line_no)? }
            }
            "RAND" => {
                expect(1)?;
                Instruction::Rand { dst: parse_reg(ops[0], line_no)? }
            }
            "FEAT" => {
                expect(2)?;
                Instruction::Feat { dst: parse_reg(ops[0], line_no)?, key: parse_small(ops[1], line_no)? }
            }
            "HALT" => {
                expect(0)?;
                Instruction::Halt
            }
            _ => return Err(err(line_no, AsmErrorKind::UnknownMnemonic(mnemonic.to_string()))),
        };
        instrs.push((instr, pending, line_no));
        if instrs.len() > MAX_INSTRUCTIONS {
            return Err(err(line_no, AsmErrorKind::TooLarge));
        }
    }

    if instrs.is_empty() {
        return Err(AsmError { line: None, kind: AsmErrorKind::Empty });
    }
    let count = instrs.len();
    // Labels defined after the last instruction point past the end.
    let resolve = |label: &str, line: usize| -> Result<usize, AsmError> {
        labels
            .get(label)
            .copied()
            .filter(|&i| i < count)
            .ok_or_else(|| err(line, AsmErrorKind::UnresolvedLabel(label.to_string())))
    };

    let mut instructions = Vec::with_capacity(count);
    for (instr, pending, line) in &instrs {
        let resolved = match pending {
            PendingTarget::None => *instr,
            PendingTarget::Label(l) => instr.with_target(resolve(l, *line)?),
        };
        instructions.push(resolved);
    }
    let entry = match &entry_label {
        Some((label, line)) => resolve(label, *line)?,
        None => 0,
    };

    let program = Program { name, instructions, entry, labels };
    check_single_halt(&program)?;
    Ok(program)
}

/// Counts HALT instructions reachable from the entry point. Calls are
/// assumed to return to the following instruction.
fn check_single_halt(program: &Program) -> Result<(), AsmError> {
    let n = program.instructions.len();
    let mut seen = vec![false; n];
    let mut work = vec![program.entry];
    let mut halts = 0;
    while let Some(pc) = work.pop() {
        if pc >= n || seen[pc] {
            continue;
        }
        seen[pc] = true;
        match program.instructions[pc] {
            Instruction::Halt => halts += 1,
            Instruction::Ret => {}
            Instruction::Jmp { target } => work.push(target),
            Instruction::Branch { target, .. } | Instruction::Call { target } => {
                work.push(target);
                work.push(pc + 1);
            }
            _ => work.push(pc + 1),
        }
    }
    if halts == 1 {
        Ok(())
    } else {
        Err(AsmError { line: None, kind: AsmErrorKind::HaltCount(halts) })
    }
}

impl Program {
    /// Renders the program as assembly that reassembles to the same
    /// instructions and entry point.
    pub fn disassemble(&self) -> String {
        let mut names: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (label, &idx) in &self.labels {
            names.entry(idx).or_default().push(label);
        }
        let mut synthetic: BTreeMap<usize, String> = BTreeMap::new();
        let mut label_for = |idx: usize| -> String {
            match names.get(&idx).and_then(|v| v.first()) {
                Some(n) => n.to_string(),
                None => synthetic.entry(idx).or_insert_with(|| format!("_L{idx}")).clone(),
            }
        };

        let mut body = Vec::with_capacity(self.instructions.len());
        for instr in &self.instructions {
            let text = match *instr {
                Instruction::LoadImm { dst, imm } => format!("LOADI {dst}, {imm:#x}"),
                Instruction::Mov { dst, src } => format!("MOV {dst}, {src}"),
                Instruction::Alu { op, dst, a, b } => format!("{} {dst}, {a}, {b}", op.mnemonic()),
                Instruction::Load { dst, base, disp } => format!("LOAD {dst}, {}", mem(base, disp)),
                Instruction::Store { base, disp, src } => format!("STORE {}, {src}", mem(base, disp)),
                Instruction::Branch { cond, a, b, target } => {
                    format!("{} {a}, {b}, {}", cond.mnemonic(), label_for(target))
                }
                Instruction::Jmp { target } => format!("JMP {}", label_for(target)),
                Instruction::Call { target } => format!("CALL {}", label_for(target)),
                Instruction::Ret => "RET".to_string(),
                Instruction::Push { src } => format!("PUSH {src}"),
                Instruction::Pop { dst } => format!("POP {dst}"),
                Instruction::Alloc { dst, size } => format!("ALLOC {dst}, {size}"),
                Instruction::Free { ptr } => format!("FREE {ptr}"),
                Instruction::In { dst, idx } => format!("IN {dst}, {idx}"),
                Instruction::Rand { dst } => format!("RAND {dst}"),
                Instruction::Feat { dst, key } => format!("FEAT {dst}, {key}"),
                Instruction::Halt => "HALT".to_string(),
            };
            body.push(text);
        }
        let entry_label = if self.entry != 0 { Some(label_for(self.entry)) } else { None };

        let mut out = format!(".name {}\n", self.name);
        if let Some(l) = entry_label {
            out.push_str(&format!(".entry {l}\n"));
        }
        for (idx, text) in body.iter().enumerate() {
            if let Some(ls) = names.get(&idx) {
                for l in ls {
                    out.push_str(&format!("{l}:\n"));
                }
            }
            if let Some(l) = synthetic.get(&idx) {
                out.push_str(&format!("{l}:\n"));
            }
            out.push_str(&format!("    {text}\n"));
        }
        out
    }
}

fn mem(base: Reg, disp: i64) -> String {
    match disp {
        0 => format!("[{base}]"),
        d if d < 0 => format!("[{base}-{:#x}]", d.unsigned_abs()),
        d => format!("[{base}+{d:#x}]"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_halt() {
        let p = assemble("HALT").unwrap();
        assert_eq!(p.instructions, vec![Instruction::Halt]);
        assert_eq!(p.entry, 0);
    }

    #[test]
    fn unresolved_label_reports_line() {
        let e = assemble("JMP missing").unwrap_err();
        assert_eq!(e.line, Some(1));
        assert_eq!(e.kind, AsmErrorKind::UnresolvedLabel("missing".into()));
    }

    #[test]
    fn unknown_mnemonic_and_bad_register() {
        let e = assemble("; header\nFROB r1\nHALT").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(matches!(e.kind, AsmErrorKind::UnknownMnemonic(_)));

        let e = assemble("MOV r1, r16\nHALT").unwrap_err();
        assert_eq!(e.line, Some(1));
        assert_eq!(e.kind, AsmErrorKind::BadRegister("r16".into()));
    }

    #[test]
    fn halt_must_be_unique_and_reachable() {
        assert!(matches!(
            assemble("LOADI r0, 1").unwrap_err().kind,
            AsmErrorKind::HaltCount(0)
        ));
        assert!(matches!(
            assemble("BEQ r0, r1, b\nHALT\nb: HALT").unwrap_err().kind,
            AsmErrorKind::HaltCount(2)
        ));
        // Unreachable second HALT is fine.
        assemble("HALT\nHALT").unwrap();
    }

    #[test]
    fn memory_operands_and_labels() {
        let p = assemble(
            "  .name t\n  .entry go\nback: LOAD r1, [r0-8] ; x\ngo:  STORE [r2+0x10], r1\n  BLT r1, r2, back\n  HALT",
        )
        .unwrap();
        assert_eq!(p.name, "t");
        assert_eq!(p.entry, 1);
        assert_eq!(p.instructions[0], Instruction::Load { dst: Reg(1), base: Reg(0), disp: -8 });
        assert_eq!(p.instructions[1], Instruction::Store { base: Reg(2), disp: 16, src: Reg(1) });
        assert_eq!(p.instructions[2].target(), Some(0));
    }

    #[test]
    fn operand_count_checked() {
        let e = assemble("ADD r1, r2\nHALT").unwrap_err();
        assert!(matches!(e.kind, AsmErrorKind::OperandCount { expected: 3, found: 2, .. }));
    }

    fn arb_reg() -> impl Strategy<Value = Reg> {
        (0u8..16).prop_map(Reg)
    }

    fn arb_instr(n: usize) -> impl Strategy<Value = Instruction> {
        let alu = prop_oneof![
            Just(AluOp::Add),
            Just(AluOp::Sub),
            Just(AluOp::Mul),
            Just(AluOp::And),
            Just(AluOp::Or),
            Just(AluOp::Xor),
            Just(AluOp::Shl),
            Just(AluOp::Shr)
        ];
        let cond = prop_oneof![Just(Cond::Eq), Just(Cond::Ne), Just(Cond::Lt)];
        prop_oneof![
            (arb_reg(), any::<u64>()).prop_map(|(dst, imm)| Instruction::LoadImm { dst, imm }),
            (arb_reg(), arb_reg()).prop_map(|(dst, src)| Instruction::Mov { dst, src }),
            (alu, arb_reg(), arb_reg(), arb_reg()).prop_map(|(op, dst, a, b)| Instruction::Alu { op, dst, a, b }),
            (arb_reg(), arb_reg(), -4096i64..4096).prop_map(|(dst, base, disp)| Instruction::Load { dst, base, disp }),
            (arb_reg(), -4096i64..4096, arb_reg()).prop_map(|(base, disp, src)| Instruction::Store { base, disp, src }),
            (cond, arb_reg(), arb_reg(), 0..n).prop_map(|(cond, a, b, target)| Instruction::Branch { cond, a, b, target }),
            (0..n).prop_map(|target| Instruction::Call { target }),
            arb_reg().prop_map(|src| Instruction::Push { src }),
            arb_reg().prop_map(|dst| Instruction::Pop { dst }),
            (arb_reg(), arb_reg()).prop_map(|(dst, size)| Instruction::Alloc { dst, size }),
            arb_reg().prop_map(|ptr| Instruction::Free { ptr }),
            (arb_reg(), 0u32..512).prop_map(|(dst, idx)| Instruction::In { dst, idx }),
            arb_reg().prop_map(|dst| Instruction::Rand { dst }),
            (arb_reg(), any::<u32>()).prop_map(|(dst, key)| Instruction::Feat { dst, key }),
        ]
    }

    proptest! {
        #[test]
        fn disassembly_round_trips(body in proptest::collection::vec(arb_instr(24), 1..23)) {
            // No RET or JMP in the body, so every path falls through to the
            // single trailing HALT.
            let mut instructions = body;
            let halt_at = instructions.len();
            for i in instructions.iter_mut() {
                if let Some(t) = i.target() {
                    *i = i.with_target(t.min(halt_at));
                }
            }
            instructions.push(Instruction::Halt);
            let program = Program {
                name: "prop".into(),
                instructions,
                entry: 0,
                labels: BTreeMap::new(),
            };
            let text = program.disassemble();
            let back = assemble(&text).unwrap();
            prop_assert_eq!(&back.instructions, &program.instructions);
            prop_assert_eq!(back.entry, program.entry);
            prop_assert_eq!(back.name, program.name);
        }
    }
}
