//! Deterministic interpreter that emits raw trace records.
//!
//! Address space layout:
//!
//! * image 0 at [`IMAGE_BASE`]: code offsets are instruction indices, the
//!   static data region sits at image offset [`DATA_OFFSET`];
//! * stack of [`STACK_SIZE`] bytes growing down from a nonce-dependent top;
//! * bump-allocated heap at a nonce-dependent base, 64-byte aligned blocks.
//!
//! The run nonce only moves the stack and heap, which preprocessing
//! relativizes away.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::isa::{Instruction, Program, Reg};
use crate::trace::{AbsCodeRef, BranchKind, RawRecord};

pub const IMAGE_ID: u16 = 0;
pub const IMAGE_BASE: u64 = 0x0040_0000;
pub const DATA_OFFSET: u64 = 0x1_0000;
pub const DATA_SIZE: u64 = 0x1_0000;
pub const IMAGE_SIZE: u64 = DATA_OFFSET + DATA_SIZE;
pub const DATA_BASE: u64 = IMAGE_BASE + DATA_OFFSET;

pub const STACK_SIZE: u64 = 1 << 20;
const STACK_TOP_REGION: u64 = 0x7fff_ff00_0000;
const HEAP_REGION: u64 = 0x5500_0000_0000;
const HEAP_LIMIT: u64 = 16 << 20;
const HEAP_ALIGN: u64 = 64;

pub const MAX_INPUT_LEN: usize = 4096;
pub const DEFAULT_STEP_CAP: u64 = 10_000_000;

/// Values substituted for the machine's nondeterministic instructions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    /// Consumed in order by RAND; exhaustion is an error. When empty, RAND
    /// draws from a generator keyed by `(rand_seed, testcase id)`.
    #[serde(default)]
    pub rand_values: Vec<u64>,
    /// FEAT k reads `features[k]`, or 0 when absent.
    #[serde(default)]
    pub features: BTreeMap<u32, u64>,
    #[serde(default)]
    pub rand_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Fault {
    #[error("memory fault: {width}-byte access at {addr:#x}")]
    Memory { addr: u64, width: u64 },
    #[error("stack overflow")]
    StackOverflow,
    #[error("stack underflow")]
    StackUnderflow,
    #[error("return to {0} outside the program")]
    BadReturn(u64),
    #[error("free of {0:#x}, which is not a live block base")]
    BadFree(u64),
    #[error("heap exhausted allocating {0} bytes")]
    HeapExhausted(u64),
    #[error("RAND override list exhausted after {0} values")]
    RandExhausted(usize),
    #[error("step cap of {0} exceeded")]
    StepCap(u64),
    #[error("input of {0} bytes exceeds the {MAX_INPUT_LEN}-byte limit")]
    InputTooLong(usize),
    #[error("pc {0} ran off the end of the program")]
    PcOutOfRange(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("test case {testcase}: {fault} (pc {pc}, step {step})")]
pub struct VmError {
    pub testcase: u32,
    pub pc: usize,
    pub step: u64,
    pub fault: Fault,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Top of the stack (exclusive) for a given run nonce.
pub fn stack_top(run_nonce: u64) -> u64 {
    STACK_TOP_REGION - ((splitmix64(run_nonce) & 0xfff) << 4)
}

pub fn heap_base(run_nonce: u64) -> u64 {
    HEAP_REGION + ((splitmix64(run_nonce ^ 0x4845_4150) & 0xffff) << 12)
}

/// Setup-phase records a tracer emits before the first test case.
pub fn setup_records(program: &Program, run_nonce: u64) -> Vec<RawRecord> {
    vec![
        RawRecord::ImageLoad {
            image_id: IMAGE_ID,
            base: IMAGE_BASE,
            size: IMAGE_SIZE,
            name: program.name.clone(),
        },
        RawRecord::StackPtr { sp: stack_top(run_nonce) },
    ]
}

#[derive(Debug, Clone, Copy)]
struct Block {
    size: u64,
    live: bool,
}

/// Interpreter state for one test case.
pub struct VmState<'a> {
    program: &'a Program,
    input: &'a [u8],
    overrides: &'a Overrides,
    testcase: u32,
    pub regs: [u64; 16],
    pub sp: u64,
    pub pc: usize,
    memory: HashMap<u64, u8>,
    blocks: BTreeMap<u64, Block>,
    heap_base: u64,
    heap_next: u64,
    stack_top: u64,
    rand_cursor: usize,
    rng: Option<ChaCha8Rng>,
    pub run_nonce: u64,
    records: Vec<RawRecord>,
}

impl<'a> VmState<'a> {
    pub fn new(
        program: &'a Program,
        testcase: u32,
        input: &'a [u8],
        overrides: &'a Overrides,
        run_nonce: u64,
    ) -> Self {
        let top = stack_top(run_nonce);
        let base = heap_base(run_nonce);
        Self {
            program,
            input,
            overrides,
            testcase,
            regs: [0; 16],
            sp: top,
            pc: program.entry,
            memory: HashMap::new(),
            blocks: BTreeMap::new(),
            heap_base: base,
            heap_next: base,
            stack_top: top,
            rand_cursor: 0,
            rng: None,
            run_nonce,
            records: Vec::new(),
        }
    }

    fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    fn set(&mut self, r: Reg, v: u64) {
        self.regs[r.index()] = v;
    }

    fn code(&self, pc: usize) -> AbsCodeRef {
        AbsCodeRef::new(IMAGE_ID, pc as u64)
    }

    fn check_access(&self, addr: u64, width: u64) -> Result<(), Fault> {
        let fault = Fault::Memory { addr, width };
        let end = addr.checked_add(width).ok_or(fault.clone())?;
        if addr >= DATA_BASE && end <= DATA_BASE + DATA_SIZE {
            return Ok(());
        }
        if addr >= self.stack_top - STACK_SIZE && end <= self.stack_top {
            return Ok(());
        }
        match self.blocks.range(..=addr).next_back() {
            Some((&base, b)) if b.live && end <= base + b.size => Ok(()),
            _ => Err(fault),
        }
    }

    fn read_u64(&mut self, addr: u64) -> Result<u64, Fault> {
        self.check_access(addr, 8)?;
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.memory.get(&(addr + i as u64)).copied().unwrap_or(0);
        }
        Ok(u64::from_le_bytes(bytes))
    }

    fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), Fault> {
        self.check_access(addr, 8)?;
        for (i, b) in value.to_le_bytes().into_iter().enumerate() {
            self.memory.insert(addr + i as u64, b);
        }
        Ok(())
    }

    fn push(&mut self, value: u64) -> Result<(), Fault> {
        if self.sp < self.stack_top - STACK_SIZE + 8 {
            return Err(Fault::StackOverflow);
        }
        self.sp -= 8;
        self.records.push(RawRecord::StackPtr { sp: self.sp });
        self.records.push(RawRecord::MemWrite { instr: self.code(self.pc), addr: self.sp });
        self.write_u64(self.sp, value)
    }

    fn pop(&mut self) -> Result<u64, Fault> {
        if self.sp + 8 > self.stack_top {
            return Err(Fault::StackUnderflow);
        }
        self.records.push(RawRecord::MemRead { instr: self.code(self.pc), addr: self.sp });
        let value = self.read_u64(self.sp)?;
        self.sp += 8;
        self.records.push(RawRecord::StackPtr { sp: self.sp });
        Ok(value)
    }

    fn input_word(&self, idx: u32) -> u64 {
        let start = idx as usize * 8;
        let mut bytes = [0u8; 8];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = self.input.get(start + i).copied().unwrap_or(0);
        }
        u64::from_le_bytes(bytes)
    }

    fn next_rand(&mut self) -> Result<u64, Fault> {
        if !self.overrides.rand_values.is_empty() {
            let v = self
                .overrides
                .rand_values
                .get(self.rand_cursor)
                .copied()
                .ok_or(Fault::RandExhausted(self.overrides.rand_values.len()))?;
            self.rand_cursor += 1;
            return Ok(v);
        }
        let seed = splitmix64(self.overrides.rand_seed ^ splitmix64(u64::from(self.testcase)));
        Ok(self.rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(seed)).next_u64())
    }

    fn alloc(&mut self, size: u64) -> Result<u64, Fault> {
        let addr = self.heap_next;
        let end = size
            .checked_add(HEAP_ALIGN - 1)
            .map(|s| s & !(HEAP_ALIGN - 1))
            .and_then(|s| addr.checked_add(s.max(HEAP_ALIGN)))
            .filter(|&e| e <= self.heap_base + HEAP_LIMIT)
            .ok_or(Fault::HeapExhausted(size))?;
        self.heap_next = end;
        self.blocks.insert(addr, Block { size, live: true });
        self.records.push(RawRecord::AllocSize { size });
        self.records.push(RawRecord::AllocAddr { addr });
        Ok(addr)
    }

    fn free(&mut self, addr: u64) -> Result<(), Fault> {
        match self.blocks.get_mut(&addr) {
            Some(b) if b.live => {
                b.live = false;
                self.records.push(RawRecord::Free { addr });
                Ok(())
            }
            _ => Err(Fault::BadFree(addr)),
        }
    }

    /// Executes one instruction. Returns `false` once HALT is reached.
    fn step(&mut self) -> Result<bool, Fault> {
        let pc = self.pc;
        let instr = *self.program.instructions.get(pc).ok_or(Fault::PcOutOfRange(pc))?;
        let mut next = pc + 1;
        match instr {
            Instruction::LoadImm { dst, imm } => self.set(dst, imm),
            Instruction::Mov { dst, src } => self.set(dst, self.reg(src)),
            Instruction::Alu { op, dst, a, b } => self.set(dst, op.apply(self.reg(a), self.reg(b))),
            Instruction::Load { dst, base, disp } => {
                let addr = self.reg(base).wrapping_add(disp as u64);
                self.records.push(RawRecord::MemRead { instr: self.code(pc), addr });
                let v = self.read_u64(addr)?;
                self.set(dst, v);
            }
            Instruction::Store { base, disp, src } => {
                let addr = self.reg(base).wrapping_add(disp as u64);
                self.records.push(RawRecord::MemWrite { instr: self.code(pc), addr });
                self.write_u64(addr, self.reg(src))?;
            }
            Instruction::Branch { cond, a, b, target } => {
                let taken = cond.holds(self.reg(a), self.reg(b));
                let (kind, dst) = if taken {
                    (BranchKind::CondTaken, target)
                } else {
                    (BranchKind::CondNotTaken, pc + 1)
                };
                self.records.push(RawRecord::Branch { kind, src: self.code(pc), dst: self.code(dst) });
                next = dst;
            }
            Instruction::Jmp { target } => {
                self.records.push(RawRecord::Branch {
                    kind: BranchKind::Jump,
                    src: self.code(pc),
                    dst: self.code(target),
                });
                next = target;
            }
            Instruction::Call { target } => {
                self.push(pc as u64 + 1)?;
                self.records.push(RawRecord::Branch {
                    kind: BranchKind::Call,
                    src: self.code(pc),
                    dst: self.code(target),
                });
                next = target;
            }
            Instruction::Ret => {
                let ret = self.pop()?;
                if ret >= self.program.instructions.len() as u64 {
                    return Err(Fault::BadReturn(ret));
                }
                self.records.push(RawRecord::Branch {
                    kind: BranchKind::Return,
                    src: self.code(pc),
                    dst: self.code(ret as usize),
                });
                next = ret as usize;
            }
            Instruction::Push { src } => self.push(self.reg(src))?,
            Instruction::Pop { dst } => {
                let v = self.pop()?;
                self.set(dst, v);
            }
            Instruction::Alloc { dst, size } => {
                let addr = self.alloc(self.reg(size))?;
                self.set(dst, addr);
            }
            Instruction::Free { ptr } => self.free(self.reg(ptr))?,
            Instruction::In { dst, idx } => self.set(dst, self.input_word(idx)),
            Instruction::Rand { dst } => {
                let v = self.next_rand()?;
                self.set(dst, v);
            }
            Instruction::Feat { dst, key } => {
                let v = self.overrides.features.get(&key).copied().unwrap_or(0);
                self.set(dst, v);
            }
            Instruction::Halt => return Ok(false),
        }
        self.pc = next;
        Ok(true)
    }

    /// Runs to HALT, returning the records framed by test case markers.
    pub fn run(mut self, step_cap: u64) -> Result<Vec<RawRecord>, VmError> {
        let error = |s: &Self, step: u64, fault: Fault| VmError {
            testcase: s.testcase,
            pc: s.pc,
            step,
            fault,
        };
        if self.input.len() > MAX_INPUT_LEN {
            return Err(error(&self, 0, Fault::InputTooLong(self.input.len())));
        }
        self.records.push(RawRecord::TestcaseStart { id: self.testcase });
        let mut steps = 0u64;
        loop {
            if steps >= step_cap {
                return Err(error(&self, steps, Fault::StepCap(step_cap)));
            }
            match self.step() {
                Ok(true) => steps += 1,
                Ok(false) => break,
                Err(fault) => return Err(error(&self, steps, fault)),
            }
        }
        self.records.push(RawRecord::TestcaseEnd { id: self.testcase });
        Ok(self.records)
    }
}

/// Executes `program` on one test case with the default step cap.
pub fn run(
    program: &Program,
    testcase: u32,
    input: &[u8],
    overrides: &Overrides,
    run_nonce: u64,
) -> Result<Vec<RawRecord>, VmError> {
    VmState::new(program, testcase, input, overrides, run_nonce).run(DEFAULT_STEP_CAP)
}
