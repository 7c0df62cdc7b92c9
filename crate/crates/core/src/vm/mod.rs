//! Toy register machine used as the built-in tracer.

mod corpus;
mod isa;
mod machine;

pub use corpus::{corpus, corpus_program, CorpusProgram, LeakSite, ManifestEntry};
pub use isa::{
    assemble, AluOp, AsmError, AsmErrorKind, Cond, Instruction, Program, Reg, MAX_INSTRUCTIONS,
    REGISTER_COUNT,
};
pub use machine::{
    heap_base, run, setup_records, stack_top, Fault, Overrides, VmError, VmState, DATA_BASE,
    DATA_OFFSET, DATA_SIZE, DEFAULT_STEP_CAP, IMAGE_BASE, IMAGE_ID, IMAGE_SIZE, MAX_INPUT_LEN,
    STACK_SIZE,
};
