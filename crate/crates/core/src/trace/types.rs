//! Domain types shared by the raw and preprocessed trace representations.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Code location expressed relative to the base of a loaded image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AbsCodeRef {
    pub image_id: u16,
    pub offset: u64,
}

impl AbsCodeRef {
    pub const fn new(image_id: u16, offset: u64) -> Self {
        Self { image_id, offset }
    }
}

impl fmt::Display for AbsCodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:#x}", self.image_id, self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Jump,
    CondTaken,
    CondNotTaken,
    Call,
    Return,
}

impl BranchKind {
    pub const ALL: [BranchKind; 5] = [
        BranchKind::Jump,
        BranchKind::CondTaken,
        BranchKind::CondNotTaken,
        BranchKind::Call,
        BranchKind::Return,
    ];

    pub fn code(self) -> u8 {
        match self {
            BranchKind::Jump => 0,
            BranchKind::CondTaken => 1,
            BranchKind::CondNotTaken => 2,
            BranchKind::Call => 3,
            BranchKind::Return => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Jump => "jump",
            BranchKind::CondTaken => "taken",
            BranchKind::CondNotTaken => "not-taken",
            BranchKind::Call => "call",
            BranchKind::Return => "return",
        }
    }
}

/// One instrumentation event with absolute addresses, as produced by a tracer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawRecord {
    TestcaseStart { id: u32 },
    TestcaseEnd { id: u32 },
    ImageLoad { image_id: u16, base: u64, size: u64, name: String },
    AllocSize { size: u64 },
    AllocAddr { addr: u64 },
    Free { addr: u64 },
    StackPtr { sp: u64 },
    Branch { kind: BranchKind, src: AbsCodeRef, dst: AbsCodeRef },
    MemRead { instr: AbsCodeRef, addr: u64 },
    MemWrite { instr: AbsCodeRef, addr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Read,
    Write,
}

/// Memory region an access was attributed to during preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Image(u16),
    Stack,
    HeapBlock(u32),
    /// The offset carries the absolute address.
    Unknown,
}

impl Region {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Region::Image(_) => 0,
            Region::Stack => 1,
            Region::HeapBlock(_) => 2,
            Region::Unknown => 3,
        }
    }

    pub(crate) fn id(self) -> u32 {
        match self {
            Region::Image(id) => u32::from(id),
            Region::HeapBlock(id) => id,
            Region::Stack | Region::Unknown => 0,
        }
    }

    pub(crate) fn from_parts(tag: u8, id: u32) -> Option<Self> {
        match tag {
            0 => u16::try_from(id).ok().map(Region::Image),
            1 => Some(Region::Stack),
            2 => Some(Region::HeapBlock(id)),
            3 => Some(Region::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionRef {
    pub region: Region,
    pub offset: u64,
}

impl RegionRef {
    pub const fn new(region: Region, offset: u64) -> Self {
        Self { region, offset }
    }
}

impl fmt::Display for RegionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.region {
            Region::Image(id) => write!(f, "image{}+{:#x}", id, self.offset),
            Region::Stack => write!(f, "stack-{:#x}", self.offset),
            Region::HeapBlock(id) => write!(f, "heap{}+{:#x}", id, self.offset),
            Region::Unknown => write!(f, "?{:#x}", self.offset),
        }
    }
}

/// A layout-independent trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entry {
    Branch { kind: BranchKind, src: AbsCodeRef, dst: AbsCodeRef },
    MemAccess { access: Access, instr: AbsCodeRef, addr: RegionRef },
}

impl Entry {
    /// The instruction responsible for this entry.
    pub fn instruction(&self) -> AbsCodeRef {
        match *self {
            Entry::Branch { src, .. } => src,
            Entry::MemAccess { instr, .. } => instr,
        }
    }
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entry::Branch { kind, src, dst } => write!(f, "branch {} {} -> {}", kind.name(), src, dst),
            Entry::MemAccess { access, instr, addr } => {
                let rw = match access {
                    Access::Read => "read",
                    Access::Write => "write",
                };
                write!(f, "{} {} @ {}", rw, instr, addr)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u16,
    pub size: u64,
    pub name: String,
}

/// One test case's trace after address relativization.
///
/// Heap block sizes live in the header; entries reference blocks by id only.
/// The first `prefix_len` entries come from the setup phase shared by all
/// test cases.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessedTrace {
    pub images: Vec<ImageInfo>,
    pub blocks: std::collections::BTreeMap<u32, u64>,
    pub prefix_len: u64,
    pub entries: Vec<Entry>,
}
