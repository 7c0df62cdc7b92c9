//! Raw trace to layout-independent preprocessed traces.
//!
//! The setup phase before the first test case forms a common prefix whose
//! allocation, image and stack state seeds every test case. Addresses are
//! then rewritten relative to images, heap blocks or the stack high-water
//! mark so traces of the same input match across runs with different
//! address layouts.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Access, Entry, ImageInfo, PreprocessedTrace, RawRecord, Region, RegionRef};

/// Accesses at most this far below the stack high-water mark count as stack.
pub const STACK_WINDOW: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("record {index}: test case {id} starts while test case {open} is still open")]
    Interleaved { index: usize, id: u32, open: u32 },
    #[error("record {index}: end of test case {id} without a matching start")]
    UnmatchedEnd { index: usize, id: u32 },
    #[error("test case {id} never ends")]
    Unterminated { id: u32 },
    #[error("record {index}: test case id {id} used twice")]
    DuplicateId { index: usize, id: u32 },
    #[error("allocation address {addr:#x} without a pending allocation size")]
    UnmatchedAlloc { addr: u64 },
    #[error("block at {addr:#x} (size {size}) overlaps a live block")]
    OverlappingBlock { addr: u64, size: u64 },
}

/// One test case's records, markers excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub id: u32,
    pub records: Vec<RawRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub prefix: Vec<RawRecord>,
    pub segments: Vec<Segment>,
    /// Records between an end marker and the next start, which are dropped.
    pub interstitial: usize,
}

pub fn split_testcases(records: &[RawRecord]) -> Result<Split, PreprocessError> {
    let mut prefix = Vec::new();
    let mut segments: Vec<Segment> = Vec::new();
    let mut open: Option<Segment> = None;
    let mut ids = HashSet::new();
    let mut interstitial = 0;

    for (index, r) in records.iter().enumerate() {
        match (r, &mut open) {
            (RawRecord::TestcaseStart { id }, Some(seg)) => {
                return Err(PreprocessError::Interleaved { index, id: *id, open: seg.id });
            }
            (RawRecord::TestcaseStart { id }, None) => {
                if !ids.insert(*id) {
                    return Err(PreprocessError::DuplicateId { index, id: *id });
                }
                open = Some(Segment { id: *id, records: Vec::new() });
            }
            (RawRecord::TestcaseEnd { id }, Some(seg)) if seg.id == *id => {
                segments.push(open.take().unwrap());
            }
            (RawRecord::TestcaseEnd { id }, _) => {
                return Err(PreprocessError::UnmatchedEnd { index, id: *id });
            }
            (other, Some(seg)) => seg.records.push(other.clone()),
            (other, None) if segments.is_empty() => prefix.push(other.clone()),
            (_, None) => interstitial += 1,
        }
    }
    if let Some(seg) = open {
        return Err(PreprocessError::Unterminated { id: seg.id });
    }
    Ok(Split { prefix, segments, interstitial })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LiveBlock {
    id: u32,
    size: u64,
}

/// Live heap blocks plus the LIFO stack of sizes awaiting an address.
#[derive(Debug, Clone, Default)]
pub struct AllocMap {
    live: BTreeMap<u64, LiveBlock>,
    pending: Vec<u64>,
    next_id: u32,
    registered: BTreeMap<u32, u64>,
    unknown_frees: u64,
}

impl AllocMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies an allocation-related record; other records are ignored.
    pub fn apply(&mut self, record: &RawRecord) -> Result<(), PreprocessError> {
        match *record {
            RawRecord::AllocSize { size } => self.pending.push(size),
            RawRecord::AllocAddr { addr } => {
                let size = self.pending.pop().ok_or(PreprocessError::UnmatchedAlloc { addr })?;
                let end = addr.saturating_add(size);
                let before = self.live.range(..=addr).next_back();
                let overlaps_before = before.is_some_and(|(&b, blk)| b.saturating_add(blk.size) > addr);
                let overlaps_after = self.live.range(addr..).next().is_some_and(|(&b, _)| b < end);
                if size > 0 && (overlaps_before || overlaps_after) {
                    return Err(PreprocessError::OverlappingBlock { addr, size });
                }
                let id = self.next_id;
                self.next_id += 1;
                self.live.insert(addr, LiveBlock { id, size });
                self.registered.insert(id, size);
            }
            RawRecord::Free { addr } if self.live.remove(&addr).is_none() => {
                self.unknown_frees += 1;
                warn!("free of unknown address {addr:#x}");
            }
            _ => {}
        }
        Ok(())
    }

    /// Block id and offset of the live block containing `addr`.
    pub fn lookup(&self, addr: u64) -> Option<(u32, u64)> {
        let (&base, blk) = self.live.range(..=addr).next_back()?;
        (addr - base < blk.size).then_some((blk.id, addr - base))
    }

    /// Live blocks as `(base, id, size)`.
    pub fn live_blocks(&self) -> impl Iterator<Item = (u64, u32, u64)> + '_ {
        self.live.iter().map(|(&b, blk)| (b, blk.id, blk.size))
    }

    /// Every block registered so far, freed or not.
    pub fn registered(&self) -> &BTreeMap<u32, u64> {
        &self.registered
    }

    pub fn pending_sizes(&self) -> &[u64] {
        &self.pending
    }

    pub fn unknown_frees(&self) -> u64 {
        self.unknown_frees
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StackTracker {
    /// Highest stack pointer observed.
    pub stack_base: Option<u64>,
    pub sp: Option<u64>,
}

impl StackTracker {
    pub fn update(&mut self, sp: u64) {
        self.sp = Some(sp);
        self.stack_base = Some(self.stack_base.map_or(sp, |b| b.max(sp)));
    }

    /// Downward offset from the high-water mark, if `addr` is in the window.
    pub fn offset(&self, addr: u64) -> Option<u64> {
        let base = self.stack_base?;
        (addr <= base && base - addr < STACK_WINDOW).then(|| base - addr)
    }
}

#[derive(Debug, Clone, Default)]
struct ImageTable {
    by_base: BTreeMap<u64, (u16, u64)>,
    info: BTreeMap<u16, ImageInfo>,
}

impl ImageTable {
    fn load(&mut self, id: u16, base: u64, size: u64, name: &str) {
        if let Some(old) = self.info.get(&id) {
            let old_id = old.id;
            self.by_base.retain(|_, (i, _)| *i != old_id);
        }
        self.by_base.insert(base, (id, size));
        self.info.insert(id, ImageInfo { id, size, name: name.to_string() });
    }

    fn lookup(&self, addr: u64) -> Option<(u16, u64)> {
        let (&base, &(id, size)) = self.by_base.range(..=addr).next_back()?;
        (addr - base < size).then_some((id, addr - base))
    }
}

/// Tables and entries accumulated while walking records.
#[derive(Debug, Clone, Default)]
struct Context {
    images: ImageTable,
    allocs: AllocMap,
    stack: StackTracker,
    entries: Vec<Entry>,
    unknown_accesses: u64,
}

impl Context {
    fn classify(&mut self, addr: u64) -> RegionRef {
        if let Some((id, off)) = self.images.lookup(addr) {
            return RegionRef::new(Region::Image(id), off);
        }
        if let Some((id, off)) = self.allocs.lookup(addr) {
            return RegionRef::new(Region::HeapBlock(id), off);
        }
        if let Some(off) = self.stack.offset(addr) {
            return RegionRef::new(Region::Stack, off);
        }
        self.unknown_accesses += 1;
        RegionRef::new(Region::Unknown, addr)
    }

    fn consume(&mut self, record: &RawRecord) -> Result<(), PreprocessError> {
        match record {
            RawRecord::ImageLoad { image_id, base, size, name } => {
                self.images.load(*image_id, *base, *size, name)
            }
            RawRecord::AllocSize { .. } | RawRecord::AllocAddr { .. } | RawRecord::Free { .. } => {
                self.allocs.apply(record)?
            }
            RawRecord::StackPtr { sp } => self.stack.update(*sp),
            RawRecord::Branch { kind, src, dst } => {
                self.entries.push(Entry::Branch { kind: *kind, src: *src, dst: *dst })
            }
            RawRecord::MemRead { instr, addr } | RawRecord::MemWrite { instr, addr } => {
                let access = if matches!(record, RawRecord::MemRead { .. }) {
                    Access::Read
                } else {
                    Access::Write
                };
                let addr = self.classify(*addr);
                self.entries.push(Entry::MemAccess { access, instr: *instr, addr });
            }
            RawRecord::TestcaseStart { .. } | RawRecord::TestcaseEnd { .. } => {}
        }
        Ok(())
    }

    fn into_trace(self, prefix_len: usize) -> PreprocessedTrace {
        PreprocessedTrace {
            images: self.images.info.into_values().collect(),
            blocks: self.allocs.registered.clone(),
            prefix_len: prefix_len as u64,
            entries: self.entries,
        }
    }
}

/// Relativizes one segment, starting from a snapshot of the prefix state.
/// Returns only the segment's own entries.
pub fn relativize(
    segment: &[RawRecord],
    allocs: &mut AllocMap,
    stack: &mut StackTracker,
) -> Result<(Vec<Entry>, u64), PreprocessError> {
    let mut ctx = Context {
        allocs: std::mem::take(allocs),
        stack: *stack,
        ..Default::default()
    };
    for r in segment {
        ctx.consume(r)?;
    }
    *allocs = ctx.allocs;
    *stack = ctx.stack;
    Ok((ctx.entries, ctx.unknown_accesses))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub id: u32,
    pub entries: u64,
    pub unknown_accesses: u64,
    pub unknown_frees: u64,
    pub stack_base_known: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessOutput {
    pub traces: Vec<(u32, PreprocessedTrace)>,
    pub stats: Vec<SegmentStats>,
    pub prefix_entries: usize,
    pub interstitial_records: usize,
}

/// Splits a raw trace into test cases and relativizes each one.
pub fn preprocess(records: &[RawRecord]) -> Result<PreprocessOutput, PreprocessError> {
    let split = split_testcases(records)?;
    let mut base = Context::default();
    for r in &split.prefix {
        base.consume(r)?;
    }
    let prefix_len = base.entries.len();

    let results: Vec<Result<(u32, PreprocessedTrace, SegmentStats), PreprocessError>> = split
        .segments
        .par_iter()
        .map(|seg| {
            let mut ctx = base.clone();
            ctx.unknown_accesses = 0;
            for r in &seg.records {
                ctx.consume(r)?;
            }
            let stats = SegmentStats {
                id: seg.id,
                entries: (ctx.entries.len() - prefix_len) as u64,
                unknown_accesses: ctx.unknown_accesses + base.unknown_accesses,
                unknown_frees: ctx.allocs.unknown_frees(),
                stack_base_known: ctx.stack.stack_base.is_some(),
            };
            if stats.unknown_accesses > 0 {
                warn!(
                    "test case {}: {} accesses outside any known region",
                    seg.id, stats.unknown_accesses
                );
            }
            Ok((seg.id, ctx.into_trace(prefix_len), stats))
        })
        .collect();

    let mut traces = Vec::with_capacity(results.len());
    let mut stats = Vec::with_capacity(results.len());
    for r in results {
        let (id, t, s) = r?;
        traces.push((id, t));
        stats.push(s);
    }
    Ok(PreprocessOutput {
        traces,
        stats,
        prefix_entries: prefix_len,
        interstitial_records: split.interstitial,
    })
}
