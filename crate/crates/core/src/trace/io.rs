//! Bit-exact binary formats for raw and preprocessed traces.
//!
//! All integers are little-endian. Raw files start with `MWLK`, preprocessed
//! files with `MWPP`; both follow the magic with a `u16` version of 1. Records
//! (or entries) then run until end of file.

use std::io::{self, Write};

use thiserror::Error;

use super::types::{
    AbsCodeRef, Access, BranchKind, Entry, ImageInfo, PreprocessedTrace, RawRecord, Region,
    RegionRef,
};

pub const RAW_MAGIC: &[u8; 4] = b"MWLK";
pub const PREPROCESSED_MAGIC: &[u8; 4] = b"MWPP";
pub const FORMAT_VERSION: u16 = 1;

const KIND_TESTCASE_START: u8 = 1;
const KIND_TESTCASE_END: u8 = 2;
const KIND_IMAGE_LOAD: u8 = 3;
const KIND_ALLOC_SIZE: u8 = 4;
const KIND_ALLOC_ADDR: u8 = 5;
const KIND_FREE: u8 = 6;
const KIND_STACK_PTR: u8 = 7;
const KIND_BRANCH: u8 = 8;
const KIND_MEM_READ: u8 = 9;
const KIND_MEM_WRITE: u8 = 10;

const ENTRY_BRANCH: u8 = 1;
const ENTRY_MEM_ACCESS: u8 = 2;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("unsupported format version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u16 },
    #[error("unknown record kind {kind:#04x} at offset {offset}")]
    UnknownRecordKind { offset: usize, kind: u8 },
    #[error("unknown branch kind {code} at offset {offset}")]
    UnknownBranchKind { offset: usize, code: u8 },
    #[error("unknown access type {code} at offset {offset}")]
    UnknownAccess { offset: usize, code: u8 },
    #[error("unknown region tag {tag} (id {id}) at offset {offset}")]
    UnknownRegion { offset: usize, tag: u8, id: u32 },
    #[error("truncated record at offset {offset}")]
    Truncated { offset: usize },
    #[error("image name at offset {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("entry {entry} references heap block {id} absent from the header")]
    MissingBlock { entry: usize, id: u32 },
    #[error("entry {entry} references image {id} absent from the header")]
    MissingImage { entry: usize, id: u16 },
    #[error("common prefix length {prefix} exceeds entry count {entries}")]
    PrefixTooLong { prefix: u64, entries: usize },
    #[error("field too large to encode: {0}")]
    Oversized(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize, record_start: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated { offset: record_start }),
        }
    }

    fn u8(&mut self, start: usize) -> Result<u8, FormatError> {
        Ok(self.take(1, start)?[0])
    }

    fn u16(&mut self, start: usize) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, start)?.try_into().unwrap()))
    }

    fn u32(&mut self, start: usize) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, start)?.try_into().unwrap()))
    }

    fn u64(&mut self, start: usize) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, start)?.try_into().unwrap()))
    }

    fn code_ref(&mut self, start: usize) -> Result<AbsCodeRef, FormatError> {
        let image_id = self.u16(start)?;
        let offset = self.u64(start)?;
        Ok(AbsCodeRef { image_id, offset })
    }

    fn name(&mut self, start: usize) -> Result<String, FormatError> {
        let len = self.u16(start)? as usize;
        let bytes = self.take(len, start)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| FormatError::InvalidName { offset: start })
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.buf.get(..4).unwrap_or(self.buf);
        if found != magic {
            return Err(FormatError::BadMagic { offset: 0, found: found.to_vec() });
        }
        self.pos = 4;
        let version = self.u16(4)?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion { offset: 4, version });
        }
        Ok(())
    }

    fn branch_kind(&mut self, start: usize) -> Result<BranchKind, FormatError> {
        let code = self.u8(start)?;
        BranchKind::from_code(code).ok_or(FormatError::UnknownBranchKind { offset: start, code })
    }
}

fn put_code_ref(out: &mut Vec<u8>, r: AbsCodeRef) {
    out.extend_from_slice(&r.image_id.to_le_bytes());
    out.extend_from_slice(&r.offset.to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<(), FormatError> {
    let len = u16::try_from(name.len()).map_err(|_| FormatError::Oversized("image name"))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

pub fn encode_raw_trace(records: &[RawRecord]) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(6 + records.len() * 19);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for r in records {
        match r {
            RawRecord::TestcaseStart { id } => {
                out.push(KIND_TESTCASE_START);
                out.extend_from_slice(&id.to_le_bytes());
            }
            RawRecord::TestcaseEnd { id } => {
                out.push(KIND_TESTCASE_END);
                out.extend_from_slice(&id.to_le_bytes());
            }
            RawRecord::ImageLoad { image_id, base, size, name } => {
                out.push(KIND_IMAGE_LOAD);
                out.extend_from_slice(&image_id.to_le_bytes());
                out.extend_from_slice(&base.to_le_bytes());
                out.extend_from_slice(&size.to_le_bytes());
                put_name(&mut out, name)?;
            }
            RawRecord::AllocSize { size } => {
                out.push(KIND_ALLOC_SIZE);
                out.extend_from_slice(&size.to_le_bytes());
            }
            RawRecord::AllocAddr { addr } => {
                out.push(KIND_ALLOC_ADDR);
                out.extend_from_slice(&addr.to_le_bytes());
            }
            RawRecord::Free { addr } => {
                out.push(KIND_FREE);
                out.extend_from_slice(&addr.to_le_bytes());
            }
            RawRecord::StackPtr { sp } => {
                out.push(KIND_STACK_PTR);
                out.extend_from_slice(&sp.to_le_bytes());
            }
            RawRecord::Branch { kind, src, dst } => {
                out.push(KIND_BRANCH);
                out.push(kind.code());
                put_code_ref(&mut out, *src);
                put_code_ref(&mut out, *dst);
            }
            RawRecord::MemRead { instr, addr } | RawRecord::MemWrite { instr, addr } => {
                out.push(if matches!(r, RawRecord::MemRead { .. }) {
                    KIND_MEM_READ
                } else {
                    KIND_MEM_WRITE
                });
                put_code_ref(&mut out, *instr);
                out.extend_from_slice(&addr.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_raw_trace<W: Write>(mut w: W, records: &[RawRecord]) -> Result<(), FormatError> {
    w.write_all(&encode_raw_trace(records)?)?;
    Ok(())
}

pub fn read_raw_trace(bytes: &[u8]) -> Result<Vec<RawRecord>, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(RAW_MAGIC)?;
    let mut records = Vec::new();
    while !r.at_end() {
        let start = r.pos;
        let kind = r.u8(start)?;
        let record = match kind {
            KIND_TESTCASE_START => RawRecord::TestcaseStart { id: r.u32(start)? },
            KIND_TESTCASE_END => RawRecord::TestcaseEnd { id: r.u32(start)? },
            KIND_IMAGE_LOAD => RawRecord::ImageLoad {
                image_id: r.u16(start)?,
                base: r.u64(start)?,
                size: r.u64(start)?,
                name: r.name(start)?,
            },
            KIND_ALLOC_SIZE => RawRecord::AllocSize { size: r.u64(start)? },
            KIND_ALLOC_ADDR => RawRecord::AllocAddr { addr: r.u64(start)? },
            KIND_FREE => RawRecord::Free { addr: r.u64(start)? },
            KIND_STACK_PTR => RawRecord::StackPtr { sp: r.u64(start)? },
            KIND_BRANCH => RawRecord::Branch {
                kind: r.branch_kind(start)?,
                src: r.code_ref(start)?,
                dst: r.code_ref(start)?,
            },
            KIND_MEM_READ => RawRecord::MemRead { instr: r.code_ref(start)?, addr: r.u64(start)? },
            KIND_MEM_WRITE => RawRecord::MemWrite { instr: r.code_ref(start)?, addr: r.u64(start)? },
            other => return Err(FormatError::UnknownRecordKind { offset: start, kind: other }),
        };
        records.push(record);
    }
    Ok(records)
}

fn put_entry(out: &mut Vec<u8>, e: &Entry) {
    match *e {
        Entry::Branch { kind, src, dst } => {
            out.push(ENTRY_BRANCH);
            out.push(kind.code());
            put_code_ref(out, src);
            put_code_ref(out, dst);
        }
        Entry::MemAccess { access, instr, addr } => {
            out.push(ENTRY_MEM_ACCESS);
            out.push(match access {
                Access::Read => 0,
                Access::Write => 1,
            });
            put_code_ref(out, instr);
            out.push(addr.region.tag());
            out.extend_from_slice(&addr.region.id().to_le_bytes());
            out.extend_from_slice(&addr.offset.to_le_bytes());
        }
    }
}

pub fn encode_preprocessed_trace(trace: &PreprocessedTrace) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(32 + trace.entries.len() * 25);
    out.extend_from_slice(PREPROCESSED_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let image_count =
        u16::try_from(trace.images.len()).map_err(|_| FormatError::Oversized("image table"))?;
    out.extend_from_slice(&image_count.to_le_bytes());
    for img in &trace.images {
        out.extend_from_slice(&img.id.to_le_bytes());
        out.extend_from_slice(&img.size.to_le_bytes());
        put_name(&mut out, &img.name)?;
    }
    let block_count =
        u32::try_from(trace.blocks.len()).map_err(|_| FormatError::Oversized("block table"))?;
    out.extend_from_slice(&block_count.to_le_bytes());
    for (id, size) in &trace.blocks {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&size.to_le_bytes());
    }
    out.extend_from_slice(&trace.prefix_len.to_le_bytes());
    for e in &trace.entries {
        put_entry(&mut out, e);
    }
    Ok(out)
}

pub fn write_preprocessed_trace<W: Write>(
    mut w: W,
    trace: &PreprocessedTrace,
) -> Result<(), FormatError> {
    w.write_all(&encode_preprocessed_trace(trace)?)?;
    Ok(())
}

/// Parses a preprocessed trace and checks that every referenced image and
/// heap block exists in the header.
pub fn read_preprocessed_trace(bytes: &[u8]) -> Result<PreprocessedTrace, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(PREPROCESSED_MAGIC)?;
    let mut trace = PreprocessedTrace::default();

    let start = r.pos;
    let image_count = r.u16(start)?;
    for _ in 0..image_count {
        let start = r.pos;
        trace.images.push(ImageInfo { id: r.u16(start)?, size: r.u64(start)?, name: r.name(start)? });
    }
    let start = r.pos;
    let block_count = r.u32(start)?;
    for _ in 0..block_count {
        let start = r.pos;
        let id = r.u32(start)?;
        let size = r.u64(start)?;
        trace.blocks.insert(id, size);
    }
    let start = r.pos;
    trace.prefix_len = r.u64(start)?;

    while !r.at_end() {
        let start = r.pos;
        let entry = match r.u8(start)? {
            ENTRY_BRANCH => Entry::Branch {
                kind: r.branch_kind(start)?,
                src: r.code_ref(start)?,
                dst: r.code_ref(start)?,
            },
            ENTRY_MEM_ACCESS => {
                let access = match r.u8(start)? {
                    0 => Access::Read,
                    1 => Access::Write,
                    code => return Err(FormatError::UnknownAccess { offset: start, code }),
                };
                let instr = r.code_ref(start)?;
                let tag = r.u8(start)?;
                let id = r.u32(start)?;
                let offset = r.u64(start)?;
                let region = Region::from_parts(tag, id)
                    .ok_or(FormatError::UnknownRegion { offset: start, tag, id })?;
                Entry::MemAccess { access, instr, addr: RegionRef { region, offset } }
            }
            other => return Err(FormatError::UnknownRecordKind { offset: start, kind: other }),
        };
        trace.entries.push(entry);
    }
    validate_preprocessed(&trace)?;
    Ok(trace)
}

pub fn validate_preprocessed(trace: &PreprocessedTrace) -> Result<(), FormatError> {
    if trace.prefix_len > trace.entries.len() as u64 {
        return Err(FormatError::PrefixTooLong {
            prefix: trace.prefix_len,
            entries: trace.entries.len(),
        });
    }
    let has_image = |id: u16| trace.images.iter().any(|i| i.id == id);
    for (i, e) in trace.entries.iter().enumerate() {
        let (code_a, code_b, data) = match *e {
            Entry::Branch { src, dst, .. } => (src, Some(dst), None),
            Entry::MemAccess { instr, addr, .. } => (instr, None, Some(addr.region)),
        };
        for code in std::iter::once(code_a).chain(code_b) {
            if !has_image(code.image_id) {
                return Err(FormatError::MissingImage { entry: i, id: code.image_id });
            }
        }
        match data {
            Some(Region::HeapBlock(id)) if !trace.blocks.contains_key(&id) => {
                return Err(FormatError::MissingBlock { entry: i, id });
            }
            Some(Region::Image(id)) if !has_image(id) => {
                return Err(FormatError::MissingImage { entry: i, id });
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_records() -> Vec<RawRecord> {
        vec![
            RawRecord::ImageLoad { image_id: 0, base: 0x400000, size: 0x2000, name: "prog".into() },
            RawRecord::TestcaseStart { id: 3 },
            RawRecord::MemRead { instr: AbsCodeRef::new(0, 4), addr: 0x400100 },
        ]
    }

    #[test]
    fn empty_raw_trace_is_header_only() {
        let bytes = encode_raw_trace(&[]).unwrap();
        assert_eq!(bytes, b"MWLK\x01\x00");
        assert!(read_raw_trace(&bytes).unwrap().is_empty());
    }

    #[test]
    fn raw_round_trip_small() {
        let recs = sample_records();
        let mut buf = Vec::new();
        write_raw_trace(&mut buf, &recs).unwrap();
        assert_eq!(read_raw_trace(&buf).unwrap(), recs);
    }

    #[test]
    fn raw_bad_magic() {
        let err = read_raw_trace(b"XXXX\x01\x00").unwrap_err();
        assert!(matches!(err, FormatError::BadMagic { offset: 0, .. }), "{err}");
    }

    #[test]
    fn raw_unknown_kind_and_truncation_report_offsets() {
        let mut bytes = encode_raw_trace(&sample_records()).unwrap();
        let good_len = bytes.len();
        bytes.push(0x7f);
        match read_raw_trace(&bytes).unwrap_err() {
            FormatError::UnknownRecordKind { offset, kind } => {
                assert_eq!(offset, good_len);
                assert_eq!(kind, 0x7f);
            }
            e => panic!("unexpected {e}"),
        }
        bytes.pop();
        bytes.truncate(good_len - 3);
        let last_start = good_len - 19;
        match read_raw_trace(&bytes).unwrap_err() {
            FormatError::Truncated { offset } => assert_eq!(offset, last_start),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn raw_bad_version() {
        let err = read_raw_trace(b"MWLK\x02\x00").unwrap_err();
        assert!(matches!(err, FormatError::UnsupportedVersion { offset: 4, version: 2 }));
    }

    fn sample_pp() -> PreprocessedTrace {
        let mut t = PreprocessedTrace {
            images: vec![ImageInfo { id: 0, size: 0x20000, name: "ttable".into() }],
            prefix_len: 1,
            ..Default::default()
        };
        t.blocks.insert(1, 32);
        t.entries = vec![
            Entry::Branch {
                kind: BranchKind::Call,
                src: AbsCodeRef::new(0, 1),
                dst: AbsCodeRef::new(0, 9),
            },
            Entry::MemAccess {
                access: Access::Write,
                instr: AbsCodeRef::new(0, 2),
                addr: RegionRef::new(Region::HeapBlock(1), 8),
            },
        ];
        t
    }

    #[test]
    fn preprocessed_round_trip_keeps_block_table() {
        let t = sample_pp();
        let bytes = encode_preprocessed_trace(&t).unwrap();
        assert_eq!(&bytes[..4], b"MWPP");
        let back = read_preprocessed_trace(&bytes).unwrap();
        assert_eq!(back.blocks.get(&1), Some(&32));
        assert_eq!(back, t);
    }

    #[test]
    fn preprocessed_missing_block_is_named() {
        let mut t = sample_pp();
        t.blocks.clear();
        t.blocks.insert(2, 16);
        let bytes = encode_preprocessed_trace(&t).unwrap();
        let err = read_preprocessed_trace(&bytes).unwrap_err();
        assert!(matches!(err, FormatError::MissingBlock { id: 1, .. }));
        assert!(err.to_string().contains("block 1"));
    }

    fn arb_code_ref() -> impl Strategy<Value = AbsCodeRef> {
        (0u16..4, any::<u64>()).prop_map(|(i, o)| AbsCodeRef::new(i, o))
    }

    fn arb_record() -> impl Strategy<Value = RawRecord> {
        prop_oneof![
            any::<u32>().prop_map(|id| RawRecord::TestcaseStart { id }),
            any::<u32>().prop_map(|id| RawRecord::TestcaseEnd { id }),
            (any::<u16>(), any::<u64>(), any::<u64>(), "[a-z_.]{0,12}").prop_map(
                |(image_id, base, size, name)| RawRecord::ImageLoad { image_id, base, size, name }
            ),
            any::<u64>().prop_map(|size| RawRecord::AllocSize { size }),
            any::<u64>().prop_map(|addr| RawRecord::AllocAddr { addr }),
            any::<u64>().prop_map(|addr| RawRecord::Free { addr }),
            any::<u64>().prop_map(|sp| RawRecord::StackPtr { sp }),
            (0u8..5, arb_code_ref(), arb_code_ref()).prop_map(|(k, src, dst)| RawRecord::Branch {
                kind: BranchKind::from_code(k).unwrap(),
                src,
                dst
            }),
            (arb_code_ref(), any::<u64>()).prop_map(|(instr, addr)| RawRecord::MemRead { instr, addr }),
            (arb_code_ref(), any::<u64>()).prop_map(|(instr, addr)| RawRecord::MemWrite { instr, addr }),
        ]
    }

    fn arb_entry() -> impl Strategy<Value = Entry> {
        let region = prop_oneof![
            Just(Region::Image(0)),
            Just(Region::Stack),
            (0u32..3).prop_map(Region::HeapBlock),
            Just(Region::Unknown),
        ];
        prop_oneof![
            (0u8..5, any::<u64>(), any::<u64>()).prop_map(|(k, s, d)| Entry::Branch {
                kind: BranchKind::from_code(k).unwrap(),
                src: AbsCodeRef::new(0, s),
                dst: AbsCodeRef::new(0, d),
            }),
            (any::<bool>(), any::<u64>(), region, any::<u64>()).prop_map(|(w, i, region, offset)| {
                Entry::MemAccess {
                    access: if w { Access::Write } else { Access::Read },
                    instr: AbsCodeRef::new(0, i),
                    addr: RegionRef { region, offset },
                }
            }),
        ]
    }

    proptest! {
        #[test]
        fn raw_round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let bytes = encode_raw_trace(&records).unwrap();
            prop_assert_eq!(read_raw_trace(&bytes).unwrap(), records);
        }

        #[test]
        fn preprocessed_round_trip(entries in proptest::collection::vec(arb_entry(), 0..40)) {
            let mut t = PreprocessedTrace {
                images: vec![ImageInfo { id: 0, size: 1 << 20, name: "p".into() }],
                prefix_len: entries.len() as u64 / 2,
                entries,
                ..Default::default()
            };
            for id in 0..3 {
                t.blocks.insert(id, 64 * (id as u64 + 1));
            }
            let bytes = encode_preprocessed_trace(&t).unwrap();
            prop_assert_eq!(read_preprocessed_trace(&bytes).unwrap(), t);
        }
    }
}
