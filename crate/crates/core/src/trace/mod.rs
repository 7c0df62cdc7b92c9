//! Trace domain types, binary file formats, entry encoding and state hashing.

mod encode;
mod io;
mod types;

pub use encode::{encode_entry, Granularity, StateHash, FNV_OFFSET_BASIS, FNV_PRIME};
pub use io::{
    encode_preprocessed_trace, encode_raw_trace, read_preprocessed_trace, read_raw_trace,
    validate_preprocessed, write_preprocessed_trace, write_raw_trace, FormatError,
    FORMAT_VERSION, PREPROCESSED_MAGIC, RAW_MAGIC,
};
pub use types::{
    AbsCodeRef, Access, BranchKind, Entry, ImageInfo, PreprocessedTrace, RawRecord, Region,
    RegionRef,
};
