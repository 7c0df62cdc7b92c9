//! Word encoding of preprocessed entries and the hash chain over those words.
//!
//! Every entry encodes to exactly three words: a tag word followed by one
//! payload word per address field. Tag word layout:
//!
//! | bits    | branch                  | memory access                     |
//! |---------|-------------------------|-----------------------------------|
//! | 0..8    | `0x10 \| branch kind`   | `0x20 \| rw << 2 \| region tag`   |
//! | 8..40   | src image, dst image    | region id (image or block id)     |
//! | 40..56  | unused                  | instruction image id              |
//!
//! Granularity reduction touches only the data-address payload of memory
//! accesses; code offsets are always encoded as-is.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::types::{Access, Entry};
use crate::Error;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Spatial resolution of an observer: data addresses lose their low `shift` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u64", into = "u64")]
pub struct Granularity {
    bytes: u64,
    shift: u32,
}

impl Granularity {
    pub const BYTE: Granularity = Granularity { bytes: 1, shift: 0 };

    pub fn new(bytes: u64) -> Result<Self, Error> {
        if bytes == 0 || !bytes.is_power_of_two() {
            return Err(Error::Config(format!(
                "granularity must be a power of two >= 1, got {bytes}"
            )));
        }
        Ok(Self { bytes, shift: bytes.trailing_zeros() })
    }

    pub fn bytes(self) -> u64 {
        self.bytes
    }

    /// Number of discarded low address bits.
    pub fn shift(self) -> u32 {
        self.shift
    }

    #[inline]
    pub fn reduce(self, offset: u64) -> u64 {
        offset >> self.shift
    }
}

impl Default for Granularity {
    fn default() -> Self {
        Self::BYTE
    }
}

impl TryFrom<u64> for Granularity {
    type Error = Error;

    fn try_from(bytes: u64) -> Result<Self, Error> {
        Self::new(bytes)
    }
}

impl From<Granularity> for u64 {
    fn from(g: Granularity) -> u64 {
        g.bytes
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bytes)
    }
}

#[inline]
pub fn encode_entry(entry: &Entry, g: Granularity) -> [u64; 3] {
    match *entry {
        Entry::Branch { kind, src, dst } => {
            let tag = (0x10 | u64::from(kind.code()))
                | u64::from(src.image_id) << 8
                | u64::from(dst.image_id) << 24;
            [tag, src.offset, dst.offset]
        }
        Entry::MemAccess { access, instr, addr } => {
            let rw = match access {
                Access::Read => 0u64,
                Access::Write => 1u64,
            };
            let tag = (0x20 | rw << 2 | u64::from(addr.region.tag()))
                | u64::from(addr.region.id()) << 8
                | u64::from(instr.image_id) << 40;
            [tag, instr.offset, g.reduce(addr.offset)]
        }
    }
}

/// 64-bit FNV-1a state folded over little-endian words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateHash(pub u64);

impl StateHash {
    pub const INITIAL: StateHash = StateHash(FNV_OFFSET_BASIS);

    #[inline]
    pub fn chain(self, word: u64) -> StateHash {
        let mut h = self.0;
        for byte in word.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(FNV_PRIME);
        }
        StateHash(h)
    }

    #[inline]
    pub fn chain_entry(self, entry: &Entry, g: Granularity) -> StateHash {
        encode_entry(entry, g).iter().fold(self, |h, &w| h.chain(w))
    }

    pub fn of_entries<'a>(entries: impl IntoIterator<Item = &'a Entry>, g: Granularity) -> StateHash {
        entries.into_iter().fold(Self::INITIAL, |h, e| h.chain_entry(e, g))
    }
}

impl Default for StateHash {
    fn default() -> Self {
        Self::INITIAL
    }
}

impl fmt::Display for StateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}
