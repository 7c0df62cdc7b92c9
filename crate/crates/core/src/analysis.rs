//! Trace comparison, whole-trace MI and single-instruction MI.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{AbsCodeRef, Entry, Granularity, StateHash};

/// Entries compared ahead of a mismatch when looking for a resync point.
pub const RESYNC_WINDOW: usize = 64;
/// Entries kept per side in a hunk excerpt.
pub const EXCERPT_LEN: usize = 8;
/// Traces longer than this get a checkpoint interval above 1 by default.
pub const CHECKPOINT_TARGET: usize = 100_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("MI analysis needs at least 2 test cases, got {0}")]
    TooFewCases(usize),
    #[error("class sizes must be non-empty and positive")]
    BadCounts,
    #[error("checkpoint interval must be at least 1")]
    ZeroCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiResult {
    pub mi_bits: f64,
    pub max_bits: f64,
    pub min_entropy_bits: f64,
    pub class_count: usize,
    /// Class size to number of classes of that size.
    pub class_sizes: BTreeMap<usize, usize>,
}

/// MI of an observable whose values partition the test cases into classes
/// of the given sizes, with uniformly distributed inputs.
pub fn mi_from_counts(sizes: &[usize]) -> Result<MiResult, AnalysisError> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(AnalysisError::BadCounts);
    }
    let mut hist = BTreeMap::new();
    for &c in sizes {
        *hist.entry(c).or_insert(0usize) += 1;
    }
    Ok(mi_from_histogram(hist))
}

fn mi_from_histogram(class_sizes: BTreeMap<usize, usize>) -> MiResult {
    let n: usize = class_sizes.iter().map(|(&c, &m)| c * m).sum();
    let class_count: usize = class_sizes.values().sum();
    let max_bits = (n as f64).log2();
    let mi_bits = if class_count == 1 {
        0.0
    } else {
        // sum_c (c/N) log2(N/c) = log2 N - sum_c c log2 c / N
        let weighted: f64 = class_sizes
            .iter()
            .map(|(&c, &m)| m as f64 * c as f64 * (c as f64).log2())
            .sum();
        (max_bits - weighted / n as f64).clamp(0.0, max_bits)
    };
    MiResult {
        mi_bits,
        max_bits,
        min_entropy_bits: (class_count as f64).log2(),
        class_count,
        class_sizes,
    }
}

/// MI of per-case observations, one value per test case.
pub fn mi_from_states(states: &[u64]) -> Result<MiResult, AnalysisError> {
    if states.is_empty() {
        return Err(AnalysisError::BadCounts);
    }
    let mut sorted = states.to_vec();
    sorted.sort_unstable();
    let mut hist = BTreeMap::new();
    let mut run = 1usize;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            *hist.entry(run).or_insert(0usize) += 1;
            run = 1;
        }
    }
    *hist.entry(run).or_insert(0usize) += 1;
    Ok(mi_from_histogram(hist))
}

/// Drops the low address bits of every data access.
pub fn apply_granularity(entries: &[Entry], g: Granularity) -> Vec<Entry> {
    entries
        .iter()
        .map(|e| match *e {
            Entry::MemAccess { access, instr, mut addr } => {
                addr.offset = g.reduce(addr.offset);
                Entry::MemAccess { access, instr, addr }
            }
            b => b,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hunk {
    pub a: Range<usize>,
    pub b: Range<usize>,
    pub a_excerpt: Vec<String>,
    pub b_excerpt: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub first_diff_index: Option<usize>,
    pub hunks: Vec<Hunk>,
}

impl Divergence {
    pub fn is_identical(&self) -> bool {
        self.first_diff_index.is_none()
    }
}

fn common_run(a: &[Entry], b: &[Entry], cap: usize) -> usize {
    a.iter().zip(b).take(cap).take_while(|(x, y)| x == y).count()
}

/// Best `(di, dj)` realigning `a[i..]` with `b[j..]`: the longest common run
/// within the window, ties broken by the smallest skip.
fn resync(a: &[Entry], b: &[Entry], i: usize, j: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, usize)> = None;
    for di in 0..=RESYNC_WINDOW.min(a.len() - i) {
        for dj in 0..=RESYNC_WINDOW.min(b.len() - j) {
            if (di == 0 && dj == 0) || i + di >= a.len() || j + dj >= b.len() {
                continue;
            }
            if a[i + di] != b[j + dj] {
                continue;
            }
            let run = common_run(&a[i + di..], &b[j + dj..], RESYNC_WINDOW);
            let better = match best {
                None => true,
                Some((r, bi, bj)) => run > r || (run == r && di + dj < bi + bj),
            };
            if better {
                best = Some((run, di, dj));
            }
        }
    }
    best.map(|(_, di, dj)| (di, dj))
}

fn excerpt(entries: &[Entry]) -> Vec<String> {
    entries.iter().take(EXCERPT_LEN).map(ToString::to_string).collect()
}

/// Entry-wise comparison with windowed resynchronization.
pub fn compare_traces(a: &[Entry], b: &[Entry]) -> Divergence {
    let mut out = Divergence::default();
    let (mut i, mut j) = (0, 0);
    loop {
        let same = common_run(&a[i..], &b[j..], usize::MAX);
        i += same;
        j += same;
        if i == a.len() && j == b.len() {
            return out;
        }
        out.first_diff_index.get_or_insert(i);
        let (di, dj) = if i == a.len() || j == b.len() {
            (a.len() - i, b.len() - j)
        } else {
            resync(a, b, i, j).unwrap_or((a.len() - i, b.len() - j))
        };
        out.hunks.push(Hunk {
            a: i..i + di,
            b: j..j + dj,
            a_excerpt: excerpt(&a[i..i + di]),
            b_excerpt: excerpt(&b[j..j + dj]),
        });
        i += di;
        j += dj;
    }
}

pub fn default_checkpoint(max_len: usize) -> usize {
    if max_len <= CHECKPOINT_TARGET {
        1
    } else {
        max_len.div_ceil(CHECKPOINT_TARGET)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: usize,
    pub mi_bits: f64,
    pub class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeTraceMi {
    pub checkpoint: usize,
    pub curve: Vec<CurvePoint>,
    pub result: MiResult,
}

/// Checkpoints processed per parallel batch, bounding memory to
/// `cases * BATCH` hashes.
const BATCH: usize = 4096;

/// MI between inputs and trace prefixes at every `checkpoint` entries.
/// Traces that end early contribute their final hash to later checkpoints.
pub fn whole_trace_mi<T: AsRef<[Entry]> + Sync>(
    traces: &[T],
    g: Granularity,
    checkpoint: usize,
) -> Result<WholeTraceMi, AnalysisError> {
    if traces.len() < 2 {
        return Err(AnalysisError::TooFewCases(traces.len()));
    }
    if checkpoint == 0 {
        return Err(AnalysisError::ZeroCheckpoint);
    }
    let max_len = traces.iter().map(|t| t.as_ref().len()).max().unwrap_or(0);
    let mut points: Vec<usize> = (1..=max_len / checkpoint).map(|m| m * checkpoint).collect();
    if points.last() != Some(&max_len) && max_len > 0 {
        points.push(max_len);
    }

    let mut state: Vec<(usize, StateHash)> = vec![(0, StateHash::INITIAL); traces.len()];
    let mut curve = Vec::with_capacity(points.len());
    for batch in points.chunks(BATCH) {
        let columns: Vec<Vec<u64>> = traces
            .par_iter()
            .zip(state.par_iter_mut())
            .map(|(t, (pos, h))| {
                let t = t.as_ref();
                batch
                    .iter()
                    .map(|&p| {
                        let end = p.min(t.len());
                        for e in &t[*pos..end.max(*pos)] {
                            *h = h.chain_entry(e, g);
                        }
                        *pos = (*pos).max(end);
                        h.0
                    })
                    .collect()
            })
            .collect();
        let batch_points: Vec<CurvePoint> = (0..batch.len())
            .into_par_iter()
            .map(|c| {
                let states: Vec<u64> = columns.iter().map(|col| col[c]).collect();
                let r = mi_from_states(&states).expect("non-empty");
                CurvePoint { index: batch[c], mi_bits: r.mi_bits, class_count: r.class_count }
            })
            .collect();
        curve.extend(batch_points);
    }
    let finals: Vec<u64> = state.iter().map(|(_, h)| h.0).collect();
    Ok(WholeTraceMi { checkpoint, curve, result: mi_from_states(&finals)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakClass {
    Memory,
    ControlFlow,
}

impl LeakClass {
    pub fn of(entry: &Entry) -> Self {
        match entry {
            Entry::Branch { .. } => LeakClass::ControlFlow,
            Entry::MemAccess { .. } => LeakClass::Memory,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LeakClass::Memory => "memory",
            LeakClass::ControlFlow => "control_flow",
        }
    }
}

impl fmt::Display for LeakClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstructionKey {
    pub instr: AbsCodeRef,
    pub class: LeakClass,
}

/// Per-instruction hash chains of one trace.
fn instruction_states(entries: &[Entry], g: Granularity) -> HashMap<InstructionKey, StateHash> {
    let mut map: HashMap<InstructionKey, StateHash> = HashMap::new();
    for e in entries {
        let key = InstructionKey { instr: e.instruction(), class: LeakClass::of(e) };
        let h = map.entry(key).or_insert(StateHash::INITIAL);
        *h = h.chain_entry(e, g);
    }
    map
}

/// MI of every memory-accessing and branch instruction. Cases that never
/// execute an instruction contribute the empty-chain hash.
pub fn instruction_mi<T: AsRef<[Entry]> + Sync>(
    traces: &[T],
    g: Granularity,
) -> Result<BTreeMap<InstructionKey, MiResult>, AnalysisError> {
    if traces.len() < 2 {
        return Err(AnalysisError::TooFewCases(traces.len()));
    }
    let per_case: Vec<HashMap<InstructionKey, StateHash>> =
        traces.par_iter().map(|t| instruction_states(t.as_ref(), g)).collect();

    let mut table: BTreeMap<InstructionKey, Vec<u64>> = BTreeMap::new();
    for (case, states) in per_case.iter().enumerate() {
        for (key, h) in states {
            table.entry(*key).or_insert_with(|| vec![StateHash::INITIAL.0; traces.len()])[case] = h.0;
        }
    }
    Ok(table
        .into_par_iter()
        .map(|(k, states)| (k, mi_from_states(&states).expect("non-empty")))
        .collect())
}

/// Highest instruction MI per image.
pub fn per_image_max(results: &BTreeMap<InstructionKey, MiResult>) -> BTreeMap<u16, f64> {
    let mut out: BTreeMap<u16, f64> = BTreeMap::new();
    for (k, r) in results {
        let m = out.entry(k.instr.image_id).or_insert(0.0);
        *m = m.max(r.mi_bits);
    }
    out
}
