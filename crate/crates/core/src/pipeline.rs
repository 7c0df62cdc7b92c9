//! Staged pipeline: gen, trace or ingest, preprocess, analyze, report.
//!
//! Every stage reads its inputs from and writes its outputs to one working
//! directory, so any later stage can be re-run on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    compare_traces, default_checkpoint, instruction_mi, whole_trace_mi, Divergence, LeakClass, MiResult,
};
use crate::preprocess::{preprocess, SegmentStats, STACK_WINDOW};
use crate::report::{
    collision_probability, emit_reports, parse_map, ImageMax, InstructionRow, PairSummary, Report,
    ReportMetadata, SymbolMap,
};
use crate::testcase::{derive_rand_streams, gen_random, gen_template, load_dir, Template, TestcaseSet};
use crate::trace::{
    encode_preprocessed_trace, encode_raw_trace, read_preprocessed_trace, read_raw_trace, AbsCodeRef, Entry,
    Granularity, ImageInfo, PreprocessedTrace, RawRecord,
};
use crate::vm::{assemble, corpus_program, run, setup_records, Overrides, Program, IMAGE_ID};
use crate::{Error, Result};

pub const TESTCASES_FILE: &str = "testcases.json";
pub const RAW_FILE: &str = "raw.trace";
pub const PROGRAM_FILE: &str = "program.mw";
pub const META_FILE: &str = "trace_meta.json";
pub const PP_DIR: &str = "pp";
pub const PP_SUMMARY_FILE: &str = "summary.json";
pub const ANALYSIS_DIR: &str = "analysis";
pub const MI_TRACE_FILE: &str = "mi_trace.json";
pub const MI_CURVE_FILE: &str = "mi_curve.csv";
pub const MI_INSTR_FILE: &str = "mi_instr.json";
pub const COMPARE_FILE: &str = "compare.json";

/// RAND values drawn per case under [`RandPolicy::Derive`].
pub const DERIVED_RAND_PER_CASE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseSource {
    Random { n: usize, len: usize },
    Template { template: String, n: usize },
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum RandPolicy {
    /// RAND draws from a generator keyed by the seed and test case id.
    #[default]
    Seeded,
    /// The same list for every case.
    Fixed(Vec<u64>),
    /// Per-case lists derived from the seed and recorded with the cases.
    Derive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenConfig {
    pub source: CaseSource,
    pub seed: u64,
    pub rand: RandPolicy,
    pub features: BTreeMap<u32, u64>,
}

/// Test cases plus the nondeterminism overrides that belong to each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseFile {
    pub set: TestcaseSet,
    pub overrides: Vec<Overrides>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub program: String,
    pub tracer: String,
    pub run_nonce: Option<u64>,
    pub case_count: usize,
    /// Image 0 symbols taken from program labels.
    pub symbols: Vec<(u64, String)>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub case_ids: Vec<u32>,
    pub images: Vec<ImageInfo>,
    pub prefix_entries: usize,
    pub interstitial_records: usize,
    pub stack_anchor: String,
    pub stack_window: u64,
    pub unknown_accesses: u64,
    pub segments: Vec<SegmentStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Analyses {
    pub compare: bool,
    pub whole_trace: bool,
    pub instruction: bool,
}

impl Analyses {
    pub const ALL: Analyses = Analyses { compare: true, whole_trace: true, instruction: true };

    fn needs_mi(self) -> bool {
        self.whole_trace || self.instruction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub granularity: Granularity,
    pub checkpoint: Option<usize>,
    /// Test case id pairs to diff; empty means the first two cases.
    pub pairs: Vec<(u32, u32)>,
    pub analyses: Analyses,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { granularity: Granularity::BYTE, checkpoint: None, pairs: Vec::new(), analyses: Analyses::ALL }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOptions {
    pub maps: BTreeMap<u16, PathBuf>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceInput {
    /// A program file path or `corpus:NAME`.
    Program(String),
    /// An externally produced raw trace.
    Raw(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub input: TraceInput,
    /// Ignored for raw input, whose test cases are fixed by the trace.
    pub gen: GenConfig,
    pub run_nonce: u64,
    pub analyze: AnalyzeOptions,
    pub report: ReportOptions,
    pub out: PathBuf,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn gen_stage(cfg: &GenConfig, out: &Path) -> Result<CaseFile> {
    let set = match &cfg.source {
        CaseSource::Random { n, len } => gen_random(*n, *len, cfg.seed)?,
        CaseSource::Template { template, n } => gen_template(&Template::parse(template)?, *n, cfg.seed)?,
        CaseSource::Directory(dir) => load_dir(dir)?,
    };
    let n = set.len();
    let streams = match &cfg.rand {
        RandPolicy::Seeded => vec![Vec::new(); n],
        RandPolicy::Fixed(values) => vec![values.clone(); n],
        RandPolicy::Derive => derive_rand_streams(cfg.seed, n, DERIVED_RAND_PER_CASE),
    };
    let overrides = streams
        .into_iter()
        .map(|rand_values| Overrides { rand_values, features: cfg.features.clone(), rand_seed: cfg.seed })
        .collect();
    let file = CaseFile { set, overrides };
    write_json(&out.join(TESTCASES_FILE), &file)?;
    Ok(file)
}

/// Resolves a program path or `corpus:NAME`, returning the program, its
/// source text and any notes attached to it.
pub fn load_program(spec: &str) -> Result<(Program, String, Vec<String>)> {
    if let Some(name) = spec.strip_prefix("corpus:") {
        let c = corpus_program(name).ok_or_else(|| Error::Config(format!("no corpus program named {name:?}")))?;
        let notes = if c.manifest.notes.is_empty() { vec![] } else { vec![c.manifest.notes.clone()] };
        return Ok((c.program, c.source.to_string(), notes));
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok((assemble(&text)?, text, Vec::new()))
}

/// Label symbols for image 0, one name per offset.
pub fn label_symbols(program: &Program) -> Vec<(u64, String)> {
    let mut by_offset: BTreeMap<u64, String> = BTreeMap::new();
    for (name, &idx) in &program.labels {
        by_offset.entry(idx as u64).or_insert_with(|| name.clone());
    }
    by_offset.into_iter().collect()
}

/// Raw trace of all cases, setup records first, cases in id order.
pub fn trace_cases(program: &Program, cases: &CaseFile, run_nonce: u64) -> Result<Vec<RawRecord>> {
    if cases.overrides.len() != cases.set.len() {
        return Err(Error::Config("test case file has mismatched override count".into()));
    }
    let per_case: Vec<Vec<RawRecord>> = cases
        .set
        .cases
        .par_iter()
        .zip(&cases.overrides)
        .enumerate()
        .map(|(id, (input, ov))| run(program, id as u32, input, ov, run_nonce))
        .collect::<Result<_, _>>()?;
    let mut records = setup_records(program, run_nonce);
    records.reserve(per_case.iter().map(Vec::len).sum());
    for r in per_case {
        records.extend(r);
    }
    Ok(records)
}

pub fn trace_stage(program_spec: &str, out: &Path, run_nonce: u64) -> Result<TraceMeta> {
    let (program, source, notes) = load_program(program_spec)?;
    let cases: CaseFile = read_json(&out.join(TESTCASES_FILE))?;
    let records = trace_cases(&program, &cases, run_nonce)?;
    write_file(&out.join(RAW_FILE), &encode_raw_trace(&records)?)?;
    write_file(&out.join(PROGRAM_FILE), source.as_bytes())?;
    let meta = TraceMeta {
        program: program.name.clone(),
        tracer: "minivm".into(),
        run_nonce: Some(run_nonce),
        case_count: cases.set.len(),
        symbols: label_symbols(&program),
        notes,
    };
    write_json(&out.join(META_FILE), &meta)?;
    Ok(meta)
}

/// Validates an external raw trace and copies it into the working directory.
pub fn ingest_stage(raw: &Path, out: &Path) -> Result<TraceMeta> {
    let bytes = read_file(raw)?;
    let records = read_raw_trace(&bytes)?;
    let case_count = records.iter().filter(|r| matches!(r, RawRecord::TestcaseStart { .. })).count();
    let program = records
        .iter()
        .find_map(|r| match r {
            RawRecord::ImageLoad { image_id: IMAGE_ID, name, .. } => Some(name.clone()),
            _ => None,
        })
        .unwrap_or_else(|| "external".into());
    write_file(&out.join(RAW_FILE), &bytes)?;
    let meta = TraceMeta {
        program,
        tracer: "external".into(),
        run_nonce: None,
        case_count,
        symbols: Vec::new(),
        notes: Vec::new(),
    };
    write_json(&out.join(META_FILE), &meta)?;
    Ok(meta)
}

pub fn pp_path(out: &Path, id: u32) -> PathBuf {
    out.join(PP_DIR).join(format!("{id:06}.pptrace"))
}

pub fn preprocess_stage(out: &Path) -> Result<PreprocessSummary> {
    let records = read_raw_trace(&read_file(&out.join(RAW_FILE))?)?;
    let result = preprocess(&records)?;
    let pp_dir = out.join(PP_DIR);
    if pp_dir.exists() {
        fs::remove_dir_all(&pp_dir).map_err(|e| Error::io(&pp_dir, e))?;
    }
    fs::create_dir_all(&pp_dir).map_err(|e| Error::io(&pp_dir, e))?;
    result.traces.par_iter().try_for_each(|(id, t)| write_file(&pp_path(out, *id), &encode_preprocessed_trace(t)?))?;
    let summary = PreprocessSummary {
        case_ids: result.traces.iter().map(|(id, _)| *id).collect(),
        images: result.traces.first().map(|(_, t)| t.images.clone()).unwrap_or_default(),
        prefix_entries: result.prefix_entries,
        interstitial_records: result.interstitial_records,
        stack_anchor: "highest stack pointer seen so far; offsets measured downward".into(),
        stack_window: STACK_WINDOW,
        unknown_accesses: result.stats.iter().map(|s| s.unknown_accesses).sum(),
        segments: result.stats,
    };
    write_json(&pp_dir.join(PP_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Loads persisted preprocessed traces in test case id order.
pub fn load_preprocessed(out: &Path) -> Result<(PreprocessSummary, Vec<PreprocessedTrace>)> {
    let summary: PreprocessSummary = read_json(&out.join(PP_DIR).join(PP_SUMMARY_FILE))?;
    let traces = summary
        .case_ids
        .par_iter()
        .map(|&id| Ok(read_preprocessed_trace(&read_file(&pp_path(out, id))?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((summary, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WholeTraceFile {
    pub granularity: Granularity,
    pub case_count: usize,
    pub checkpoint: usize,
    pub result: MiResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionEntry {
    pub image_id: u16,
    pub offset: u64,
    pub leak_class: LeakClass,
    pub result: MiResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionFile {
    pub granularity: Granularity,
    pub case_count: usize,
    pub instructions: Vec<InstructionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub a: u32,
    pub b: u32,
    pub divergence: Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareFile {
    pub granularity: Granularity,
    pub pairs: Vec<PairDivergence>,
}

fn entries(t: &PreprocessedTrace) -> &[Entry] {
    &t.entries
}

pub fn analyze_stage(out: &Path, opts: &AnalyzeOptions) -> Result<()> {
    let (summary, traces) = load_preprocessed(out)?;
    let n = traces.len();
    if opts.analyses.needs_mi() && n < 2 {
        return Err(Error::Config(format!("MI analysis needs at least 2 test cases, got {n}")));
    }
    let seqs: Vec<&[Entry]> = traces.iter().map(entries).collect();
    let g = opts.granularity;
    let dir = out.join(ANALYSIS_DIR);

    if opts.analyses.whole_trace {
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let k = opts.checkpoint.unwrap_or_else(|| default_checkpoint(max_len));
        let w = whole_trace_mi(&seqs, g, k)?;
        let mut csv = csv::Writer::from_writer(Vec::new());
        csv.write_record(["index", "mi_bits", "class_count"]).expect("in-memory write");
        for p in &w.curve {
            csv.write_record([p.index.to_string(), p.mi_bits.to_string(), p.class_count.to_string()])
                .expect("in-memory write");
        }
        write_file(&dir.join(MI_CURVE_FILE), &csv.into_inner().expect("in-memory flush"))?;
        let file = WholeTraceFile { granularity: g, case_count: n, checkpoint: w.checkpoint, result: w.result };
        write_json(&dir.join(MI_TRACE_FILE), &file)?;
    }

    if opts.analyses.instruction {
        let results = instruction_mi(&seqs, g)?;
        let instructions = results
            .into_iter()
            .map(|(k, result)| InstructionEntry {
                image_id: k.instr.image_id,
                offset: k.instr.offset,
                leak_class: k.class,
                result,
            })
            .collect();
        write_json(&dir.join(MI_INSTR_FILE), &InstructionFile { granularity: g, case_count: n, instructions })?;
    }

    if opts.analyses.compare {
        let index: BTreeMap<u32, usize> = summary.case_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pairs = if opts.pairs.is_empty() {
            summary.case_ids.get(..2).map(|p| vec![(p[0], p[1])]).unwrap_or_default()
        } else {
            opts.pairs.clone()
        };
        let mut out_pairs = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let (ia, ib) = match (index.get(&a), index.get(&b)) {
                (Some(ia), Some(ib)) => (*ia, *ib),
                _ => return Err(Error::Config(format!("pair {a}:{b} names an unknown test case"))),
            };
            let ra = crate::analysis::apply_granularity(seqs[ia], g);
            let rb = crate::analysis::apply_granularity(seqs[ib], g);
            out_pairs.push(PairDivergence { a, b, divergence: compare_traces(&ra, &rb) });
        }
        write_json(&dir.join(COMPARE_FILE), &CompareFile { granularity: g, pairs: out_pairs })?;
    }
    Ok(())
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Builds the report from persisted stage outputs and writes all report files.
pub fn report_stage(out: &Path, opts: &ReportOptions) -> Result<Report> {
    let meta: TraceMeta = read_json(&out.join(META_FILE))?;
    let summary: PreprocessSummary = read_json(&out.join(PP_DIR).join(PP_SUMMARY_FILE))?;
    let dir = out.join(ANALYSIS_DIR);
    let whole: Option<WholeTraceFile> = read_optional(&dir.join(MI_TRACE_FILE))?;
    let instr: Option<InstructionFile> = read_optional(&dir.join(MI_INSTR_FILE))?;
    let compare: Option<CompareFile> = read_optional(&dir.join(COMPARE_FILE))?;

    let mut symbols = SymbolMap::new();
    for (&id, path) in &opts.maps {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (syms, bad) = parse_map(&text)?;
        for b in bad {
            log::warn!("{}: line {} skipped", path.display(), b.line);
        }
        symbols.insert_image(id, syms)?;
    }
    if !symbols.has_image(IMAGE_ID) && !meta.symbols.is_empty() {
        symbols.insert_image(IMAGE_ID, meta.symbols.clone())?;
    }

    let granularities: Vec<Granularity> = [
        whole.as_ref().map(|w| w.granularity),
        instr.as_ref().map(|i| i.granularity),
        compare.as_ref().map(|c| c.granularity),
    ]
    .into_iter()
    .flatten()
    .collect();
    let granularity = granularities.first().copied().unwrap_or(Granularity::BYTE);
    let mut notes = meta.notes.clone();
    if granularities.iter().any(|g| *g != granularity) {
        notes.push("analysis files were produced at different granularities".into());
    }

    let instructions: Vec<InstructionRow> = instr
        .as_ref()
        .map(|f| {
            f.instructions
                .iter()
                .map(|e| InstructionRow::new(AbsCodeRef::new(e.image_id, e.offset), e.leak_class, &e.result, &symbols))
                .collect()
        })
        .unwrap_or_default();
    let mut maxima: BTreeMap<u16, f64> = BTreeMap::new();
    for r in &instructions {
        let m = maxima.entry(r.image_id).or_insert(0.0);
        *m = m.max(r.mi_bits);
    }
    let per_image_max = maxima
        .into_iter()
        .map(|(image_id, max_mi_bits)| ImageMax {
            image_id,
            name: summary.images.iter().find(|i| i.id == image_id).map(|i| i.name.clone()).unwrap_or_default(),
            max_mi_bits,
        })
        .collect();
    let divergences: Vec<PairSummary> = compare
        .as_ref()
        .map(|c| {
            c.pairs
                .iter()
                .map(|p| PairSummary {
                    a: p.a,
                    b: p.b,
                    first_diff_index: p.divergence.first_diff_index,
                    hunk_count: p.divergence.hunks.len(),
                })
                .collect()
        })
        .unwrap_or_default();
    if summary.unknown_accesses > 0 {
        notes.push(format!(
            "{} memory accesses fell outside every known region and are kept with absolute addresses",
            summary.unknown_accesses
        ));
    }

    let case_count = summary.case_ids.len();
    let report = Report {
        program: meta.program.clone(),
        case_count,
        granularity: granularity.bytes(),
        checkpoint: whole.as_ref().map(|w| w.checkpoint),
        whole_trace: whole.map(|w| w.result),
        flagged_count: instructions.iter().filter(|r| r.flagged).count(),
        instructions,
        per_image_max,
        divergences,
        metadata: ReportMetadata {
            hash: "fnv1a-64".into(),
            collision_probability: collision_probability(case_count),
            stack_anchor: summary.stack_anchor.clone(),
            stack_window: summary.stack_window,
            unknown_region_accesses: summary.unknown_accesses,
            prefix_entries: summary.prefix_entries,
        },
        notes,
    };
    let diffs: Vec<(u32, u32, Divergence)> = compare
        .map(|c| c.pairs.into_iter().map(|p| (p.a, p.b, p.divergence)).collect())
        .unwrap_or_default();
    emit_reports(&report, &diffs, out, opts.threshold)?;
    Ok(report)
}

fn case_count_hint(cfg: &PipelineConfig) -> Option<usize> {
    match (&cfg.input, &cfg.gen.source) {
        (TraceInput::Raw(_), _) => None,
        (_, CaseSource::Random { n, .. }) | (_, CaseSource::Template { n, .. }) => Some(*n),
        (_, CaseSource::Directory(_)) => None,
    }
}

/// Runs every stage in order. Stage errors carry the stage name; outputs of
/// completed stages are left in place.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Report> {
    if cfg.analyze.analyses.needs_mi() {
        if let Some(n) = case_count_hint(cfg).filter(|&n| n < 2) {
            return Err(Error::Config(format!("MI analysis needs at least 2 test cases, got n={n}")));
        }
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    match &cfg.input {
        TraceInput::Program(spec) => {
            gen_stage(&cfg.gen, &cfg.out).map_err(|e| e.in_stage("gen"))?;
            trace_stage(spec, &cfg.out, cfg.run_nonce).map_err(|e| e.in_stage("trace"))?;
        }
        TraceInput::Raw(path) => {
            ingest_stage(path, &cfg.out).map_err(|e| e.in_stage("ingest"))?;
        }
    }
    preprocess_stage(&cfg.out).map_err(|e| e.in_stage("preprocess"))?;
    analyze_stage(&cfg.out, &cfg.analyze).map_err(|e| e.in_stage("analyze"))?;
    report_stage(&cfg.out, &cfg.report).map_err(|e| e.in_stage("report"))
}
