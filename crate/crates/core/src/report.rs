//! Symbolization and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{Divergence, LeakClass, MiResult};
use crate::trace::AbsCodeRef;
use crate::Error as CrateError;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SymbolError {
    #[error("map line {line}: offset {offset:#x} does not increase over the previous symbol")]
    NotIncreasing { line: usize, offset: u64 },
    #[error("bad --map argument {0:?}, expected IMAGE_ID=PATH")]
    BadSpec(String),
}

/// A map line that could not be parsed and was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    pub line: usize,
    pub text: String,
}

/// Per-image symbol tables, sorted by offset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolMap {
    images: BTreeMap<u16, Vec<(u64, String)>>,
}

pub type ParsedMap = (Vec<(u64, String)>, Vec<MalformedLine>);

/// Parses `HEXOFFSET NAME` lines. Blank lines and `#` comments are ignored.
pub fn parse_map(text: &str) -> Result<ParsedMap, SymbolError> {
    let mut symbols: Vec<(u64, String)> = Vec::new();
    let mut bad = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(off), Some(name), None) => {
                let digits = off.strip_prefix("0x").or_else(|| off.strip_prefix("0X")).unwrap_or(off);
                u64::from_str_radix(digits, 16).ok().map(|o| (o, name.to_string()))
            }
            _ => None,
        };
        let Some((offset, name)) = parsed else {
            log::warn!("map line {line}: cannot parse {trimmed:?}, skipped");
            bad.push(MalformedLine { line, text: raw.to_string() });
            continue;
        };
        if symbols.last().is_some_and(|(prev, _)| *prev >= offset) {
            return Err(SymbolError::NotIncreasing { line, offset });
        }
        symbols.push((offset, name));
    }
    Ok((symbols, bad))
}

impl SymbolMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the table of one image. Offsets must be strictly increasing.
    pub fn insert_image(&mut self, image_id: u16, symbols: Vec<(u64, String)>) -> Result<(), SymbolError> {
        for w in symbols.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(SymbolError::NotIncreasing { line: 0, offset: w[1].0 });
            }
        }
        self.images.insert(image_id, symbols);
        Ok(())
    }

    pub fn has_image(&self, image_id: u16) -> bool {
        self.images.contains_key(&image_id)
    }

    /// Nearest preceding symbol and the distance to it.
    pub fn lookup(&self, r: AbsCodeRef) -> Option<(&str, u64)> {
        let table = self.images.get(&r.image_id)?;
        let idx = table.partition_point(|(o, _)| *o <= r.offset);
        let (o, name) = table.get(idx.checked_sub(1)?)?;
        Some((name.as_str(), r.offset - o))
    }

    /// `name+0xD`, `name`, or the hex offset when no symbol precedes `r`.
    pub fn symbolize(&self, r: AbsCodeRef) -> String {
        match self.lookup(r) {
            Some((name, 0)) => name.to_string(),
            Some((name, d)) => format!("{name}+{d:#x}"),
            None => format!("{:#x}", r.offset),
        }
    }
}

/// Parses `IMAGE_ID=PATH`.
pub fn parse_map_spec(spec: &str) -> Result<(u16, PathBuf), SymbolError> {
    let (id, path) = spec.split_once('=').ok_or_else(|| SymbolError::BadSpec(spec.to_string()))?;
    let id = id.trim().parse().map_err(|_| SymbolError::BadSpec(spec.to_string()))?;
    if path.is_empty() {
        return Err(SymbolError::BadSpec(spec.to_string()));
    }
    Ok((id, PathBuf::from(path)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRow {
    pub image_id: u16,
    pub offset: u64,
    pub symbol: String,
    pub leak_class: LeakClass,
    pub mi_bits: f64,
    pub max_bits: f64,
    pub min_entropy_bits: f64,
    pub class_count: usize,
    pub flagged: bool,
}

impl InstructionRow {
    pub fn new(instr: AbsCodeRef, class: LeakClass, r: &MiResult, symbols: &SymbolMap) -> Self {
        Self {
            image_id: instr.image_id,
            offset: instr.offset,
            symbol: symbols.symbolize(instr),
            leak_class: class,
            mi_bits: r.mi_bits,
            max_bits: r.max_bits,
            min_entropy_bits: r.min_entropy_bits,
            class_count: r.class_count,
            flagged: r.mi_bits > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub a: u32,
    pub b: u32,
    pub first_diff_index: Option<usize>,
    pub hunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMax {
    pub image_id: u16,
    pub name: String,
    pub max_mi_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub hash: String,
    /// Birthday bound on any two cases colliding in one state table.
    pub collision_probability: f64,
    pub stack_anchor: String,
    pub stack_window: u64,
    pub unknown_region_accesses: u64,
    pub prefix_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub program: String,
    pub case_count: usize,
    pub granularity: u64,
    pub checkpoint: Option<usize>,
    pub whole_trace: Option<MiResult>,
    pub flagged_count: usize,
    pub instructions: Vec<InstructionRow>,
    pub per_image_max: Vec<ImageMax>,
    pub divergences: Vec<PairSummary>,
    pub metadata: ReportMetadata,
    pub notes: Vec<String>,
}

pub fn collision_probability(cases: usize) -> f64 {
    let n = cases as f64;
    (n * (n - 1.0) / 2.0 / 2f64.powi(64)).min(1.0)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CrateError> {
    fs::write(path, contents).map_err(|e| CrateError::io(path, e))
}

pub fn render_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Text report; rows at or below `threshold` are omitted.
pub fn render_text(report: &Report, threshold: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "program: {}", report.program);
    let _ = writeln!(s, "test cases: {}", report.case_count);
    let _ = writeln!(s, "granularity: {} bytes", report.granularity);
    if let Some(w) = &report.whole_trace {
        let _ = writeln!(
            s,
            "whole-trace MI: {} bits (max {}, min-entropy {}, {} classes)",
            w.mi_bits, w.max_bits, w.min_entropy_bits, w.class_count
        );
    }
    let _ = writeln!(s, "flagged instructions: {}", report.flagged_count);
    if report.metadata.unknown_region_accesses > 0 {
        let _ = writeln!(
            s,
            "warning: {} accesses outside any known region",
            report.metadata.unknown_region_accesses
        );
    }

    let mut rows: Vec<&InstructionRow> =
        report.instructions.iter().filter(|r| r.flagged && r.mi_bits > threshold).collect();
    rows.sort_by(|a, b| {
        b.mi_bits
            .total_cmp(&a.mi_bits)
            .then((a.image_id, a.offset, a.leak_class).cmp(&(b.image_id, b.offset, b.leak_class)))
    });
    if !rows.is_empty() {
        let _ = writeln!(s, "\n{:>10}  {:>8}  {:>8}  {:<12}  location", "mi_bits", "max", "min_ent", "class");
        for r in rows {
            let _ = writeln!(
                s,
                "{:>10.4}  {:>8.4}  {:>8.4}  {:<12}  {}:{:#x} {}",
                r.mi_bits, r.max_bits, r.min_entropy_bits, r.leak_class.name(), r.image_id, r.offset, r.symbol
            );
        }
    }
    if !report.per_image_max.is_empty() {
        let _ = writeln!(s, "\nper-image maximum:");
        for m in &report.per_image_max {
            let _ = writeln!(s, "  {} ({}): {} bits", m.image_id, m.name, m.max_mi_bits);
        }
    }
    if !report.divergences.is_empty() {
        let _ = writeln!(s, "\ntrace comparison:");
        for d in &report.divergences {
            match d.first_diff_index {
                None => {
                    let _ = writeln!(s, "  {} vs {}: identical", d.a, d.b);
                }
                Some(i) => {
                    let _ = writeln!(s, "  {} vs {}: first difference at entry {}, {} hunks", d.a, d.b, i, d.hunk_count);
                }
            }
        }
    }
    for n in &report.notes {
        let _ = writeln!(s, "\nnote: {n}");
    }
    s
}

pub fn render_csv(report: &Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "offset", "symbol", "mi_bits", "max_bits", "min_entropy_bits", "leak_class"])
        .expect("in-memory write");
    for r in &report.instructions {
        w.write_record([
            r.image_id.to_string(),
            format!("{:#x}", r.offset),
            r.symbol.clone(),
            r.mi_bits.to_string(),
            r.max_bits.to_string(),
            r.min_entropy_bits.to_string(),
            r.leak_class.name().to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn render_diff(a: u32, b: u32, d: &Divergence) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "--- test case {a}");
    let _ = writeln!(s, "+++ test case {b}");
    match d.first_diff_index {
        None => {
            let _ = writeln!(s, "identical");
        }
        Some(i) => {
            let _ = writeln!(s, "first difference at entry {i}");
            for h in &d.hunks {
                let _ = writeln!(s, "@@ a[{}..{}] b[{}..{}] @@", h.a.start, h.a.end, h.b.start, h.b.end);
                for e in &h.a_excerpt {
                    let _ = writeln!(s, "- {e}");
                }
                if h.a.len() > h.a_excerpt.len() {
                    let _ = writeln!(s, "- ... {} more", h.a.len() - h.a_excerpt.len());
                }
                for e in &h.b_excerpt {
                    let _ = writeln!(s, "+ {e}");
                }
                if h.b.len() > h.b_excerpt.len() {
                    let _ = writeln!(s, "+ ... {} more", h.b.len() - h.b_excerpt.len());
                }
            }
        }
    }
    s
}

/// Writes report.json, report.txt, annotations.csv and one diff file per pair.
pub fn emit_reports(
    report: &Report,
    diffs: &[(u32, u32, Divergence)],
    out_dir: &Path,
    threshold: f64,
) -> Result<(), CrateError> {
    fs::create_dir_all(out_dir).map_err(|e| CrateError::io(out_dir, e))?;
    write_file(&out_dir.join("report.json"), render_json(report).as_bytes())?;
    write_file(&out_dir.join("report.txt"), render_text(report, threshold).as_bytes())?;
    write_file(&out_dir.join("annotations.csv"), render_csv(report).as_bytes())?;
    for (a, b, d) in diffs {
        write_file(&out_dir.join(format!("diff_{a}_{b}.txt")), render_diff(*a, *b, d).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mi_from_counts;

    fn map(entries: &[(u64, &str)]) -> SymbolMap {
        let mut m = SymbolMap::new();
        m.insert_image(0, entries.iter().map(|(o, n)| (*o, n.to_string())).collect()).unwrap();
        m
    }

    #[test]
    fn symbolize_nearest_preceding() {
        let m = map(&[(0x100, "modinv")]);
        assert_eq!(m.symbolize(AbsCodeRef::new(0, 0x108)), "modinv+0x8");
        assert_eq!(m.symbolize(AbsCodeRef::new(0, 0x100)), "modinv");
        assert_eq!(m.symbolize(AbsCodeRef::new(0, 0x80)), "0x80");
        assert_eq!(m.symbolize(AbsCodeRef::new(3, 0x108)), "0x108");
    }

    #[test]
    fn parse_rejects_duplicates() {
        let e = parse_map("100 a\n100 b\n").unwrap_err();
        assert_eq!(e, SymbolError::NotIncreasing { line: 2, offset: 0x100 });
        assert!(parse_map("200 a\n100 b\n").is_err());
    }

    #[test]
    fn parse_skips_malformed() {
        let (syms, bad) = parse_map("# header\n0x10 start\nzz nope\n\n20 mid\n30\n").unwrap();
        assert_eq!(syms, vec![(0x10, "start".to_string()), (0x20, "mid".to_string())]);
        assert_eq!(bad.iter().map(|b| b.line).collect::<Vec<_>>(), vec![3, 6]);
    }

    #[test]
    fn map_spec() {
        assert_eq!(parse_map_spec("1=a.map").unwrap(), (1, PathBuf::from("a.map")));
        assert!(parse_map_spec("x=a.map").is_err());
        assert!(parse_map_spec("1").is_err());
    }

    fn sample(flagged: bool) -> Report {
        let counts: &[usize] = if flagged { &[1, 1] } else { &[2] };
        let r = mi_from_counts(counts).unwrap();
        Report {
            program: "p".into(),
            case_count: 2,
            granularity: 1,
            checkpoint: Some(1),
            whole_trace: Some(r.clone()),
            flagged_count: usize::from(flagged),
            instructions: vec![InstructionRow::new(AbsCodeRef::new(0, 4), LeakClass::Memory, &r, &map(&[(0, "main")]))],
            per_image_max: vec![],
            divergences: vec![],
            metadata: ReportMetadata {
                hash: "fnv1a64".into(),
                collision_probability: collision_probability(2),
                stack_anchor: "high-water mark".into(),
                stack_window: 1 << 20,
                unknown_region_accesses: 0,
                prefix_entries: 0,
            },
            notes: vec![],
        }
    }

    #[test]
    fn zero_leakage_text() {
        let t = render_text(&sample(false), 0.0);
        assert!(t.contains("flagged instructions: 0"));
    }

    #[test]
    fn threshold_filters_text_only() {
        let r = sample(true);
        assert!(render_text(&r, 0.0).contains("main+0x4"));
        assert!(!render_text(&r, 2.0).contains("main+0x4"));
        assert!(render_json(&r).contains("main+0x4"));
    }

    #[test]
    fn csv_columns() {
        let csv = render_csv(&sample(true));
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "image_id,offset,symbol,mi_bits,max_bits,min_entropy_bits,leak_class");
        assert_eq!(lines.next().unwrap(), "0,0x4,main+0x4,1,1,1,memory");
    }

    #[test]
    fn json_round_trips() {
        let r = sample(true);
        let back: Report = serde_json::from_str(&render_json(&r)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn collision_bound() {
        assert_eq!(collision_probability(1), 0.0);
        assert!(collision_probability(1 << 20) < 1e-7);
    }
}
