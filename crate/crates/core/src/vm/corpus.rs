//! Built-in programs with known leakage structure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::isa::{assemble, Program};

const SOURCES: &[(&str, &str)] = &[
    ("square_multiply.mw", include_str!("../../corpus/square_multiply.mw")),
    ("montgomery_bitmask.mw", include_str!("../../corpus/montgomery_bitmask.mw")),
    ("scalar_window.mw", include_str!("../../corpus/scalar_window.mw")),
    ("masked_modinv.mw", include_str!("../../corpus/masked_modinv.mw")),
    ("ttable_lookup.mw", include_str!("../../corpus/ttable_lookup.mw")),
    ("ct_select.mw", include_str!("../../corpus/ct_select.mw")),
];

const MANIFEST: &str = include_str!("../../corpus/manifest.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakSite {
    pub index: usize,
    /// `control_flow` or `memory`.
    pub class: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub leak_class: String,
    pub input: String,
    pub leaking: Vec<LeakSite>,
    pub notes: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    programs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct CorpusProgram {
    pub program: Program,
    pub source: &'static str,
    pub manifest: ManifestEntry,
}

/// All corpus programs keyed by name. The embedded sources are assembled on
/// every call.
pub fn corpus() -> BTreeMap<String, CorpusProgram> {
    let manifest: Manifest = serde_json::from_str(MANIFEST).expect("embedded manifest is valid");
    manifest
        .programs
        .into_iter()
        .map(|entry| {
            let source = SOURCES
                .iter()
                .find(|(f, _)| *f == entry.file)
                .map(|(_, s)| *s)
                .expect("manifest names an embedded file");
            let program = assemble(source)
                .unwrap_or_else(|e| panic!("corpus program {} does not assemble: {e}", entry.file));
            (entry.name.clone(), CorpusProgram { program, source, manifest: entry })
        })
        .collect()
}

pub fn corpus_program(name: &str) -> Option<CorpusProgram> {
    corpus().remove(name)
}
