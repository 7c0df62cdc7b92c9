//! Secret input generation: random, template-based and directory sources.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Random,
    Template,
    Directory,
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("cannot draw {n} distinct cases from a space of {space}")]
    InfeasibleUniqueness { n: usize, space: String },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("directory {0} contains no regular files")]
    EmptyDirectory(PathBuf),
    #[error("duplicate test case contents in {first} and {second}")]
    Duplicate { first: String, second: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Unique secret inputs, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestcaseSet {
    #[serde(with = "hex_cases")]
    pub cases: Vec<Vec<u8>>,
    pub seed: u64,
    pub source: Source,
}

mod hex_cases {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(cases: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(cases.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        let strings = Vec::<String>::deserialize(d)?;
        strings
            .iter()
            .map(|s| hex::decode(s).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl TestcaseSet {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

/// True when `n` distinct values fit in a space of `256^free_bytes`.
fn feasible(n: usize, free_bytes: usize) -> bool {
    free_bytes >= 8 || (n as u128) <= 1u128 << (8 * free_bytes)
}

pub fn gen_random(n: usize, len: usize, seed: u64) -> Result<TestcaseSet, GenError> {
    if n == 0 || len == 0 {
        return Err(GenError::Invalid(format!("need n >= 1 and len >= 1, got n={n} len={len}")));
    }
    if !feasible(n, len) {
        return Err(GenError::InfeasibleUniqueness { n, space: format!("256^{len}") });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut cases = Vec::with_capacity(n);
    while cases.len() < n {
        let mut case = vec![0u8; len];
        rng.fill_bytes(&mut case);
        if seen.insert(case.clone()) {
            cases.push(case);
        }
    }
    Ok(TestcaseSet { cases, seed, source: Source::Random })
}

/// A byte pattern where `None` marks a wildcard byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template(pub Vec<Option<u8>>);

impl Template {
    /// Parses hex text with `??` wildcard bytes, e.g. `"4142????"`.
    pub fn parse(text: &str) -> Result<Self, GenError> {
        let compact: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        if !compact.len().is_multiple_of(2) {
            return Err(GenError::BadTemplate(format!("odd number of hex digits in {text:?}")));
        }
        let bytes = compact
            .chunks(2)
            .map(|pair| match pair {
                ['?', '?'] => Ok(None),
                [a, b] => {
                    let s: String = [*a, *b].iter().collect();
                    u8::from_str_radix(&s, 16)
                        .map(Some)
                        .map_err(|_| GenError::BadTemplate(format!("bad byte {s:?}")))
                }
                _ => unreachable!(),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Template(bytes))
    }

    pub fn wildcards(&self) -> usize {
        self.0.iter().filter(|b| b.is_none()).count()
    }
}

pub fn gen_template(template: &Template, n: usize, seed: u64) -> Result<TestcaseSet, GenError> {
    let free = template.wildcards();
    if free == 0 {
        return Err(GenError::BadTemplate("template has no wildcard bytes".into()));
    }
    if n == 0 {
        return Err(GenError::Invalid("need n >= 1".into()));
    }
    if !feasible(n, free) {
        return Err(GenError::InfeasibleUniqueness { n, space: format!("256^{free} wildcard values") });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut cases = Vec::with_capacity(n);
    while cases.len() < n {
        let mut wild = vec![0u8; free];
        rng.fill_bytes(&mut wild);
        if !seen.insert(wild.clone()) {
            continue;
        }
        let mut fill = wild.into_iter();
        cases.push(template.0.iter().map(|b| b.unwrap_or_else(|| fill.next().unwrap())).collect());
    }
    Ok(TestcaseSet { cases, seed, source: Source::Template })
}

/// Loads every regular file in `dir`, ordered by file name.
pub fn load_dir(dir: &Path) -> Result<TestcaseSet, GenError> {
    let io = |source| GenError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        if entry.file_type().map_err(io)?.is_file() {
            files.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    if files.is_empty() {
        return Err(GenError::EmptyDirectory(dir.to_path_buf()));
    }
    files.sort();
    let mut by_content: HashMap<Vec<u8>, String> = HashMap::new();
    let mut cases = Vec::with_capacity(files.len());
    for (name, path) in files {
        let bytes = fs::read(&path).map_err(|source| GenError::Io { path: path.clone(), source })?;
        if let Some(first) = by_content.get(&bytes) {
            return Err(GenError::Duplicate { first: first.clone(), second: name });
        }
        by_content.insert(bytes.clone(), name);
        cases.push(bytes);
    }
    Ok(TestcaseSet { cases, seed: 0, source: Source::Directory })
}

/// Per-case RAND streams derived from `(seed, case index)`, so randomness
/// consumed by the target becomes part of each test case.
pub fn derive_rand_streams(seed: u64, count: usize, per_case: usize) -> Vec<Vec<u64>> {
    (0..count)
        .map(|i| {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&(i as u64).to_le_bytes());
            key[16..24].copy_from_slice(b"randstrm");
            let mut rng = ChaCha8Rng::from_seed(key);
            (0..per_case).map(|_| rng.next_u64()).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn random_small_space_is_unique() {
        let set = gen_random(4, 1, 7).unwrap();
        assert_eq!(set.len(), 4);
        let distinct: HashSet<_> = set.cases.iter().collect();
        assert_eq!(distinct.len(), 4);
        assert!(set.cases.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn random_exhaustive_byte_space() {
        let set = gen_random(256, 1, 3).unwrap();
        let distinct: HashSet<_> = set.cases.iter().collect();
        assert_eq!(distinct.len(), 256);
    }

    #[test]
    fn random_pigeonhole() {
        assert!(matches!(gen_random(257, 1, 0), Err(GenError::InfeasibleUniqueness { .. })));
        assert!(matches!(gen_random(65537, 2, 0), Err(GenError::InfeasibleUniqueness { .. })));
        assert!(gen_random(0, 4, 0).is_err());
    }

    #[test]
    fn random_is_deterministic() {
        assert_eq!(gen_random(128, 16, 11).unwrap(), gen_random(128, 16, 11).unwrap());
        assert_ne!(gen_random(128, 16, 11).unwrap(), gen_random(128, 16, 12).unwrap());
    }

    #[test]
    fn template_keeps_fixed_bytes() {
        let t = Template::parse("4142????").unwrap();
        assert_eq!(t.wildcards(), 2);
        let set = gen_template(&t, 3, 5).unwrap();
        assert_eq!(set.len(), 3);
        for c in &set.cases {
            assert_eq!(&c[..2], b"AB");
            assert_eq!(c.len(), 4);
        }
        let distinct: HashSet<_> = set.cases.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn template_errors() {
        let fixed = Template::parse("4142").unwrap();
        assert!(matches!(gen_template(&fixed, 1, 0), Err(GenError::BadTemplate(_))));
        let one = Template::parse("00??").unwrap();
        assert!(matches!(gen_template(&one, 300, 0), Err(GenError::InfeasibleUniqueness { .. })));
        assert!(Template::parse("4").is_err());
        assert!(Template::parse("zz").is_err());
    }

    #[test]
    fn directory_loads_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b"), [0x02]).unwrap();
        fs::write(dir.path().join("a"), [0x01]).unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        let set = load_dir(dir.path()).unwrap();
        assert_eq!(set.cases, vec![vec![0x01], vec![0x02]]);
        assert_eq!(set.source, Source::Directory);
    }

    #[test]
    fn directory_duplicates_name_both_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), [0x01]).unwrap();
        fs::write(dir.path().join("b"), [0x01]).unwrap();
        match load_dir(dir.path()).unwrap_err() {
            GenError::Duplicate { first, second } => {
                assert_eq!(first, "a");
                assert_eq!(second, "b");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn empty_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dir(dir.path()), Err(GenError::EmptyDirectory(_))));
    }

    #[test]
    fn rand_streams_are_per_case() {
        let s = derive_rand_streams(9, 3, 4);
        assert_eq!(s, derive_rand_streams(9, 3, 4));
        assert_ne!(s[0], s[1]);
        assert_eq!(s[2].len(), 4);
    }

    #[test]
    fn set_serializes_as_hex() {
        let set = TestcaseSet { cases: vec![vec![0xab, 0x01]], seed: 1, source: Source::Random };
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.contains("\"ab01\""));
        assert_eq!(serde_json::from_str::<TestcaseSet>(&json).unwrap(), set);
    }

    proptest! {
        #[test]
        fn uniqueness_always_holds(n in 1usize..200, len in 1usize..4, seed in any::<u64>()) {
            let set = gen_random(n, len, seed).unwrap();
            let distinct: HashSet<_> = set.cases.iter().collect();
            prop_assert_eq!(distinct.len(), n);
        }
    }
}
