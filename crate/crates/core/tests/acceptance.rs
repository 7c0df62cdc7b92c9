//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints one PASS or FAIL line; the process exits non-zero on any failure.

// `!(x <= tol)` is deliberate: NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use leaktrace::analysis::{
    compare_traces, instruction_mi, mi_from_counts, whole_trace_mi, InstructionKey, LeakClass, MiResult,
};
use leaktrace::pipeline::{
    run_pipeline, trace_cases, AnalyzeOptions, CaseFile, CaseSource, GenConfig, PipelineConfig, RandPolicy,
    ReportOptions, TraceInput,
};
use leaktrace::preprocess::preprocess;
use leaktrace::testcase::{derive_rand_streams, gen_random, Source, TestcaseSet};
use leaktrace::trace::{
    encode_preprocessed_trace, AbsCodeRef, Access, BranchKind, Entry, Granularity, PreprocessedTrace, Region,
    RegionRef,
};
use leaktrace::vm::{assemble, corpus, corpus_program, heap_base, stack_top, Overrides, Program};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

/// MI evaluated straight from the joint-distribution definition: every case
/// x contributes (1/|X|) log2(|X| / |{x' : y(x') = y(x)}|).
fn brute_mi<T: PartialEq>(observations: &[T]) -> f64 {
    let n = observations.len() as f64;
    observations
        .iter()
        .map(|y| {
            let same = observations.iter().filter(|z| *z == y).count() as f64;
            (1.0 / n) * (n / same).log2()
        })
        .sum()
}

fn words(ws: &[u64]) -> Vec<u8> {
    ws.iter().flat_map(|w| w.to_le_bytes()).collect()
}

fn case_file(inputs: Vec<Vec<u8>>, overrides: Vec<Overrides>) -> CaseFile {
    CaseFile { set: TestcaseSet { cases: inputs, seed: 0, source: Source::Directory }, overrides }
}

fn plain(inputs: Vec<Vec<u8>>) -> CaseFile {
    let n = inputs.len();
    case_file(inputs, vec![Overrides::default(); n])
}

fn run_traces(program: &Program, cases: &CaseFile, nonce: u64) -> Vec<PreprocessedTrace> {
    let raw = trace_cases(program, cases, nonce).expect("trace");
    preprocess(&raw).expect("preprocess").traces.into_iter().map(|(_, t)| t).collect()
}

fn seqs(traces: &[PreprocessedTrace]) -> Vec<&[Entry]> {
    traces.iter().map(|t| t.entries.as_slice()).collect()
}

fn key(offset: u64, class: LeakClass) -> InstructionKey {
    InstructionKey { instr: AbsCodeRef::new(0, offset), class }
}

fn lookup(results: &BTreeMap<InstructionKey, MiResult>, k: InstructionKey) -> Result<f64, String> {
    results.get(&k).map(|r| r.mi_bits).ok_or_else(|| format!("no result for {}", k.instr))
}

fn program(name: &str) -> Program {
    corpus_program(name).expect("corpus program").program
}

fn c1_formula() -> Outcome {
    let a = mi_from_counts(&[1; 128]).map_err(|e| e.to_string())?.mi_bits;
    let b = mi_from_counts(&[1; 256]).map_err(|e| e.to_string())?.mi_bits;
    ensure!((a - 7.0).abs() <= 1e-12, "128 singletons gave {a}");
    ensure!((b - 8.0).abs() <= 1e-12, "256 singletons gave {b}");
    Ok(format!("128 singletons -> {a}, 256 singletons -> {b}"))
}

fn c2_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0f64;
    for table in 0..50 {
        let n = rng.gen_range(2..=16);
        let alphabet = rng.gen_range(1..=4u64);
        let traces: Vec<Vec<Entry>> = (0..n)
            .map(|_| {
                let len = rng.gen_range(0..=4);
                (0..len)
                    .map(|_| {
                        let v = rng.gen_range(0..alphabet);
                        if rng.gen_bool(0.5) {
                            Entry::MemAccess {
                                access: Access::Read,
                                instr: AbsCodeRef::new(0, 1),
                                addr: RegionRef::new(Region::HeapBlock(0), v * 8),
                            }
                        } else {
                            Entry::Branch {
                                kind: BranchKind::CondTaken,
                                src: AbsCodeRef::new(0, 2),
                                dst: AbsCodeRef::new(0, v),
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        let got = whole_trace_mi(&traces, Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
        let want = brute_mi(&traces);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "table {table}: engine {got}, oracle {want}");
    }
    Ok(format!("50 tables, max deviation {worst:e}"))
}

fn c3_constant_time() -> Outcome {
    let set = gen_random(128, 24, 3).map_err(|e| e.to_string())?;
    let traces = run_traces(&program("ct_select"), &plain(set.cases), 0);
    let s = seqs(&traces);
    let whole = whole_trace_mi(&s, Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
    ensure!(whole == 0.0, "whole-trace MI {whole}");
    let instr = instruction_mi(&s, Granularity::BYTE).map_err(|e| e.to_string())?;
    let flagged = instr.values().filter(|r| r.mi_bits > 0.0).count();
    ensure!(flagged == 0, "{flagged} flagged instructions");
    let mut pairs = 0;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let d = compare_traces(s[i], s[j]);
            ensure!(d.is_identical() && d.hunks.is_empty(), "cases {i} and {j} differ");
            pairs += 1;
        }
    }
    Ok(format!("MI 0, 0 of {} instructions flagged, {pairs} pairs identical", instr.len()))
}

fn c4_square_multiply() -> Outcome {
    let exps: Vec<u64> = (0..8).collect();
    let traces = run_traces(&program("square_multiply"), &plain(exps.iter().map(|&e| words(&[e, 3])).collect()), 0);
    let s = seqs(&traces);
    // Oracle: the multiply guard sees the exponent bits MSB first.
    let guard_obs: Vec<Vec<u64>> = exps.iter().map(|e| (0..3).rev().map(|b| (e >> b) & 1).collect()).collect();
    let want = brute_mi(&guard_obs);
    ensure!(want == 3.0, "oracle gave {want}");
    let instr = instruction_mi(&s, Granularity::BYTE).map_err(|e| e.to_string())?;
    let guard = lookup(&instr, key(15, LeakClass::ControlFlow))?;
    let whole = whole_trace_mi(&s, Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
    ensure!(guard == 3.0, "guard MI {guard}");
    ensure!(whole == 3.0, "whole-trace MI {whole}");
    Ok(format!("guard {guard}, whole trace {whole}"))
}

fn c5_ttable() -> Outcome {
    let p = program("ttable_lookup");
    let balanced: Vec<Vec<u8>> = (0..16u8).flat_map(|line| (0..8u8).map(move |j| vec![line * 16 + j])).collect();
    let traces = run_traces(&p, &plain(balanced), 0);
    let coarse = instruction_mi(&seqs(&traces), Granularity::new(64).unwrap()).map_err(|e| e.to_string())?;
    let at64 = lookup(&coarse, key(10, LeakClass::Memory))?;
    ensure!(at64 == 4.0, "g=64 gave {at64}");

    let random = gen_random(128, 1, 42).map_err(|e| e.to_string())?;
    let traces = run_traces(&p, &plain(random.cases), 0);
    let fine = instruction_mi(&seqs(&traces), Granularity::BYTE).map_err(|e| e.to_string())?;
    let at1 = lookup(&fine, key(10, LeakClass::Memory))?;
    ensure!(at1 >= 6.5, "g=1 gave {at1}");
    Ok(format!("g=64 balanced -> {at64}, g=1 random -> {at1}"))
}

fn c6_montgomery() -> Outcome {
    let exps: Vec<u64> = (0..16).collect();
    let traces = run_traces(&program("montgomery_bitmask"), &plain(exps.iter().map(|&e| words(&[e])).collect()), 0);
    let s = seqs(&traces);
    // Oracle: one loop iteration per bit plus one more per set bit.
    let pattern: Vec<u32> = exps.iter().map(|&e| (64 - e.leading_zeros()) + e.count_ones()).collect();
    let want = brute_mi(&pattern);
    let whole = whole_trace_mi(&s, Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
    ensure!((whole - want).abs() <= 1e-9, "engine {whole}, oracle {want}");
    let instr = instruction_mi(&s, Granularity::BYTE).map_err(|e| e.to_string())?;
    let guard = lookup(&instr, key(20, LeakClass::ControlFlow))?;
    ensure!(guard > 0.0, "loop guard not flagged");
    Ok(format!("whole trace {whole} vs oracle {want}, loop guard {guard}"))
}

fn c7_scalar_window() -> Outcome {
    const NBITS: u64 = 20;
    // Scalars with 0, 1 and 2 leading all-zero 5-bit windows out of 4.
    let scalars: Vec<u64> = [
        0x84321, 0xf0000, 0x10001, 0x7ffff, 0x40000, 0x9abcd, // 0 leading zero windows
        0x04321, 0x07c00, 0x00400, 0x0abcd, //                    1
        0x00321, 0x003e0, 0x00020, //                             2
    ]
    .to_vec();
    let lz = |s: u64| (0..4).rev().take_while(|w| (s >> (5 * w)) & 31 == 0).count();
    let counts: Vec<usize> = scalars.iter().map(|&s| lz(s)).collect();
    ensure!(
        [0, 1, 2].iter().all(|k| counts.contains(k)) && counts.iter().all(|&c| c <= 2),
        "crafted set does not span 0..=2: {counts:?}"
    );
    let want = brute_mi(&counts);
    let traces =
        run_traces(&program("scalar_window"), &plain(scalars.iter().map(|&s| words(&[s, NBITS])).collect()), 0);
    let whole = whole_trace_mi(&seqs(&traces), Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
    ensure!((whole - want).abs() <= 1e-9, "engine {whole}, oracle {want}");
    Ok(format!("whole trace {whole} vs window-count entropy {want}"))
}

fn c8_masked_modinv() -> Outcome {
    let p = program("masked_modinv");
    let set = gen_random(128, 2, 8).map_err(|e| e.to_string())?;
    let n = set.len();
    let random_masks: Vec<Overrides> = derive_rand_streams(8, n, 4)
        .into_iter()
        .map(|rand_values| Overrides { rand_values, ..Default::default() })
        .collect();
    let fixed_mask = vec![Overrides { rand_values: vec![1], ..Default::default() }; n];

    let score = |ov: Vec<Overrides>| -> Result<(f64, f64), String> {
        let traces = run_traces(&p, &case_file(set.cases.clone(), ov), 0);
        let s = seqs(&traces);
        let whole = whole_trace_mi(&s, Granularity::BYTE, 1).map_err(|e| e.to_string())?.result.mi_bits;
        let instr = instruction_mi(&s, Granularity::BYTE).map_err(|e| e.to_string())?;
        Ok((whole, lookup(&instr, key(10, LeakClass::ControlFlow))?))
    };
    let (masked, masked_guard) = score(random_masks)?;
    let (fixed, fixed_guard) = score(fixed_mask)?;
    ensure!(masked > 0.0, "random-mask run not flagged");
    ensure!(fixed >= masked, "fixed mask MI {fixed} below random mask MI {masked}");
    ensure!(fixed_guard > 0.0, "loop guard not flagged with fixed mask");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let report = run_pipeline(&PipelineConfig {
        input: TraceInput::Program("corpus:masked_modinv".into()),
        gen: GenConfig {
            source: CaseSource::Random { n: 16, len: 2 },
            seed: 8,
            rand: RandPolicy::Derive,
            features: BTreeMap::new(),
        },
        run_nonce: 0,
        analyze: AnalyzeOptions::default(),
        report: ReportOptions::default(),
        out: dir.path().to_path_buf(),
    })
    .map_err(|e| e.to_string())?;
    ensure!(report.notes.iter().any(|n| n.contains("k*m")), "report does not carry the k*m note");
    Ok(format!(
        "random mask {masked} (guard {masked_guard}), fixed mask {fixed} (guard {fixed_guard}), note in report"
    ))
}

fn c9_layout() -> Outcome {
    let (n1, n2) = (1, 2);
    ensure!(stack_top(n1) != stack_top(n2) && heap_base(n1) != heap_base(n2), "nonces give the same layout");
    let set = gen_random(16, 24, 9).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (name, c) in corpus() {
        let n = set.len();
        let ov: Vec<Overrides> = derive_rand_streams(9, n, 8)
            .into_iter()
            .map(|rand_values| Overrides { rand_values, ..Default::default() })
            .collect();
        let cases = case_file(set.cases.clone(), ov);
        let a = run_traces(&c.program, &cases, n1);
        let b = run_traces(&c.program, &cases, n2);
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            let bx = encode_preprocessed_trace(x).map_err(|e| e.to_string())?;
            let by = encode_preprocessed_trace(y).map_err(|e| e.to_string())?;
            ensure!(bx == by, "{name} case {i} differs across run nonces");
            compared += 1;
        }
    }
    Ok(format!("{compared} preprocessed traces byte-identical across run nonces"))
}

fn c10_monotonic() -> Outcome {
    let set = gen_random(64, 24, 10).map_err(|e| e.to_string())?;
    let g = |b| Granularity::new(b).unwrap();
    let mut checked = 0;
    for (name, c) in corpus() {
        let mut inputs = set.cases.clone();
        if name == "ttable_lookup" {
            inputs = (0..=255u8).step_by(4).map(|b| vec![b]).collect();
        }
        let n = inputs.len();
        let ov: Vec<Overrides> = derive_rand_streams(10, n, 8)
            .into_iter()
            .map(|rand_values| Overrides { rand_values, ..Default::default() })
            .collect();
        let traces = run_traces(&c.program, &case_file(inputs, ov), 0);
        let s = seqs(&traces);
        let r1 = instruction_mi(&s, g(1)).map_err(|e| e.to_string())?;
        let r4 = instruction_mi(&s, g(4)).map_err(|e| e.to_string())?;
        let r64 = instruction_mi(&s, g(64)).map_err(|e| e.to_string())?;
        for (k, v) in &r1 {
            let (m4, m64) = (r4[k].mi_bits, r64[k].mi_bits);
            ensure!(m64 <= m4 && m4 <= v.mi_bits, "{name} {}: {m64} / {m4} / {}", k.instr, v.mi_bits);
            checked += 1;
        }
    }
    Ok(format!("{checked} instructions across the corpus"))
}

/// Data-dependent loads and branches over a heap buffer.
const STRESS: &str = "
        .name stress
        IN    r1, 0
        LOADI r2, 4096
        ALLOC r3, r2
        LOADI r4, 0
        LOADI r5, 16000
        LOADI r6, 1
        LOADI r7, 4088
        LOADI r12, 8
loop:   MUL   r8, r1, r4
        ADD   r8, r8, r1
        AND   r8, r8, r7
        ADD   r9, r3, r8
        LOAD  r10, [r9+0]
        AND   r11, r8, r12
        BEQ   r11, r12, odd
        STORE [r9+0], r8
odd:    ADD   r4, r4, r6
        BLT   r4, r5, loop
        FREE  r3
        HALT
";

fn c11_throughput() -> Outcome {
    let p = assemble(STRESS).map_err(|e| e.to_string())?;
    let set = gen_random(128, 8, 11).map_err(|e| e.to_string())?;
    let raw = trace_cases(&p, &plain(set.cases), 0).map_err(|e| e.to_string())?;

    let start = Instant::now();
    let pp = preprocess(&raw).map_err(|e| e.to_string())?;
    let traces: Vec<&[Entry]> = pp.traces.iter().map(|(_, t)| t.entries.as_slice()).collect();
    let results = instruction_mi(&traces, Granularity::BYTE).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let min_len = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    let total: usize = traces.iter().map(|t| t.len()).sum();
    ensure!(traces.len() == 128, "{} traces", traces.len());
    ensure!(min_len >= 50_000, "shortest trace has {min_len} entries");
    ensure!(!results.is_empty(), "no instruction results");
    ensure!(elapsed.as_secs_f64() < 60.0, "took {elapsed:?}");
    Ok(format!("{total} entries (min {min_len}/case) in {:.2}s", elapsed.as_secs_f64()))
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = |sub: &str| PipelineConfig {
        input: TraceInput::Program("corpus:scalar_window".into()),
        gen: GenConfig {
            source: CaseSource::Random { n: 32, len: 16 },
            seed: 12,
            rand: RandPolicy::Derive,
            features: BTreeMap::new(),
        },
        run_nonce: 5,
        analyze: AnalyzeOptions { pairs: vec![(0, 1), (2, 3)], ..Default::default() },
        report: ReportOptions::default(),
        out: dir.path().join(sub),
    };
    run_pipeline(&cfg("a")).map_err(|e| e.to_string())?;
    run_pipeline(&cfg("b")).map_err(|e| e.to_string())?;
    let a = std::fs::read(dir.path().join("a/report.json")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.path().join("b/report.json")).map_err(|e| e.to_string())?;
    ensure!(a == b, "report.json differs between runs");
    Ok(format!("report.json identical ({} bytes)", a.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("MI formula fidelity", c1_formula),
        ("oracle equivalence on random state tables", c2_oracle),
        ("constant-time control (ct_select)", c3_constant_time),
        ("square-and-multiply oracle", c4_square_multiply),
        ("T-table oracle", c5_ttable),
        ("bit-masked Montgomery Hamming-weight leakage", c6_montgomery),
        ("leading-zero-window leakage", c7_scalar_window),
        ("masked modular inversion", c8_masked_modinv),
        ("layout independence", c9_layout),
        ("granularity monotonicity", c10_monotonic),
        ("throughput", c11_throughput),
        ("determinism", c12_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
