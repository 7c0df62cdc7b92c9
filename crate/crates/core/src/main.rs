use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use leaktrace::pipeline::{
    analyze_stage, gen_stage, ingest_stage, preprocess_stage, report_stage, run_pipeline, Analyses,
    AnalyzeOptions, CaseSource, GenConfig, PipelineConfig, RandPolicy, ReportOptions, TraceInput,
};
use leaktrace::report::parse_map_spec;
use leaktrace::trace::Granularity;
use leaktrace::Error;

#[derive(Parser)]
#[command(name = "leaktrace", version, about = "Detect and quantify secret-dependent behavior in execution traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate test cases into OUT/testcases.json
    Gen(GenArgs),
    /// Run a MiniVM program on the generated test cases
    Trace(TraceArgs),
    /// Import a raw trace written by an external tracer
    Ingest(IngestArgs),
    /// Split and relativize OUT/raw.trace
    Preprocess(OutArg),
    /// Run analyses on the preprocessed traces
    Analyze {
        #[command(subcommand)]
        which: AnalyzeCommand,
    },
    /// Write report.json, report.txt, annotations.csv and diffs
    Report(ReportArgs),
    /// Run every stage
    Pipeline(PipelineArgs),
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Entry-wise comparison of test case pairs
    Compare(AnalyzeArgs),
    /// Whole-trace mutual information
    MiTrace(AnalyzeArgs),
    /// Single-instruction mutual information
    MiInstr(AnalyzeArgs),
}

#[derive(Args)]
struct OutArg {
    /// Working directory for stage inputs and outputs
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    cases: CaseArgs,
}

#[derive(Args)]
struct CaseArgs {
    /// Number of test cases
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Length in bytes of random test cases
    #[arg(long, default_value_t = 16)]
    len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hex template with ?? wildcard bytes
    #[arg(long, conflicts_with = "input_dir")]
    template: Option<String>,
    /// Directory of pre-made test case files
    #[arg(long)]
    input_dir: Option<PathBuf>,
    /// Comma-separated hex RAND values for every case, or "derive" for per-case values
    #[arg(long)]
    rand_override: Option<String>,
    /// Feature value read by FEAT, as k=v
    #[arg(long = "feature")]
    features: Vec<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    out: OutArg,
    /// Program file or corpus:NAME
    #[arg(long)]
    program: String,
    /// Selects the randomized address layout
    #[arg(long, default_value_t = 0)]
    run_nonce: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    out: OutArg,
    #[arg(long)]
    raw: PathBuf,
}

#[derive(Args, Clone)]
struct AnalyzeFlags {
    /// Address granularity in bytes (power of two)
    #[arg(long, default_value_t = 1)]
    granularity: u64,
    /// Whole-trace checkpoint interval in entries
    #[arg(long)]
    checkpoint: Option<usize>,
    /// Test case pair to diff, as A:B
    #[arg(long = "pair")]
    pairs: Vec<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    flags: AnalyzeFlags,
}

#[derive(Args, Clone)]
struct ReportFlags {
    /// Symbol map for one image, as IMAGE_ID=PATH
    #[arg(long = "map")]
    maps: Vec<String>,
    /// Text report lists only instructions above this many bits
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    out: OutArg,
    #[command(flatten)]
    flags: ReportFlags,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    out: OutArg,
    /// Program file or corpus:NAME
    #[arg(long, conflicts_with = "raw", required_unless_present = "raw")]
    program: Option<String>,
    /// External raw trace instead of a program
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    run_nonce: u64,
    #[command(flatten)]
    cases: CaseArgs,
    #[command(flatten)]
    analyze: AnalyzeFlags,
    #[command(flatten)]
    report: ReportFlags,
}

fn usage(msg: String) -> Error {
    Error::Config(msg)
}

fn parse_u64(s: &str) -> Result<u64, Error> {
    let t = s.trim();
    let r = match t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => t.parse(),
    };
    r.map_err(|_| usage(format!("bad number {s:?}")))
}

fn gen_config(a: &CaseArgs) -> Result<GenConfig, Error> {
    let source = match (&a.template, &a.input_dir) {
        (Some(t), _) => CaseSource::Template { template: t.clone(), n: a.n },
        (None, Some(d)) => CaseSource::Directory(d.clone()),
        (None, None) => CaseSource::Random { n: a.n, len: a.len },
    };
    let rand = match a.rand_override.as_deref() {
        None => RandPolicy::Seeded,
        Some("derive") => RandPolicy::Derive,
        Some(list) => RandPolicy::Fixed(
            list.split(',')
                .map(|v| {
                    let v = v.trim();
                    let hex = v.strip_prefix("0x").unwrap_or(v);
                    u64::from_str_radix(hex, 16).map_err(|_| usage(format!("bad RAND override value {v:?}")))
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    let mut features = BTreeMap::new();
    for f in &a.features {
        let (k, v) = f.split_once('=').ok_or_else(|| usage(format!("bad --feature {f:?}, expected k=v")))?;
        let k = u32::try_from(parse_u64(k)?).map_err(|_| usage(format!("feature key {k} too large")))?;
        features.insert(k, parse_u64(v)?);
    }
    Ok(GenConfig { source, seed: a.seed, rand, features })
}

fn analyze_options(f: &AnalyzeFlags, analyses: Analyses) -> Result<AnalyzeOptions, Error> {
    let pairs = f
        .pairs
        .iter()
        .map(|p| {
            let (a, b) = p.split_once(':').ok_or_else(|| usage(format!("bad --pair {p:?}, expected A:B")))?;
            let id = |s: &str| s.trim().parse::<u32>().map_err(|_| usage(format!("bad --pair {p:?}")));
            Ok((id(a)?, id(b)?))
        })
        .collect::<Result<_, Error>>()?;
    if f.checkpoint == Some(0) {
        return Err(usage("--checkpoint must be at least 1".into()));
    }
    Ok(AnalyzeOptions { granularity: Granularity::new(f.granularity)?, checkpoint: f.checkpoint, pairs, analyses })
}

fn report_options(f: &ReportFlags) -> Result<ReportOptions, Error> {
    let mut maps = BTreeMap::new();
    for m in &f.maps {
        let (id, path) = parse_map_spec(m)?;
        maps.insert(id, path);
    }
    Ok(ReportOptions { maps, threshold: f.threshold })
}

fn only(compare: bool, whole_trace: bool, instruction: bool) -> Analyses {
    Analyses { compare, whole_trace, instruction }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Gen(a) => {
            let f = gen_stage(&gen_config(&a.cases)?, &a.out.out)?;
            println!("generated {} test cases", f.set.len());
        }
        Command::Trace(a) => {
            let meta = leaktrace::pipeline::trace_stage(&a.program, &a.out.out, a.run_nonce)?;
            println!("traced {} test cases of {}", meta.case_count, meta.program);
        }
        Command::Ingest(a) => {
            let meta = ingest_stage(&a.raw, &a.out.out)?;
            println!("ingested {} test cases", meta.case_count);
        }
        Command::Preprocess(a) => {
            let s = preprocess_stage(&a.out)?;
            println!("preprocessed {} test cases", s.case_ids.len());
            if s.unknown_accesses > 0 {
                println!("{} accesses outside any known region", s.unknown_accesses);
            }
        }
        Command::Analyze { which } => {
            let (args, analyses) = match which {
                AnalyzeCommand::Compare(a) => (a, only(true, false, false)),
                AnalyzeCommand::MiTrace(a) => (a, only(false, true, false)),
                AnalyzeCommand::MiInstr(a) => (a, only(false, false, true)),
            };
            analyze_stage(&args.out.out, &analyze_options(&args.flags, analyses)?)?;
        }
        Command::Report(a) => {
            let r = report_stage(&a.out.out, &report_options(&a.flags)?)?;
            println!("{} flagged instructions", r.flagged_count);
        }
        Command::Pipeline(a) => {
            let input = match (a.program, a.raw) {
                (Some(p), _) => TraceInput::Program(p),
                (None, Some(r)) => TraceInput::Raw(r),
                (None, None) => return Err(usage("one of --program or --raw is required".into())),
            };
            let cfg = PipelineConfig {
                input,
                gen: gen_config(&a.cases)?,
                run_nonce: a.run_nonce,
                analyze: analyze_options(&a.analyze, Analyses::ALL)?,
                report: report_options(&a.report)?,
                out: a.out.out,
            };
            let r = run_pipeline(&cfg)?;
            if let Some(w) = &r.whole_trace {
                println!("whole-trace MI: {} bits", w.mi_bits);
            }
            println!("{} flagged instructions", r.flagged_count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() || matches!(e, Error::Symbol(_)) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
