//! `numalens`: analyze, generate and validate NPTRACE files.
//!
//! Every option takes `--key=value`. Each analyzer option can also be set
//! through `NUMAPERF_<KEY>` (for example `NUMAPERF_PAGE_SIZE=8192`); a flag
//! on the command line wins over the environment, which wins over the
//! built-in default.
//!
//! Exit status: 0 on success, 2 for trace, parameter or configuration
//! errors, 1 for anything else.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use numalens_core::gen::{generate_to_writer, GenError, GenParams, Pattern};
use numalens_core::report::{build_report, render_text};
use numalens_core::trace::{parse_trace, Record, TraceError, TraceReader, Validator};
use numalens_core::{analyze_stream, analyze_trace, AnalysisError, AnalyzerConfig, Thresholds};

#[derive(Parser)]
#[command(name = "numalens", version, about = "Offline NUMA performance analysis of event traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace and report NUMA issues.
    Analyze(AnalyzeArgs),
    /// Write a synthetic trace and its ground-truth manifest.
    Gen(GenArgs),
    /// Check a trace for format and consistency errors.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Text,
    Structured,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, env = "NUMAPERF_PAGE_SIZE", default_value_t = 4096)]
    page_size: u64,
    #[arg(long, env = "NUMAPERF_LINE_SIZE", default_value_t = 64)]
    line_size: u64,
    #[arg(long, env = "NUMAPERF_WORD_SIZE", default_value_t = 8)]
    word_size: u64,
    #[arg(long, env = "NUMAPERF_BLOCKS_PER_PAGE", default_value_t = 64)]
    blocks_per_page: u64,
    /// Accesses a page needs before per-block and per-thread detail starts.
    #[arg(long, env = "NUMAPERF_PAGE_DETAIL_THRESHOLD", default_value_t = 64)]
    page_detail_threshold: u64,
    /// Writes a cache line needs before word-level sharing detail starts.
    #[arg(long, env = "NUMAPERF_WORD_TRACK_THRESHOLD", default_value_t = 16)]
    word_track_threshold: u64,
    #[arg(long, env = "NUMAPERF_SPAN_QUANTILE", default_value_t = 0.9)]
    span_quantile: f64,
    /// Remote accesses per millisecond needed to report an object.
    #[arg(long, env = "NUMAPERF_REMOTE_MIN", default_value_t = 1500.0)]
    remote_min: f64,
    /// Invalidations per millisecond per thread needed to report an object.
    #[arg(long, env = "NUMAPERF_SHARING_MIN", default_value_t = 1.0)]
    sharing_min: f64,
    #[arg(long, env = "NUMAPERF_MIGRATION_MIN", default_value_t = 150.0)]
    migration_min: f64,
    /// Share of accesses that must be reads after the last write to suggest duplication.
    #[arg(long, env = "NUMAPERF_DUPLICATE_READ_FRACTION", default_value_t = 0.9)]
    duplicate_read_fraction: f64,
    /// Max/min per-thread access ratio between routine types that counts as imbalance.
    #[arg(long, env = "NUMAPERF_IMBALANCE_RATIO", default_value_t = 2.0)]
    imbalance_ratio: f64,
}

impl ConfigArgs {
    fn config(&self) -> AnalyzerConfig {
        AnalyzerConfig {
            page_size: self.page_size,
            line_size: self.line_size,
            word_size: self.word_size,
            blocks_per_page: self.blocks_per_page,
            page_detail_threshold: self.page_detail_threshold,
            word_track_threshold: self.word_track_threshold,
            span_quantile: self.span_quantile,
            thresholds: Thresholds {
                remote_min: self.remote_min,
                sharing_min: self.sharing_min,
                migration_min: self.migration_min,
                duplicate_read_fraction: self.duplicate_read_fraction,
                imbalance_ratio: self.imbalance_ratio,
            },
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace file, or `-` for stdin.
    trace: PathBuf,
    #[arg(long, env = "NUMAPERF_OUTPUT", value_enum, default_value_t = Output::Text)]
    output: Output,
    /// Accept unsorted input. The whole trace is loaded and sorted in memory
    /// (roughly 40 bytes per event) instead of streamed.
    #[arg(long)]
    sort: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GenArgs {
    pattern: Pattern,
    /// Trace destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest destination; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = "NUMAPERF_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<u32>,
    #[arg(long)]
    accesses: Option<u64>,
    #[arg(long)]
    span_ns: Option<u64>,
    #[arg(long)]
    pages: Option<u64>,
    #[arg(long)]
    contentions: Option<u64>,
    #[arg(long)]
    parallel_fraction: Option<f64>,
    /// Comma-separated relative totals per routine type.
    #[arg(long, value_delimiter = ',')]
    totals: Option<Vec<u64>>,
    #[arg(long)]
    unit: Option<u64>,
    #[arg(long)]
    threads_per_type: Option<u32>,
    #[arg(long)]
    main_accesses: Option<u64>,
}

impl GenArgs {
    fn params(&self) -> GenParams {
        let mut p = GenParams::defaults(self.pattern);
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    p.$f = v;
                }
            )*};
        }
        set!(seed, threads, accesses, span_ns, pages, contentions, parallel_fraction, totals, unit, threads_per_type, main_accesses);
        p
    }
}

#[derive(Args)]
struct ValidateArgs {
    /// Trace file, or `-` for stdin.
    trace: PathBuf,
    /// Accept unsorted input.
    #[arg(long)]
    sort: bool,
}

enum Failure {
    /// Bad input: trace, parameters or configuration.
    Input(String),
    Internal(String),
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<GenError> for Failure {
    fn from(e: GenError) -> Self {
        Failure::Input(e.to_string())
    }
}

fn open(path: &Path) -> Result<Box<dyn BufRead>, Failure> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::with_capacity(1 << 16, io::stdin())));
    }
    let f = File::open(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(Box::new(BufReader::with_capacity(1 << 16, f)))
}

fn write_stdout(text: &str) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Internal(format!("writing report: {e}")))
}

fn analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let config = args.config.config();
    config.validate().map_err(|e| Failure::Input(e.to_string()))?;
    let input = open(&args.trace)?;
    let analysis = if args.sort {
        let trace = parse_trace(input)?;
        analyze_trace(&trace, config)?
    } else {
        analyze_stream(input, config)?
    };
    let d = &analysis.diagnostics;
    if d.lock_release_violations > 0 {
        eprintln!("warning: {} lock releases by a non-holder", d.lock_release_violations);
    }
    if d.unattributed_accesses > 0 {
        eprintln!("note: {} accesses outside any tracked object", d.unattributed_accesses);
    }
    let report = build_report(&analysis);
    match args.output {
        Output::Text => write_stdout(&render_text(&report)),
        Output::Structured => write_stdout(&(report.to_json() + "\n")),
    }
}

fn gen(args: &GenArgs) -> Result<(), Failure> {
    let params = args.params();
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| args.out.as_ref().map(|o| o.with_extension("manifest.json")));
    let manifest = match &args.out {
        Some(path) => {
            let f = File::create(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let (m, w) = generate_to_writer(args.pattern, &params, BufWriter::new(f))?;
            w.into_inner()
                .map_err(|e| Failure::Internal(e.to_string()))?
                .sync_all()
                .map_err(|e| Failure::Internal(e.to_string()))?;
            m
        }
        None => {
            let out = BufWriter::new(io::stdout().lock());
            generate_to_writer(args.pattern, &params, out)?.0
        }
    };
    if let Some(path) = manifest_path {
        std::fs::write(&path, manifest.to_json() + "\n")
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn validate(args: &ValidateArgs) -> Result<(), Failure> {
    let input = open(&args.trace)?;
    let (events, callsites) = if args.sort {
        let t = parse_trace(input)?;
        (t.len() as u64, t.callsites().len())
    } else {
        let mut reader = TraceReader::new(input);
        let mut v = Validator::new();
        let (mut events, mut callsites, mut last) = (0u64, 0usize, 0u64);
        while let Some((rec, line)) = reader.next_record()? {
            match rec {
                Record::Callsite(..) => callsites += 1,
                Record::Event(ev) => {
                    if ev.sort_key() < last {
                        return Err(TraceError::UnsortedInput { line }.into());
                    }
                    last = ev.sort_key();
                    v.check(&ev, line)?;
                    events += 1;
                }
            }
        }
        (events, callsites)
    };
    write_stdout(&format!("ok: {events} events, {callsites} callsites\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Gen(g) => gen(g),
        Command::Validate(v) => validate(v),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Input(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Ok(Err(Failure::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(1),
    }
}

