//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::io::{BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{min_max_assignments, InvalidationOracle, RemoteOracle};
use numalens_core::gen::{generate_events, generate_to_writer, GenParams, Pattern};
use numalens_core::report::{build_report, IssueReport, Subject, Tier};
use numalens_core::score::{suggest_assignment, FixStrategy, IssueKind};
use numalens_core::trace::{
    AccessKind, CallsiteId, RoutineId, ThreadId, Timestamp, TraceEvent, Validator,
};
use numalens_core::{analyze_stream, Analysis, Analyzer, AnalyzerConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn analyze_events(events: &[TraceEvent], config: AnalyzerConfig) -> Analysis {
    let mut v = Validator::new();
    let mut a = Analyzer::new(config);
    for (i, ev) in events.iter().enumerate() {
        v.check(ev, i).expect("generated trace is valid");
        a.feed(ev).expect("replay");
    }
    a.finish()
}

fn analyze_pattern(pattern: Pattern, params: &GenParams) -> (numalens_core::gen::Manifest, IssueReport) {
    let (sink, m) = generate_events(pattern, params).expect("generate");
    let mut a = Analyzer::new(AnalyzerConfig::default());
    for (id, s) in &sink.callsites {
        a.callsite(*id, s.clone());
    }
    for ev in &sink.events {
        a.feed(ev).expect("replay");
    }
    (m, build_report(&a.finish()))
}

/// Hand-built traces with consecutive timestamps.
struct Builder {
    ts: u64,
    events: Vec<TraceEvent>,
}

impl Builder {
    fn new(threads: u32) -> Self {
        let mut b = Builder {
            ts: 0,
            events: Vec::new(),
        };
        for t in 1..threads {
            b.events.push(TraceEvent::ThreadCreate {
                ts: Timestamp(0),
                tid: ThreadId(t),
                parent: ThreadId::MAIN,
                routine: RoutineId(1),
            });
        }
        b
    }

    fn alloc(&mut self, addr: u64, size: u64) {
        self.events.push(TraceEvent::Alloc {
            ts: Timestamp(self.ts),
            tid: ThreadId::MAIN,
            addr,
            size,
            callsite: CallsiteId(1),
        });
    }

    fn access(&mut self, tid: u32, kind: AccessKind, addr: u64, size: u32) {
        self.ts += 1;
        self.events.push(TraceEvent::MemAccess {
            ts: Timestamp(self.ts),
            tid: ThreadId(tid),
            kind,
            addr,
            size,
        });
    }

    fn end_at(&mut self, ts: u64, addr: u64) {
        assert!(ts >= self.ts);
        self.events.push(TraceEvent::Free {
            ts: Timestamp(ts),
            tid: ThreadId::MAIN,
            addr,
        });
    }
}

fn c1_remote_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let traces = 100;
    let (mut events_total, mut objects_checked) = (0usize, 0usize);
    for i in 0..traces {
        let params = GenParams {
            threads: 8,
            pages: rng.gen_range(16..=256),
            accesses: rng.gen_range(10_000..=100_000),
            seed: i,
            ..GenParams::defaults(Pattern::Random)
        };
        let (sink, _) = generate_events(Pattern::Random, &params).map_err(|e| e.to_string())?;
        ensure!(
            (10_000..=110_000).contains(&sink.events.len()),
            "trace {i} has {} events",
            sink.events.len()
        );
        events_total += sink.events.len();
        let a = analyze_events(&sink.events, AnalyzerConfig::default());
        let mut oracle = RemoteOracle::new();
        for ev in &sink.events {
            oracle.feed(ev);
        }
        for (page, &(acc, rem)) in &oracle.pages {
            let rec = a.pages.page(*page).ok_or(format!("trace {i}: page {page} missing"))?;
            ensure!(
                (rec.access_count, rec.remote_count) == (acc, rem),
                "trace {i} page {page}: got ({}, {}), oracle ({acc}, {rem})",
                rec.access_count,
                rec.remote_count
            );
        }
        ensure!(a.pages.pages().count() == oracle.pages.len(), "trace {i}: page count");
        let objs = a.registry.objects();
        ensure!(objs.len() == oracle.object_remote.len(), "trace {i}: object count");
        for (o, want) in objs.iter().zip(&oracle.object_remote) {
            ensure!(
                o.counters.remote_accesses == *want,
                "trace {i} object {}: got {}, oracle {want}",
                o.id,
                o.counters.remote_accesses
            );
        }
        objects_checked += objs.len();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!(
        "{traces} traces, {events_total} events, {objects_checked} objects, {secs:.2} s"
    ))
}

fn c2_invalidation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    let config = AnalyzerConfig {
        word_track_threshold: 0,
        ..AnalyzerConfig::default()
    };
    let base = 0x4000_0000u64;
    let traces = 200;
    let mut invalidations = 0u64;
    for i in 0..traces {
        let threads = rng.gen_range(2..=8);
        let single = i % 2 == 0;
        let lines = if single { 1 } else { rng.gen_range(2..=16) };
        let region = lines * common::LINE;
        let mut b = Builder::new(threads);
        b.alloc(base, region);
        for _ in 0..rng.gen_range(200..2000) {
            let tid = rng.gen_range(0..threads);
            let kind = if rng.gen_bool(0.4) {
                AccessKind::Write
            } else {
                AccessKind::Read
            };
            let size = [1u32, 2, 4, 8, 8, 16, 32, 64][rng.gen_range(0..8)];
            let off = rng.gen_range(0..region);
            let size = size.min((region - off) as u32);
            b.access(tid, kind, base + off, size);
        }
        let a = analyze_events(&b.events, config);
        let mut oracle = InvalidationOracle::new();
        for ev in &b.events {
            oracle.feed(ev);
        }
        for (line, &(inv, f, t)) in &oracle.lines {
            let rec = a.cache.line(*line).ok_or(format!("trace {i}: line {line} missing"))?;
            ensure!(
                (rec.invalidations, rec.classified_false, rec.classified_true) == (inv, f, t),
                "trace {i} line {line}: got ({}, {}, {}), oracle ({inv}, {f}, {t})",
                rec.invalidations,
                rec.classified_false,
                rec.classified_true
            );
            ensure!(rec.classified_false + rec.classified_true == rec.invalidations, "split");
            invalidations += inv;
        }
        let c = a.registry.objects()[0].counters;
        let want: u64 = oracle.lines.values().map(|v| v.0).sum();
        ensure!(
            c.invalidations() == want && c.unclassified_invalidations == 0,
            "trace {i}: object invalidations {} vs {want}",
            c.invalidations()
        );
    }
    Ok(format!("{traces} traces, {invalidations} invalidations classified"))
}

fn c3_migration_formula() -> Outcome {
    let params = GenParams {
        threads: 4,
        contentions: 2,
        span_ns: 2_000_000_000,
        parallel_fraction: 1.0,
        ..GenParams::defaults(Pattern::MigrationHeavy)
    };
    let (m, r) = analyze_pattern(Pattern::MigrationHeavy, &params);
    // p = 1, eight migrations, 2 s of runtime, four threads.
    let (p, migrations, runtime_s, threads) = (1.0, 8.0, 2.0, 4.0);
    let by_hand = p * migrations / (runtime_s * threads);
    let s = r.threads.migration_score;
    ensure!(r.threads.parallel_fraction == 1.0, "p = {}", r.threads.parallel_fraction);
    ensure!(r.threads.count == 4, "|T| = {}", r.threads.count);
    ensure!(m.migration_score == Some(by_hand), "manifest S = {:?}", m.migration_score);
    ensure!(rel_diff(s, 1.0) <= 1e-9, "S = {s}");
    Ok(format!("S = {s}"))
}

fn c4_assignment() -> Outcome {
    let ferret: std::collections::BTreeMap<RoutineId, u64> =
        [(1, 33), (2, 19), (3, 474), (4, 753)].map(|(r, w)| (RoutineId(r), w)).into();
    let got: Vec<u64> = suggest_assignment(&ferret, 128)
        .map_err(|e| e.to_string())?
        .into_values()
        .collect();
    ensure!(got == vec![4, 2, 47, 75], "ferret: {got:?}");
    let best = min_max_assignments(&[33, 19, 474, 753], 128);
    ensure!(best.contains(&got), "ferret not min-max optimal: {best:?}");

    let dedup: std::collections::BTreeMap<RoutineId, u64> =
        [(1, 9220), (2, 33), (3, 343)].map(|(r, w)| (RoutineId(r), w)).into();
    let got2: Vec<u64> = suggest_assignment(&dedup, 96)
        .map_err(|e| e.to_string())?
        .into_values()
        .collect();
    let best2 = min_max_assignments(&[9220, 33, 343], 96);
    ensure!(best2.contains(&got2), "dedup {got2:?} not in {best2:?}");
    ensure!(got2.iter().sum::<u64>() == 96 && got2.iter().all(|&n| n >= 1), "dedup {got2:?}");
    // Largest remainder on the quotas, then lifting zero-seat types to one
    // seat by taking from the largest type.
    let w = [9220.0, 33.0, 343.0];
    let total: f64 = w.iter().sum();
    let quotas: Vec<f64> = w.iter().map(|x| x * 96.0 / total).collect();
    let mut seats: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let short = 96 - seats.iter().sum::<u64>();
    for &i in order.iter().take(short as usize) {
        seats[i] += 1;
    }
    for i in 0..3 {
        if seats[i] == 0 {
            seats[i] = 1;
            seats[0] -= 1;
        }
    }
    ensure!(seats == got2, "largest remainder gives {seats:?}, assignment {got2:?}");
    Ok(format!("ferret {got:?}, dedup {got2:?} (enumeration-optimal)"))
}

fn tier_of(r: &IssueReport, kind: IssueKind) -> Option<Tier> {
    r.issues.iter().find(|i| i.kind == kind).map(|i| i.tier)
}

fn c5_thresholds() -> Outcome {
    let want = [Some(Tier::Informational), Some(Tier::Reported), Some(Tier::Reported)];
    let mut notes = Vec::new();

    let mut got = Vec::new();
    for n in [1499u64, 1500, 1501] {
        let params = GenParams {
            threads: 2,
            pages: 1,
            accesses: n,
            span_ns: 1_000_000,
            ..GenParams::defaults(Pattern::RemotePage)
        };
        let (m, r) = analyze_pattern(Pattern::RemotePage, &params);
        let c = m.subjects[0].counters;
        ensure!(c.remote_accesses == n && c.invalidations() == 0, "planted {c:?}");
        let issue = r.issues.iter().find(|i| i.kind == IssueKind::RemoteAccess);
        ensure!(issue.is_none_or(|i| i.score == n as f64), "score {:?}", issue.map(|i| i.score));
        got.push(tier_of(&r, IssueKind::RemoteAccess));
    }
    ensure!(got == want, "remote 1499/1500/1501: {got:?}");
    notes.push("remote");

    let mut got = Vec::new();
    for writes in [300u64, 301, 302] {
        let params = GenParams {
            threads: 3,
            accesses: writes,
            span_ns: 100_000_000,
            ..GenParams::defaults(Pattern::FalseSharing)
        };
        let (m, r) = analyze_pattern(Pattern::FalseSharing, &params);
        ensure!(m.subjects[0].counters.invalidations() == writes - 1, "planted");
        got.push(tier_of(&r, IssueKind::FalseSharing));
    }
    ensure!(got == want, "sharing 299/300/301 invalidations over 100 ms x 3 threads: {got:?}");
    notes.push("sharing");

    let mut got = Vec::new();
    for c in [149u64, 150, 151] {
        let params = GenParams {
            threads: 4,
            contentions: c,
            span_ns: 1_000_000_000,
            ..GenParams::defaults(Pattern::MigrationHeavy)
        };
        let (_, r) = analyze_pattern(Pattern::MigrationHeavy, &params);
        ensure!(r.threads.migration_score == c as f64, "S = {}", r.threads.migration_score);
        got.push(tier_of(&r, IssueKind::ThreadMigration));
    }
    ensure!(got == want, "migration 149/150/151: {got:?}");
    notes.push("migration");
    Ok(format!("{} boundaries at 1499/1500/1501, 0.997/1.0/1.003, 149/150/151", notes.join(", ")))
}

/// One object with `remote` remote accesses and `inv` invalidations.
fn dominance_trace(remote: u64, inv: u64) -> Vec<TraceEvent> {
    let base = 0x10000u64;
    let mut b = Builder::new(2);
    b.alloc(base, common::PAGE);
    b.access(0, AccessKind::Write, base, 8);
    let pingpong = inv + 1;
    for k in 0..pingpong {
        let tid = if k % 2 == 0 { 1 } else { 0 };
        b.access(tid, AccessKind::Write, base + common::LINE, 8);
    }
    let t1_writes = pingpong.div_ceil(2);
    for _ in 0..remote - t1_writes {
        b.access(1, AccessKind::Read, base + 2 * common::LINE, 8);
    }
    b.events
}

fn c6_dominance() -> Outcome {
    let mut out = Vec::new();
    for (inv, sharing) in [(5100u64, true), (4900, false)] {
        let ev = dominance_trace(10_000, inv);
        let a = analyze_events(&ev, AnalyzerConfig::default());
        let c = a.registry.objects()[0].counters;
        ensure!(c.remote_accesses == 10_000 && c.invalidations() == inv, "built {c:?}");
        let r = build_report(&a);
        let kinds: Vec<IssueKind> = r.issues.iter().map(|i| i.kind).collect();
        let ok = if sharing {
            kinds.len() == 1 && matches!(kinds[0], IssueKind::FalseSharing | IssueKind::TrueSharing)
        } else {
            kinds == vec![IssueKind::RemoteAccess]
        };
        ensure!(ok, "invalidations {inv} / remote 10000: issues {kinds:?}");
        out.push(format!("{:.2}x -> {:?}", inv as f64 / 10_000.0, kinds[0]));
    }
    Ok(out.join(", "))
}

fn c7_fixes() -> Outcome {
    let mut out = Vec::new();
    for (p, kind, fix) in [
        (Pattern::RemoteBlock, IssueKind::RemoteAccess, FixStrategy::BlockInterleave),
        (Pattern::ReadMostly, IssueKind::RemoteAccess, FixStrategy::Duplicate),
        (Pattern::FalseSharing, IssueKind::FalseSharing, FixStrategy::Padding),
    ] {
        let (_, r) = analyze_pattern(p, &GenParams::defaults(p));
        let got: Vec<(IssueKind, FixStrategy)> = r.reported().map(|i| (i.kind, i.fix)).collect();
        ensure!(got == vec![(kind, fix)], "{p}: {got:?}");
        out.push(format!("{p} -> {}", fix.label()));
    }
    Ok(out.join(", "))
}

/// Every thread, the main one included, writes its own word of one line in
/// turn; the trace lasts exactly `span_ns`.
fn symmetric_sharing(threads: u32, writes: u64, span_ns: u64) -> Vec<TraceEvent> {
    let base = 0x20000u64;
    let mut b = Builder::new(threads);
    b.alloc(base, common::LINE);
    for k in 0..writes {
        let t = (k % threads as u64) as u32;
        b.access(t, AccessKind::Write, base + t as u64 * common::WORD, 8);
    }
    b.end_at(span_ns, base);
    b.events
}

fn c8_normalization() -> Outcome {
    let span = 100_000_000;
    let score = |threads: u32, writes: u64| {
        let a = analyze_events(&symmetric_sharing(threads, writes, span), AnalyzerConfig::default());
        let r = build_report(&a);
        let c = a.registry.objects()[0].counters;
        let s = r
            .subjects
            .iter()
            .find(|s| matches!(s.subject, Subject::AllocationSite { .. }))
            .map(|s| s.scores.false_sharing_score)
            .unwrap();
        (s, c.invalidations())
    };
    let (s4, i4) = score(4, 20_000);
    let (s8, i8) = score(8, 40_000);
    let d = rel_diff(s4, s8);
    ensure!(i8 >= 2 * i4 - 1 && i8 <= 2 * i4 + 1, "invalidations {i4} -> {i8}");
    ensure!(d < 0.01, "sharing score {s4} -> {s8} ({:.3}%)", d * 100.0);

    let mig = |threads| {
        let params = GenParams {
            threads,
            contentions: 50,
            ..GenParams::defaults(Pattern::MigrationHeavy)
        };
        analyze_pattern(Pattern::MigrationHeavy, &params).1.threads.migration_score
    };
    let (m4, m8) = (mig(4), mig(8));
    ensure!(rel_diff(m4, m8) < 1e-12, "migration {m4} -> {m8}");
    Ok(format!(
        "sharing {s4:.4} -> {s8:.4} ({:.3}%), migration {m4} -> {m8}",
        d * 100.0
    ))
}

fn peak_rss_kib() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    s.lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

fn c9_throughput() -> Outcome {
    let file = tempfile::NamedTempFile::new().map_err(|e| e.to_string())?;
    let params = GenParams {
        threads: 8,
        pages: 256,
        accesses: 10_400_000,
        span_ns: 60_000_000_000,
        seed: 9,
        ..GenParams::defaults(Pattern::Random)
    };
    let (m, _) = generate_to_writer(Pattern::Random, &params, BufWriter::new(file.reopen().unwrap()))
        .map_err(|e| e.to_string())?;
    let events = m.event_counts.total();
    ensure!(events >= 10_000_000, "only {events} events");
    let start = Instant::now();
    let input = BufReader::with_capacity(1 << 20, file.reopen().unwrap());
    let a = analyze_stream(input, AnalyzerConfig::default()).map_err(|e| e.to_string())?;
    let report = build_report(&a);
    let secs = start.elapsed().as_secs_f64();
    let peak = peak_rss_kib();
    ensure!(a.memory_accesses > 0 && !report.subjects.is_empty(), "empty analysis");
    ensure!(secs < 60.0, "{events} events took {secs:.1} s");
    if let Some(kib) = peak {
        ensure!(kib < 2 * 1024 * 1024, "peak RSS {} MiB", kib / 1024);
    }
    Ok(format!(
        "{events} events in {secs:.1} s, peak RSS {}",
        peak.map_or("unknown".into(), |k| format!("{} MiB", k / 1024))
    ))
}

fn c10_determinism() -> Outcome {
    let mut checked = 0;
    for p in [Pattern::Mixed, Pattern::Random, Pattern::RemoteBlock] {
        let (m, bytes) = generate_to_writer(p, &GenParams::defaults(p), Vec::new()).map_err(|e| e.to_string())?;
        let (m2, bytes2) = generate_to_writer(p, &GenParams::defaults(p), Vec::new()).map_err(|e| e.to_string())?;
        ensure!(bytes == bytes2 && m == m2, "{p}: generator output differs");
        let run = || {
            let a = analyze_stream(bytes.as_slice(), AnalyzerConfig::default()).unwrap();
            build_report(&a).to_json()
        };
        let (a, b) = (run(), run());
        ensure!(a == b, "{p}: structured reports differ");
        let trace = numalens_core::trace::parse_trace(bytes.as_slice()).map_err(|e| e.to_string())?;
        let batch = numalens_core::analyze_trace(&trace, AnalyzerConfig::default()).unwrap();
        ensure!(build_report(&batch).to_json() == a, "{p}: sorted replay differs from streaming");
        checked += 1;
    }
    Ok(format!("{checked} patterns, reports byte-identical"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("remote-access oracle equivalence", c1_remote_oracle),
        ("invalidation oracle equivalence", c2_invalidation_oracle),
        ("migration formula", c3_migration_formula),
        ("thread assignment reproduction", c4_assignment),
        ("threshold semantics", c5_thresholds),
        ("dominance rule", c6_dominance),
        ("fix-strategy selection", c7_fixes),
        ("normalization invariance", c8_normalization),
        ("throughput (10^7 events)", c9_throughput),
        ("determinism", c10_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let id = n + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &id.to_string()) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  #{id:<2} {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  #{id:<2} {name}: {why}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
