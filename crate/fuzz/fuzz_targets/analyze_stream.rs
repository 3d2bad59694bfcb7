#![no_main]

use libfuzzer_sys::fuzz_target;
use numalens_core::report::{build_report, render_text, IssueReport};
use numalens_core::{analyze_stream, AnalyzerConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(analysis) = analyze_stream(data, AnalyzerConfig::default()) else {
        return;
    };
    let report = build_report(&analysis);
    let _ = render_text(&report);
    let back = IssueReport::from_json(&report.to_json()).expect("report json");
    assert_eq!(back, report);
});
