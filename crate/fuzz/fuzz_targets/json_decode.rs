#![no_main]

use libfuzzer_sys::fuzz_target;
use numalens_core::gen::Manifest;
use numalens_core::report::IssueReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = Manifest::from_json(text) {
        let _ = Manifest::from_json(&m.to_json()).expect("manifest re-encodes");
    }
    if let Ok(r) = IssueReport::from_json(text) {
        let _ = IssueReport::from_json(&r.to_json()).expect("report re-encodes");
    }
});
