#![no_main]

use libfuzzer_sys::fuzz_target;
use numalens_core::trace::{parse_trace, write_trace_to};

// Anything that parses must survive a write and a second parse unchanged.
fuzz_target!(|data: &[u8]| {
    let Ok(trace) = parse_trace(data) else {
        return;
    };
    let mut buf = Vec::new();
    write_trace_to(&mut buf, trace.callsites(), trace.events()).expect("rewrite");
    let again = parse_trace(&buf[..]).expect("rewritten trace parses");
    assert_eq!(again.events(), trace.events());
    assert_eq!(again.callsites(), trace.callsites());
});
