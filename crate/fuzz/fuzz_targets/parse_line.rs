#![no_main]

use libfuzzer_sys::fuzz_target;
use numalens_core::trace::{parse_line, write_line, Record};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(Some(Record::Event(ev))) = parse_line(text, 1) {
        let mut out = String::new();
        write_line(&ev, &mut out);
        let again = parse_line(&out, 1).expect("canonical line parses");
        assert_eq!(again, Some(Record::Event(ev)));
    }
});
