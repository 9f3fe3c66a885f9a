#![no_main]

use fedldf_core::analysis;
use fedldf_core::trace::parse_trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_trace(text) {
        let _ = analysis::bound_report(&records);
    }
});
