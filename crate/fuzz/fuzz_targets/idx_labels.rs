#![no_main]

use fedldf_core::datasets::idx;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = idx::parse_labels(data) {
        assert_eq!(idx::encode_labels(&labels), data);
    }
});
