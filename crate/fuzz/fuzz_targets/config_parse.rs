#![no_main]

use fedldf_core::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = text.parse::<ExperimentConfig>() {
        let again: ExperimentConfig = cfg.to_text().parse().expect("canonical text parses");
        assert_eq!(again, cfg);
    }
});
