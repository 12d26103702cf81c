//! Experiment-config JSON must reject arbitrary input without panicking.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = oikos::harness::ExperimentConfig::from_json_str(text);
    }
});
