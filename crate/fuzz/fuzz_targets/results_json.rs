//! Saved-report loader (the `report` subcommand's input) on arbitrary bytes.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = oikos::harness::results_json_from_bytes(data);
});
