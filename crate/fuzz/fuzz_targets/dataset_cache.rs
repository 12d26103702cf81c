//! JSON-lines dataset cache parser on arbitrary bytes.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = oikos::tasks::dataset_cache_from_bytes(data);
});
