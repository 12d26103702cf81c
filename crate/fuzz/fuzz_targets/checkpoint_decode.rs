//! The binary checkpoint decoder on arbitrary bytes, at both widths.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = oikos::model::checkpoint_from_bytes::<f64>(data);
    let _ = oikos::model::checkpoint_from_bytes::<f32>(data);
});
