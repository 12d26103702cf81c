//! Corpus windowing over arbitrary bytes; the first byte picks seq_len.

#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    let seq_len = 1 + (data[0] as usize) % 128;
    let _ = oikos::tasks::corpus_from_bytes(&data[1..], seq_len, (0.8, 0.1, 0.1), 0);
});
