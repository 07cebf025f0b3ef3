//! Checkpoint container decoding must reject arbitrary bytes without
//! panicking or overallocating.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = litr::checkpoint::decode(data);
});
