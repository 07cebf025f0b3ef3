//! TSV corpus import must fail cleanly on malformed records.

#![no_main]

use libfuzzer_sys::fuzz_target;
use litr::data::{import_tsv, Split};

fuzz_target!(|data: &[u8]| {
    let mut reader = std::io::Cursor::new(data);
    let _ = import_tsv(Split::Test, &mut reader);
});
