//! Ablation grid JSON parsing, patching, and validation must never panic;
//! validation expands arm patches, so this also drives the patch engine.

#![no_main]

use libfuzzer_sys::fuzz_target;
use litr::config::AblationGrid;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = serde_json::from_slice::<AblationGrid>(data) {
        let _ = grid.validate();
    }
});
