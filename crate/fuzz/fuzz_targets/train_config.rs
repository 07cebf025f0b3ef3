//! Training config JSON parsing and validation must never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;
use litr::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<TrainConfig>(data) {
        let _ = cfg.validate();
    }
});
