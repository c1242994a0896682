#![no_main]
//! JSON pipeline config: parsing and validation must never panic, and any
//! accepted config must run end to end on a small sequence.

use libfuzzer_sys::fuzz_target;
use tdrs_core::pipeline::{run, PipelineConfig};
use tdrs_core::types::build_sequence;
use tdrs_core::RotarySchedule;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = PipelineConfig::from_json(text) else {
        return;
    };
    let seq = build_sequence(3, 3, 8, 0).unwrap();
    let schedule = RotarySchedule::new(8).unwrap();
    if let Ok(result) = run(&seq, &seq, &seq, &schedule, &cfg) {
        for row in result.weights.values().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
});
