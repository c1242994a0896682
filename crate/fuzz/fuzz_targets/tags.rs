#![no_main]
//! Stage and variant tags: parse, and re-parse the canonical spelling.

use libfuzzer_sys::fuzz_target;
use tdrs_core::{Stage, Variant};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(stage) = s.parse::<Stage>() {
        assert_eq!(stage.as_str().parse::<Stage>().unwrap(), stage);
    }
    if let Ok(variant) = s.parse::<Variant>() {
        assert_eq!(variant.key().parse::<Variant>().unwrap(), variant);
    }
});
