//! The routing-telemetry TSV parser must never panic.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = aimfuse::fusion::parse_telemetry_str(text, "fuzz");
    }
});
