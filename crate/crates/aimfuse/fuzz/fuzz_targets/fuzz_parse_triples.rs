//! The triples parser must never panic: any byte stream yields Ok or Err.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = aimfuse::kgdata::parse_triples_str(text, "fuzz");
    }
});
