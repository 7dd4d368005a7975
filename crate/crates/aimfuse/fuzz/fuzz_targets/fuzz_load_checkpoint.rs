//! The binary checkpoint decoder must never panic on arbitrary bytes, and
//! anything it accepts must survive a save/load round-trip.
#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = aimfuse::trainer::load_state(data) {
        let bytes = aimfuse::trainer::save_state(&state);
        aimfuse::trainer::load_state(&bytes).expect("accepted checkpoint must round-trip");
    }
});
