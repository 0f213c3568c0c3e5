#![no_main]

use imbalance_kit::ensemble::parse_truth_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_truth_csv(text);
    }
});
