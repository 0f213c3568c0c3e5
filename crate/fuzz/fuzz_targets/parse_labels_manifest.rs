#![no_main]

use imbalance_kit::data::parse_labels_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_labels_manifest(text) {
        assert!(m.labels.len() >= 2);
        if let Some(c) = m.counts {
            assert_eq!(c.num_classes(), m.labels.len());
        }
    }
});
