#![no_main]

use imbalance_kit::data::{parse_embeddings, write_embeddings, LabelSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let labels = LabelSpace::new(["neutral", "happy", "sad", "angry"]).unwrap();
    if let Ok(ds) = parse_embeddings(text, &labels) {
        let mut buf = Vec::new();
        write_embeddings(&ds, &labels, &mut buf).unwrap();
        let back = parse_embeddings(std::str::from_utf8(&buf).unwrap(), &labels).unwrap();
        assert_eq!(back.samples(), ds.samples());
    }
});
