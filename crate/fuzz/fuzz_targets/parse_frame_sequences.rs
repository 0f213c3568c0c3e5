#![no_main]

use imbalance_kit::data::{parse_frame_sequences, write_frame_sequences, LabelSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&cap, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let labels = LabelSpace::new(["neutral", "happy"]).unwrap();
    let max_frames = 1 + cap as usize % 8;
    if let Ok(seqs) = parse_frame_sequences(text, &labels, max_frames) {
        assert!(seqs.iter().all(|s| s.frames.nrows() <= max_frames));
        let mut buf = Vec::new();
        write_frame_sequences(&seqs, &labels, &mut buf).unwrap();
        let back =
            parse_frame_sequences(std::str::from_utf8(&buf).unwrap(), &labels, max_frames).unwrap();
        assert_eq!(back, seqs);
    }
});
