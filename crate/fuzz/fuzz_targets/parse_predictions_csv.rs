#![no_main]

use imbalance_kit::ensemble::{parse_predictions_csv, write_predictions_csv, VoteTable};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(records) = parse_predictions_csv(text) {
        let mut buf = Vec::new();
        write_predictions_csv(&records, &mut buf).unwrap();
        assert_eq!(
            parse_predictions_csv(std::str::from_utf8(&buf).unwrap()).unwrap(),
            records
        );
        let _ = VoteTable::new(records, None);
    }
});
