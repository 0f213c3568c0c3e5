#![no_main]

use imbalance_kit::checkpoint::parse_checkpoint;
use imbalance_kit::model::Input;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(ckpt) = parse_checkpoint(text) {
        assert_eq!(parse_checkpoint(&ckpt.to_json()).unwrap(), ckpt);
        if !ckpt.model.takes_frames() {
            let x = vec![0.5; ckpt.model.input_dim()];
            let _ = ckpt.model.forward(Input::from(&x[..]));
        }
    }
});
