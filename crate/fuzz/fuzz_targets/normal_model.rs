#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::pipeline::NormalModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = NormalModel::from_json(text);
    }
});
