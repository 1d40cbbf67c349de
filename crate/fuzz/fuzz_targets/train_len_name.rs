#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::series::train_len_from_name;

fuzz_target!(|name: &str| {
    if let Some(n) = train_len_from_name(name) {
        assert!(name.contains("tr_") && n.to_string().len() <= name.len());
    }
});
