#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::encoder::{decode_params, encode_params};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_params(data) {
        assert_eq!(decode_params(&encode_params(&params)).ok(), Some(params));
    }
});
