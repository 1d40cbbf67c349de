#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::series::parse_series;

fuzz_target!(|data: &[u8]| {
    // first byte picks an explicit train length, zero defers to the name
    let Some((&first, rest)) = data.split_first() else {
        return;
    };
    let train_len = (first > 0).then_some(usize::from(first));
    if let Ok(series) = parse_series(rest, "fuzz_tr_4_x", train_len) {
        assert_eq!(series.values.rows(), series.len());
    }
});
