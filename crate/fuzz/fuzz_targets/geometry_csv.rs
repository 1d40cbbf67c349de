#![no_main]

use libfuzzer_sys::fuzz_target;
use vace::geometry::read_geometry_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_geometry_csv(data);
});
