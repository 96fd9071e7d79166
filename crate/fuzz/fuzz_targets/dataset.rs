#![no_main]

use libfuzzer_sys::fuzz_target;
use wgnqa::corpus::parse_dataset;

fuzz_target!(|data: &[u8]| {
    let _ = parse_dataset(data);
});
