#![no_main]

use libfuzzer_sys::fuzz_target;
use wgnqa::config::{parse_key_values, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_key_values(text);
    if let Ok(cfg) = RunConfig::parse(text) {
        let _ = cfg.validate();
        let _ = RunConfig::parse(&cfg.to_key_values()).expect("written settings parse back");
    }
});
