#![no_main]

use libfuzzer_sys::fuzz_target;
use wgnqa::text::EmbeddingTable;

fuzz_target!(|data: &[u8]| {
    // first byte picks the expected width
    let Some((&dim, rest)) = data.split_first() else { return };
    let _ = EmbeddingTable::from_reader(rest, usize::from(dim % 8) + 1);
});
