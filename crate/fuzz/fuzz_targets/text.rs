#![no_main]

use libfuzzer_sys::fuzz_target;
use wgnqa::retrieval::chunk_document;
use wgnqa::text::{split_sentences, tokenize};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let sentences: Vec<_> = split_sentences(text).iter().map(|s| tokenize(s)).collect();
    let chunks = chunk_document("d", &sentences, 40);
    let total: usize = sentences.iter().map(Vec::len).sum();
    assert_eq!(chunks.iter().map(|c| c.tokens.len()).sum::<usize>(), total);
});
