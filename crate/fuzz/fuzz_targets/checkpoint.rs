#![no_main]

use libfuzzer_sys::fuzz_target;
use wgnqa::compute::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), ckpt.to_bytes());
        let _ = ckpt.to_store::<f32>();
        let _ = ckpt.to_store::<f64>();
    }
});
