#![no_main]

use libfuzzer_sys::fuzz_target;
use mmsum::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let bytes = ck.to_bytes().expect("decoded checkpoint re-encodes");
        assert_eq!(
            Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint decodes"),
            ck
        );
        let _ = ck.into_model();
    }
});
