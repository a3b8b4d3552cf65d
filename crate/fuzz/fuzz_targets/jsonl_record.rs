#![no_main]

use libfuzzer_sys::fuzz_target;
use mmsum::dataset::parse_jsonl;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_jsonl(text) {
            for r in records {
                assert_eq!(r.image_paths.len(), r.captions.len());
            }
        }
    }
});
