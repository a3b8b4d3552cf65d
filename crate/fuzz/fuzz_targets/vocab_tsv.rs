#![no_main]

use libfuzzer_sys::fuzz_target;
use mmsum::text::Vocab;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(vocab) = Vocab::from_tsv(text) {
            let back = Vocab::from_tsv(&vocab.to_tsv()).expect("written vocabulary parses");
            assert_eq!(back.tokens(), vocab.tokens());
        }
    }
});
