#![no_main]

use libfuzzer_sys::fuzz_target;
use mmsum::image::ImageGrid;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ImageGrid::from_pgm(data) {
        let bytes = img.to_pgm().expect("decoded image re-encodes");
        assert_eq!(ImageGrid::from_pgm(&bytes).expect("re-encoded image decodes"), img);
    }
});
