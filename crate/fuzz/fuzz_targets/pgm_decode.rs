#![no_main]

use libfuzzer_sys::fuzz_target;
use mednca::datasets::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pgm::decode(data) {
        assert_eq!(img.data.len(), img.width * img.height);
        assert!(img.data.iter().all(|&v| v <= img.maxval));
        let again = pgm::decode(&pgm::encode(&img)).expect("re-encoded image decodes");
        assert_eq!(again, img);
    }
});
