#![no_main]

use libfuzzer_sys::fuzz_target;
use mednca::datasets::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::parse(text, "/nonexistent") {
        let back = Manifest::parse(&m.to_json(), "/nonexistent").expect("serialized manifest parses");
        assert_eq!(back, m);
    }
});
