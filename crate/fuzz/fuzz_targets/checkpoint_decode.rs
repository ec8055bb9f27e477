#![no_main]

use libfuzzer_sys::fuzz_target;
use mednca::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint::decode(data) {
        // Anything accepted must re-encode to the same bytes.
        assert_eq!(checkpoint::encode(&model), data);
    }
});
