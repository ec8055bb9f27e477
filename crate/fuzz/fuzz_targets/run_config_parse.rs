#![no_main]

use libfuzzer_sys::fuzz_target;
use mednca::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let back = RunConfig::parse(&cfg.to_json()).expect("echoed config parses");
        assert_eq!(back, cfg);
    }
});
