#![no_main]

use libfuzzer_sys::fuzz_target;
use mednca::datasets::ShiftSpec;
use mednca::tensor::{Shape, Tensor};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ShiftSpec::parse(text) {
        let img = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| (y * 8 + x) as f32 / 63.0);
        let out = spec.apply_image(&img, "fuzz");
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
