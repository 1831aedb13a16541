#![no_main]

use libfuzzer_sys::fuzz_target;
use ndarray::Array3;
use tissueseg::data::{encode_mask, ClassPalette};

// First two bytes pick the dimensions, the rest fills the RGB buffer.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let h = (data[0] % 32) as usize + 1;
    let w = (data[1] % 32) as usize + 1;
    let body = &data[2..];
    let color = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let idx = (y * w + x) * 3 + c;
        body.get(idx).copied().unwrap_or(0)
    });
    let _ = encode_mask(&color, &ClassPalette::default());
});
