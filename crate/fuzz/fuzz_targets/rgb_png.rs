#![no_main]

use libfuzzer_sys::fuzz_target;
use std::io::Cursor;
use tissueseg::data::decode_rgb;

fuzz_target!(|data: &[u8]| {
    let _ = decode_rgb(Cursor::new(data));
});
