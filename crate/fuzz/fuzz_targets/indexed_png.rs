#![no_main]

use libfuzzer_sys::fuzz_target;
use std::io::Cursor;
use tissueseg::data::decode_indexed;

fuzz_target!(|data: &[u8]| {
    let _ = decode_indexed(Cursor::new(data));
});
