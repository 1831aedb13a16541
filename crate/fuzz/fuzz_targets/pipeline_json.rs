#![no_main]

use libfuzzer_sys::fuzz_target;
use tissueseg::augment::AugmentationPipeline;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = AugmentationPipeline::from_json(text);
    }
});
