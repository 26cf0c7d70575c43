#![no_main]
use libfuzzer_sys::fuzz_target;

use esabre::data::Truth;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(truth) = Truth::parse(text) {
            assert_eq!(Truth::parse(&truth.to_json()).unwrap(), truth);
        }
    }
});
