#![no_main]
use libfuzzer_sys::fuzz_target;

use esabre::data::{parse_design, write_design};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(design) = parse_design(text) {
        assert_eq!(parse_design(&write_design(&design)).unwrap(), design);
    }
});
