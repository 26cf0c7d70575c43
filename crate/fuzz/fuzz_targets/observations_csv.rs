#![no_main]
use libfuzzer_sys::fuzz_target;

use esabre::data::{parse_observations, write_observations};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_observations(text) {
        let again = parse_observations(&write_observations(&table)).expect("rewritten table parses");
        assert_eq!(table, again);
    }
});
