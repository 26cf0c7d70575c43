#![no_main]
use libfuzzer_sys::fuzz_target;

use esabre::simulate::ScenarioSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = serde_json::from_slice::<ScenarioSpec>(data) {
        if spec.validate().is_ok() {
            let back: ScenarioSpec = serde_json::from_str(&spec.to_json()).unwrap();
            assert!(back.validate().is_ok());
        }
    }
});
