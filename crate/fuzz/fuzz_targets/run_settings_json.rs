#![no_main]
use libfuzzer_sys::fuzz_target;

use esabre::sampler::SamplerConfig;
use esabre::Hyperparameters;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<SamplerConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(h) = serde_json::from_slice::<Hyperparameters>(data) {
        let _ = h.validate();
    }
});
