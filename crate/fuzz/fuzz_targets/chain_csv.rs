#![no_main]
use libfuzzer_sys::fuzz_target;

// Chain files are read back by `diagnose` and `combine`; any input must give
// an error or a table whose rows all have the header's shape.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((iters, states)) = esabre::sampler::parse_chain_csv(text) {
        assert_eq!(iters.len(), states.len());
        if let Some(first) = states.first() {
            for s in &states {
                assert_eq!(s.gamma.len(), first.gamma.len());
                assert_eq!(s.mu_y.len(), first.mu_y.len());
                assert_eq!(s.b.len(), first.b.len());
            }
        }
    }
});
