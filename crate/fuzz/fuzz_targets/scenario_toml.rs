#![no_main]

use libfuzzer_sys::fuzz_target;
use penspline::harness::ScenarioSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = ScenarioSpec::from_toml(text) {
        let again = ScenarioSpec::from_toml(&spec.to_toml().unwrap()).unwrap();
        assert_eq!(again.to_toml().unwrap(), spec.to_toml().unwrap());
        for &n in &spec.n_grid {
            let _ = spec.knot_count(n);
        }
    }
});
