#![no_main]

use libfuzzer_sys::fuzz_target;
use penspline::simulate::{generate, DgpSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(mut dgp) = DgpSpec::from_toml(text) {
        // keep generation cheap
        dgp.n = dgp.n.min(64);
        let _ = generate(&dgp);
    }
});
