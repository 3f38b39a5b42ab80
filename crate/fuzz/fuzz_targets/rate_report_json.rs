#![no_main]

use libfuzzer_sys::fuzz_target;
use penspline::harness::{write_summary, RateReport};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = RateReport::from_json(text) {
        let json = report.to_json().unwrap();
        let again = RateReport::from_json(&json).unwrap();
        assert_eq!(again.to_json().unwrap(), json);
        write_summary(&[report], std::io::sink()).unwrap();
    }
});
