#![no_main]

use libfuzzer_sys::fuzz_target;
use penspline::io::{read_dataset, write_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_dataset(data) {
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), ds);
    }
});
