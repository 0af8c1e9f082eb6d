#![no_main]

use chuteflow::dataset::parse_split;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = parse_split(text) {
            s.validate().expect("parsed split is valid");
        }
    }
});
