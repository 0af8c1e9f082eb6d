#![no_main]

use chuteflow::dataset::parse_stats;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = parse_stats(text) {
            s.validate().expect("parsed stats are valid");
        }
    }
});
