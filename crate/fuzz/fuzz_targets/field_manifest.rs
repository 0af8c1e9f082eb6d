#![no_main]

use std::path::Path;

use chuteflow::archive::parse_field_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = parse_field_manifest(text, Path::new("manifest.json")) {
            for a in &m.arrays {
                assert!(!a.file.contains('/') && !a.file.contains(".."));
            }
        }
    }
});
