#![no_main]

use std::path::Path;

use chuteflow::archive::parse_run_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_run_manifest(text, Path::new("manifest.json"));
    }
});
