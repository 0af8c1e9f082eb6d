#![no_main]

use std::path::Path;

use chuteflow::pipeline::parse_pipeline_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_pipeline_config(text, Path::new("config.json")) {
            let _ = cfg.resolved();
        }
    }
});
