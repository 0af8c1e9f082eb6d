#![no_main]

use chuteflow::nets::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&m)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.values.len(), m.values.len());
    }
});
