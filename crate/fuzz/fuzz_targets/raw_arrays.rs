#![no_main]

use chuteflow::archive::{decode_array, encode_array};
use chuteflow::binio::decode_u32;
use libfuzzer_sys::fuzz_target;

// First byte picks a row length; the rest is the raw block.
fuzz_target!(|data: &[u8]| {
    let Some((&cols, body)) = data.split_first() else { return };
    let cols = cols as usize + 1;
    let n = body.len() / 4;
    if let Ok(v) = decode_array(body, &[n / cols, cols]) {
        assert_eq!(encode_array(&v), body);
    }
    let _ = decode_u32(body);
});
