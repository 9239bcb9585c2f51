#![no_main]

use advfield::scene_io::{decode_depth, encode_depth};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (w, h) = (data[0] as usize, data[1] as usize);
    if let Ok(d) = decode_depth(&data[2..], w, h) {
        assert_eq!(encode_depth(&d), &data[2..]);
    }
});
