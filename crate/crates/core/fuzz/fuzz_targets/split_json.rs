#![no_main]

use advfield::scene_io::decode_split;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(split) = decode_split(text) {
        assert_eq!(decode_split(&serde_json::to_string(&split).unwrap()).unwrap(), split);
    }
});
