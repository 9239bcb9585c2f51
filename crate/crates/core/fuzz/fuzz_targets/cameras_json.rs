#![no_main]

use advfield::scene_io::{decode_cameras, record_camera};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(file) = decode_cameras(text) {
        for c in &file.cameras {
            let _ = record_camera(c);
        }
        let back = serde_json::to_string(&file).unwrap();
        assert_eq!(decode_cameras(&back).unwrap(), file);
    }
});
