#![no_main]

use advfield::image::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(im) = Image::decode_png(data) {
        let bytes = im.encode_png16();
        let again = Image::decode_png(&bytes).expect("re-encoded image decodes");
        assert_eq!(again.encode_png16(), bytes);
    }
});
