#![no_main]

use advfield::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&c.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), c.encode());
    }
});
