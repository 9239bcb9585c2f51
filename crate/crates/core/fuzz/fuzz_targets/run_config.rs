#![no_main]

use advfield::cli::RunConfig;
use advfield::training::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml_over(&RunConfig::desk(), text) {
        let echoed = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_over(&RunConfig::default(), &echoed).unwrap(), cfg);
    }
    let _ = TrainConfig::from_toml(text);
});
