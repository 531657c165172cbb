#![no_main]

use bevcollab::config::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ScenarioConfig::from_toml_str(text) {
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string()).expect("printed config parses");
        assert_eq!(again, cfg);
    }
});
