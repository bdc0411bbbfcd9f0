#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse("c.json", text) {
        let again = RunConfig::parse("c.json", &cfg.to_json()).expect("resolved config parses");
        assert_eq!(again.to_json(), cfg.to_json());
    }
});
