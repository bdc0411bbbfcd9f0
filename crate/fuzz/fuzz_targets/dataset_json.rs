#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune::data::parse_dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Accepted datasets must survive a write and re-read unchanged.
    if let Ok(ds) = parse_dataset("fuzz.json", text) {
        let again = parse_dataset("fuzz.json", &ds.to_json()).expect("serialized dataset parses");
        assert_eq!(ds, again);
    }
});
