#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune::data::{parse_file, preferences_to_json, FileRecords};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(FileRecords::Preference(pairs)) = parse_file("prefs.json", text) {
        let again = parse_file("prefs.json", &preferences_to_json(&pairs)).expect("serialized pairs parse");
        assert_eq!(again, FileRecords::Preference(pairs));
    }
});
