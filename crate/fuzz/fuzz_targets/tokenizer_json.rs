#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune::data::Tokenizer;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(tok) = Tokenizer::from_json(text) else {
        return;
    };
    let again = Tokenizer::from_json(&tok.to_json()).expect("serialized tokenizer parses");
    assert_eq!(again.to_json(), tok.to_json());
    let sample = "fuzzed tokenizers still encode: é ✓";
    assert_eq!(tok.decode(&tok.encode(sample)), sample);
});
