#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune::model::Manifest;

// Input layout: manifest JSON, a zero byte, then the weight bytes.
fuzz_target!(|data: &[u8]| {
    let (head, weights) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    let Ok(text) = std::str::from_utf8(head) else {
        return;
    };
    if let Ok(m) = Manifest::parse("manifest.json", text) {
        if let Ok(tensors) = m.read_tensors("weights.bin", weights) {
            assert_eq!(tensors.len(), m.tensors.len());
        }
    }
});
