#![no_main]

use libfuzzer_sys::fuzz_target;
use tinytune::infer::{decode_complete, Utf8StreamDecoder};

// The first byte picks chunk sizes; the rest is the byte stream.
fuzz_target!(|data: &[u8]| {
    let Some((&sizes, bytes)) = data.split_first() else {
        return;
    };
    let mut dec = Utf8StreamDecoder::new();
    let mut out = String::new();
    let mut rest = bytes;
    let mut i = 0u32;
    while !rest.is_empty() {
        let n = (((sizes as u32).rotate_left(i) % 5) as usize + 1).min(rest.len());
        out.push_str(&dec.push(&rest[..n]));
        assert!(dec.pending().len() < 4);
        rest = &rest[n..];
        i += 1;
    }
    assert_eq!(out, decode_complete(bytes));
});
