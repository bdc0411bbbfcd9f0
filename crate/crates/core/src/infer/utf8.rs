/// Incremental UTF-8 decoder. Emits only complete characters; an incomplete
/// trailing sequence is held back until more bytes arrive. Invalid bytes
/// become U+FFFD.
#[derive(Clone, Debug, Default)]
pub struct Utf8StreamDecoder {
    pending: Vec<u8>,
}

impl Utf8StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> String {
        self.pending.extend_from_slice(bytes);
        let mut out = String::new();
        let mut rest: &[u8] = &self.pending;
        loop {
            match std::str::from_utf8(rest) {
                Ok(s) => {
                    out.push_str(s);
                    rest = &[];
                    break;
                }
                Err(e) => {
                    let (valid, tail) = rest.split_at(e.valid_up_to());
                    out.push_str(std::str::from_utf8(valid).expect("validated prefix"));
                    match e.error_len() {
                        Some(n) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            rest = &tail[n..];
                        }
                        None => {
                            rest = tail;
                            break;
                        }
                    }
                }
            }
        }
        self.pending = rest.to_vec();
        out
    }

    /// Bytes currently withheld.
    pub fn pending(&self) -> &[u8] {
        &self.pending
    }

    /// Ends the stream, discarding any incomplete character.
    pub fn finish(&mut self) {
        self.pending.clear();
    }
}

/// Decodes a whole byte string exactly as a stream would.
pub fn decode_complete(bytes: &[u8]) -> String {
    Utf8StreamDecoder::new().push(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn withholds_split_characters() {
        let bytes = "aé€😀".as_bytes();
        let mut d = Utf8StreamDecoder::new();
        let out: Vec<String> = bytes.iter().map(|b| d.push(&[*b])).collect();
        assert_eq!(out.concat(), "aé€😀");
        assert_eq!(out[1], "");
        assert_eq!(out[2], "é");
        assert!(d.pending().is_empty());
    }

    #[test]
    fn invalid_bytes_are_replaced() {
        assert_eq!(decode_complete(b"a\xffb"), "a\u{FFFD}b");
        assert_eq!(decode_complete(b"\xe2\x28\xa1"), "\u{FFFD}(\u{FFFD}");
    }

    #[test]
    fn incomplete_tail_is_dropped() {
        assert_eq!(decode_complete(b"ok\xe2\x82"), "ok");
        let mut d = Utf8StreamDecoder::new();
        d.push(b"\xf0\x9f");
        assert_eq!(d.pending().len(), 2);
        d.finish();
        assert_eq!(d.push(b"x"), "x");
    }
}
