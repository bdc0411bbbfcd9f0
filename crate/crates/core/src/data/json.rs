//! JSON helpers shared by the file loaders.

/// Blanks out trailing commas (a comma whose next significant byte closes an
/// array or object) so that hand-written listings parse as strict JSON.
///
/// Commas are replaced by spaces, so byte offsets in the result match the input.
pub fn blank_trailing_commas(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = bytes.to_vec();
    let mut in_string = false;
    let mut escaped = false;
    let mut last_significant: Option<u8> = None;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
                last_significant = Some(b'"');
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b',' => {
                let next = bytes[i + 1..].iter().find(|c| !c.is_ascii_whitespace());
                let closes = matches!(next, Some(b']') | Some(b'}'));
                let after_value = !matches!(last_significant, None | Some(b'[' | b'{' | b','));
                if closes && after_value {
                    out[i] = b' ';
                    continue;
                }
                last_significant = Some(b);
            }
            c if c.is_ascii_whitespace() => {}
            c => last_significant = Some(c),
        }
    }
    // Only ASCII commas were replaced by ASCII spaces.
    String::from_utf8(out).expect("replacement preserves UTF-8")
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
pub fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_commas_are_blanked() {
        let src = "{\"a\": [1, 2,], \"b\": {\"c\": \"x,]\",},}";
        let clean = blank_trailing_commas(src);
        assert_eq!(clean.len(), src.len());
        let v: serde_json::Value = serde_json::from_str(&clean).unwrap();
        assert_eq!(v["b"]["c"], "x,]");
        assert_eq!(v["a"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn leading_or_doubled_commas_stay_invalid() {
        assert!(serde_json::from_str::<serde_json::Value>(&blank_trailing_commas("[,]")).is_err());
        assert!(serde_json::from_str::<serde_json::Value>(&blank_trailing_commas("[1,,]")).is_err());
        assert!(serde_json::from_str::<serde_json::Value>(&blank_trailing_commas("{,}")).is_err());
    }

    #[test]
    fn offsets_follow_lines() {
        let text = "ab\ncd\nef";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 3), 8);
        assert_eq!(byte_offset(text, 9, 9), 8);
    }
}
