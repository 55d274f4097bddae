//! Byte-level tokenizer for demo prompts: byte `b` is token `b`.

use std::fmt::Write;

use dllm_cache::TokenId;

/// Ids 0..256 are bytes.
pub const BYTE_VOCAB: usize = 256;
pub const MASK_ID: TokenId = 256;
pub const PAD_ID: TokenId = 257;
/// Smallest vocabulary the tokenizer can feed.
pub const MIN_VOCAB: usize = 258;

pub fn tokenize_bytes(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize_bytes`] for valid UTF-8. Reserved and
/// out-of-range ids render as `<mask>`, `<pad>` or `<id:N>`, and bytes that
/// do not form UTF-8 as `\xNN`.
pub fn detokenize(ids: &[TokenId]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &id in ids {
        if (id as usize) < BYTE_VOCAB {
            bytes.push(id as u8);
            continue;
        }
        flush(&mut bytes, &mut out);
        match id {
            MASK_ID => out.push_str("<mask>"),
            PAD_ID => out.push_str("<pad>"),
            _ => write!(out, "<id:{id}>").unwrap(),
        }
    }
    flush(&mut bytes, &mut out);
    out
}

fn flush(bytes: &mut Vec<u8>, out: &mut String) {
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        for b in chunk.invalid() {
            write!(out, "\\x{b:02x}").unwrap();
        }
    }
    bytes.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(tokenize_bytes("AB"), vec![65, 66]);
        assert!(tokenize_bytes("").is_empty());
        assert_eq!(detokenize(&[]), "");
        for s in ["hello, world", "a\nb\tc", "~!@#$%^&*()"] {
            assert_eq!(detokenize(&tokenize_bytes(s)), s);
        }
        assert_eq!(detokenize(&tokenize_bytes("héllo ✓")), "héllo ✓");
    }

    #[test]
    fn reserved_and_invalid_ids_are_escaped() {
        assert_eq!(detokenize(&[72, 256, 105, 257, 300]), "H<mask>i<pad><id:300>");
        assert_eq!(detokenize(&[0xff, 65, 0xc3]), "\\xffA\\xc3");
        // A multi-byte char split by a reserved id is not valid on either side.
        assert_eq!(detokenize(&[0xc3, 256, 0xa9]), "\\xc3<mask>\\xa9");
    }
}
