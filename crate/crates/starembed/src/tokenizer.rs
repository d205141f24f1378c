//! Byte-level tokenizer.
//!
//! Every UTF-8 byte maps to its own id (0-255) and a single end-of-sequence
//! token (id 256) terminates each segment. No vocabulary files, no merges:
//! tokenization is total and deterministic for arbitrary input.

/// End-of-sequence token id (first id past the 256 byte values).
pub const EOS_TOKEN: u16 = 256;

/// Number of token ids the model must cover: 256 bytes + EOS.
pub const VOCAB_SIZE: usize = 257;

/// Tokenize text into byte ids followed by EOS. Never returns an empty list.
pub fn tokenize(text: &str) -> Vec<u16> {
    let mut tokens: Vec<u16> = text.bytes().map(u16::from).collect();
    tokens.push(EOS_TOKEN);
    tokens
}

/// Token count of `text` without allocating the id list.
pub fn token_count(text: &str) -> usize {
    text.len() + 1
}

/// Truncate a token sequence to at most `budget` tokens, keeping the head and
/// re-appending EOS as the last kept token.
pub fn truncate_tail(tokens: &[u16], budget: usize) -> Vec<u16> {
    if tokens.len() <= budget {
        return tokens.to_vec();
    }
    let mut kept = tokens[..budget.saturating_sub(1)].to_vec();
    kept.push(EOS_TOKEN);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_eos_only() {
        assert_eq!(tokenize(""), vec![256]);
    }

    #[test]
    fn ascii_byte_value() {
        assert_eq!(tokenize("A"), vec![65, 256]);
    }

    #[test]
    fn multibyte_utf8_decomposes() {
        // "é" is 0xC3 0xA9 in UTF-8
        assert_eq!(tokenize("é"), vec![195, 169, 256]);
    }

    #[test]
    fn token_count_matches() {
        for text in ["", "A", "é", "hello world"] {
            assert_eq!(token_count(text), tokenize(text).len());
        }
    }

    #[test]
    fn truncate_keeps_eos_last() {
        let toks = tokenize("abcdef"); // 7 tokens
        let cut = truncate_tail(&toks, 4);
        assert_eq!(cut, vec![b'a' as u16, b'b' as u16, b'c' as u16, 256]);
        // short enough: untouched
        assert_eq!(truncate_tail(&toks, 10), toks);
        assert_eq!(truncate_tail(&toks, 7), toks);
    }
}
