//! Closed-vocabulary word tokenizer shared by prompts, questions, captions
//! and answers. Integers are spelled digit by digit.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;

/// Largest symbol alphabet the vocabulary can spell.
pub const MAX_SYMBOLS: usize = 26;
/// Number of time-bucket answer tokens.
pub const MAX_BUCKETS: usize = 8;

const WORDS: &[&str] = &[
    "This", "contains", "a", "history", "of", "to", "seconds", ",", "and", "clip", "sampled",
    "in", ".", "is", "What", "symbol", "appears", "from", "?", "When", "does", "appear", "How",
    "many", "distinct", "symbols", "The", "shows", "nothing", "none", "video",
];

struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

fn vocab() -> &'static Vocab {
    static V: OnceLock<Vocab> = OnceLock::new();
    V.get_or_init(|| {
        let mut tokens: Vec<String> = vec!["<pad>".into(), "<eos>".into()];
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(WORDS.iter().map(|w| w.to_string()));
        tokens.extend((0..MAX_SYMBOLS).map(|i| symbol_name(i).to_string()));
        tokens.extend((0..MAX_BUCKETS).map(|b| format!("<b{b}>")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    })
}

fn symbol_name(i: usize) -> String {
    char::from(b'A' + i as u8).to_string()
}

pub fn vocab_size() -> usize {
    vocab().tokens.len()
}

pub fn token_id(word: &str) -> Result<TokenId> {
    vocab()
        .index
        .get(word)
        .copied()
        .ok_or_else(|| Error::invalid(format!("`{word}` is not in the vocabulary")))
}

pub fn token_str(id: TokenId) -> Result<&'static str> {
    vocab()
        .tokens
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| Error::invalid(format!("token id {id} outside the vocabulary")))
}

/// Token for symbol `i` of the alphabet (`0 -> "A"`).
pub fn symbol_token(i: usize) -> TokenId {
    assert!(i < MAX_SYMBOLS, "symbol index {i} out of range");
    12 + WORDS.len() + i
}

pub fn symbol_of_token(t: TokenId) -> Option<usize> {
    let base = symbol_token(0);
    (base..base + MAX_SYMBOLS).contains(&t).then(|| t - base)
}

pub fn bucket_token(b: usize) -> TokenId {
    assert!(b < MAX_BUCKETS, "bucket {b} out of range");
    12 + WORDS.len() + MAX_SYMBOLS + b
}

pub fn digit_token(d: usize) -> TokenId {
    assert!(d < 10);
    2 + d
}

fn is_punct(s: &str) -> bool {
    matches!(s, "," | "." | "?")
}

fn is_digit_token(s: &str) -> bool {
    s.len() == 1 && s.as_bytes()[0].is_ascii_digit()
}

/// Splits on whitespace, peels trailing punctuation, and spells integers
/// digit by digit.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut core = word;
        let mut tail = Vec::new();
        while let Some(last) = core.chars().last() {
            if core.len() > 1 && is_punct(&last.to_string()) {
                tail.push(last.to_string());
                core = &core[..core.len() - 1];
            } else {
                break;
            }
        }
        if !core.is_empty() && core.bytes().all(|b| b.is_ascii_digit()) {
            for c in core.chars() {
                out.push(token_id(&c.to_string())?);
            }
        } else {
            out.push(token_id(core)?);
        }
        for p in tail.iter().rev() {
            out.push(token_id(p)?);
        }
    }
    Ok(out)
}

/// Inverse of [`tokenize`] for well-formed token streams.
pub fn detokenize(tokens: &[TokenId]) -> Result<String> {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &t in tokens {
        let s = token_str(t)?;
        let glue = match prev {
            None => false,
            Some(p) => is_punct(s) || (is_digit_token(s) && is_digit_token(p)),
        };
        if prev.is_some() && !glue {
            out.push(' ');
        }
        out.push_str(s);
        prev = Some(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_template_text() {
        for text in [
            "This contains a history of 0 to 16 seconds, and a clip sampled in 16 to 32 seconds.",
            "This clip is sampled in 0 to 16 seconds.",
            "What symbol appears from 104 to 120 seconds?",
        ] {
            let toks = tokenize(text).unwrap();
            assert_eq!(detokenize(&toks).unwrap(), text);
        }
    }

    #[test]
    fn integers_are_digit_tokens() {
        let toks = tokenize("to 120 seconds").unwrap();
        assert_eq!(toks.len(), 5);
        assert_eq!(&toks[1..4], &[digit_token(1), digit_token(2), digit_token(0)]);
    }

    #[test]
    fn symbol_and_bucket_ids() {
        assert_eq!(token_str(symbol_token(1)).unwrap(), "B");
        assert_eq!(symbol_of_token(symbol_token(7)), Some(7));
        assert_eq!(symbol_of_token(EOS), None);
        assert_eq!(token_str(bucket_token(3)).unwrap(), "<b3>");
        assert_eq!(token_str(digit_token(4)).unwrap(), "4");
        assert_eq!(bucket_token(MAX_BUCKETS - 1) + 1, vocab_size());
    }

    #[test]
    fn unknown_words_are_rejected() {
        assert!(tokenize("banana").is_err());
        assert!(token_str(vocab_size()).is_err());
    }
}
