//! Reversible tokenizer splitting text into alphanumeric and
//! non-alphanumeric runs.
//!
//! Rules:
//! - the text is cut wherever `char::is_alphanumeric` flips;
//! - a run that is exactly one space, with tokens on both sides, is dropped;
//! - [`detokenize`] puts one space back between two adjacent tokens whose
//!   touching characters are both alphanumeric.
//!
//! Since runs alternate, two alphanumeric tokens can only be adjacent when a
//! single space was dropped between them, which makes the mapping invertible.

use crate::error::{Error, Result};

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lower-cases text the way every corpus is normalised before tokenization.
pub fn normalize(text: &str) -> String {
    text.to_lowercase()
}

pub fn group_tokenize(text: &str) -> Result<Vec<String>> {
    if let Some(c) = text.chars().find(|c| c.is_control()) {
        return Err(Error::Input(format!("control character {c:?} in text")));
    }
    let mut runs: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut current_word = false;
    for c in text.chars() {
        let w = is_word_char(c);
        if !current.is_empty() && w != current_word {
            runs.push(std::mem::take(&mut current));
        }
        current_word = w;
        current.push(c);
    }
    if !current.is_empty() {
        runs.push(current);
    }
    let last = runs.len().saturating_sub(1);
    Ok(runs
        .into_iter()
        .enumerate()
        .filter(|(i, r)| !(r == " " && *i != 0 && *i != last))
        .map(|(_, r)| r)
        .collect())
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_word_end = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let Some(first) = tok.chars().next() else {
            continue;
        };
        if prev_word_end && is_word_char(first) {
            out.push(' ');
        }
        out.push_str(tok);
        prev_word_end = tok.chars().last().is_some_and(is_word_char);
    }
    out
}
