//! Text normalization and tokenization shared by embedding, reranking,
//! label matching and the agent policy.

use unicode_normalization::UnicodeNormalization;

/// Unicode NFC, ASCII lowercase, whitespace runs collapsed to one space,
/// trimmed at both ends.
pub fn normalize(text: &str) -> String {
    let composed: String = text.nfc().collect();
    let mut out = String::with_capacity(composed.len());
    let mut pending_space = false;
    for ch in composed.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(ch.to_ascii_lowercase());
    }
    out
}

/// Maximal runs of alphanumeric characters of the normalized text.
pub fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Number of tokens in `text`.
pub fn token_count(text: &str) -> usize {
    tokens(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_lowercases() {
        assert_eq!(normalize("  Left\tEYE \n  closes "), "left eye closes");
        // non-ASCII letters keep their case
        assert_eq!(normalize("ÉCHO"), "Écho");
    }

    #[test]
    fn composes_to_nfc() {
        let decomposed = "e\u{301}";
        assert_eq!(normalize(decomposed), "\u{e9}");
    }

    #[test]
    fn tokens_split_on_punctuation() {
        assert_eq!(tokens("X-ray: left lung."), vec!["x", "ray", "left", "lung"]);
        assert!(tokens("  ...  ").is_empty());
    }
}
