//! Shared text normalization used by corpus preprocessing and the metrics.

/// Lowercases, splits on whitespace and strips leading/trailing ASCII or
/// Unicode punctuation from every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let tok = raw
                .trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c))
                .to_lowercase();
            (!tok.is_empty()).then_some(tok)
        })
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
    )
}

/// Collapses runs of whitespace into single spaces and trims both ends.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_edge_punctuation_only() {
        assert_eq!(
            tokenize("  Lungs are CLEAR.  No (acute) x-ray  findings, "),
            vec!["lungs", "are", "clear", "no", "acute", "x-ray", "findings"]
        );
    }

    #[test]
    fn punctuation_only_tokens_vanish() {
        assert_eq!(tokenize(". , --- the"), vec!["the"]);
        assert!(tokenize("   ").is_empty());
    }
}
