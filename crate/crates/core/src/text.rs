//! Tokenization shared by feeds, queries and pools.

/// Strips leading and trailing punctuation and drops control characters.
///
/// Internal hyphens and apostrophes survive, so `"Jean-Luc's,"` becomes
/// `"Jean-Luc's"`. Returns `None` when nothing alphanumeric remains.
pub fn normalize_token(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        return None;
    }
    let cleaned: String = trimmed.chars().filter(|c| !c.is_control()).collect();
    if cleaned.is_empty() {
        None
    } else {
        Some(cleaned)
    }
}

/// Splits on Unicode whitespace and normalizes each word.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_token).collect()
}

/// Case-folded key used for term lookups.
pub fn fold(term: &str) -> String {
    term.to_lowercase()
}

pub fn has_uppercase(word: &str) -> bool {
    word.chars().any(char::is_uppercase)
}
