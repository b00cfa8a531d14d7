//! Word-level text normalization and n-gram set helpers shared by the corpus
//! and consistency modules.
//!
//! Every n-gram computation in the crate uses the same rule: lowercase the
//! text, then split on Unicode whitespace.

use std::collections::HashSet;

/// Lowercased whitespace tokens of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Distinct word n-grams of `tokens`, each n-gram joined by a single space.
///
/// Returns the empty set when `n == 0` or there are fewer than `n` tokens.
pub fn ngram_set<S: AsRef<str>>(tokens: &[S], n: usize) -> HashSet<String> {
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens
        .windows(n)
        .map(|w| {
            let mut gram = String::new();
            for (i, tok) in w.iter().enumerate() {
                if i > 0 {
                    gram.push(' ');
                }
                gram.push_str(tok.as_ref());
            }
            gram
        })
        .collect()
}

/// Word 3-gram shingles used for deduplication and leakage screening.
///
/// Texts shorter than three tokens become a single shingle of the whole
/// normalized text so that short identical queries still collide. Empty text
/// yields an empty set.
pub fn shingles3(text: &str) -> HashSet<String> {
    let toks = words(text);
    if toks.is_empty() {
        HashSet::new()
    } else if toks.len() < 3 {
        HashSet::from([toks.join(" ")])
    } else {
        ngram_set(&toks, 3)
    }
}

/// Jaccard index `|a ∩ b| / |a ∪ b|`; `None` when both sets are empty.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> Option<f64> {
    if a.is_empty() && b.is_empty() {
        return None;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|g| large.contains(*g)).count();
    let union = a.len() + b.len() - inter;
    Some(inter as f64 / union as f64)
}
