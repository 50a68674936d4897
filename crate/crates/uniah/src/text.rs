//! Shared text utilities: whitespace tokenization, answer normalization,
//! and a stable 64-bit hash used by the deterministic embedder.

/// Byte spans of whitespace-separated tokens.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Case-fold, replace punctuation with spaces, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in c.to_lowercase() {
                out.push(lc);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

/// Normalized substring containment: `needle` occurs in `haystack` after both
/// are normalized.
pub fn contains_normalized(haystack: &str, needle: &str) -> bool {
    let n = normalize(needle);
    if n.is_empty() {
        return false;
    }
    normalize(haystack).contains(&n)
}

/// FNV-1a, fixed parameters. Stable across runs and platforms, unlike the
/// std hasher which is randomly seeded per process.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_spans_basic() {
        assert_eq!(token_spans("one two  three"), vec![(0, 3), (4, 7), (9, 14)]);
        assert!(token_spans("   ").is_empty());
        assert!(token_spans("").is_empty());
    }

    #[test]
    fn normalize_folds_case_and_punctuation() {
        assert_eq!(normalize("Prosciutto, goat cheese, and FIGS!"), "prosciutto goat cheese and figs");
        assert_eq!(normalize("  --  "), "");
    }

    #[test]
    fn contains_normalized_is_order_sensitive_substring() {
        assert!(contains_normalized("The answer is: Goat Cheese.", "goat cheese"));
        assert!(!contains_normalized("cheese from a goat", "goat cheese"));
        assert!(!contains_normalized("anything", ""));
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), fnv1a64(b"a"));
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
