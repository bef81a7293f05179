//! Stable content-derived identifiers.
//!
//! Ids hash whitespace-normalized, case-preserved text, so the same fact
//! gets the same id in every process and file.

use sha2::{Digest, Sha256};

/// Collapses internal whitespace runs to single spaces and trims the ends.
/// Case is preserved ("PersonX" is case-meaningful).
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 64-bit hex id over the normalized parts, separated by an unprintable byte
/// so ("a b", "c") and ("a", "b c") never collide.
pub fn content_id(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(normalize_ws(part).as_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_under_whitespace_noise() {
        let a = content_id(&["PersonX buys  a coffee", "xNeed", " money "]);
        let b = content_id(&["PersonX buys a coffee", "xNeed", "money"]);
        assert_eq!(a, b);
    }

    #[test]
    fn ids_are_case_sensitive_and_field_separated() {
        assert_ne!(content_id(&["personx", "r", "t"]), content_id(&["PersonX", "r", "t"]));
        assert_ne!(content_id(&["a b", "c"]), content_id(&["a", "b c"]));
    }
}
