use crate::error::{Error, Result};

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over the reference length; may exceed 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::config("word error rate needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Lowercased whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        sub.min(brute(&a[1..], b) + 1).min(brute(a, &b[1..]) + 1)
    }

    #[test]
    fn hand_cases() {
        let t = |s: &str| tokens(s);
        assert_eq!(wer(&t("a b c"), &t("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&t("a b c"), &t("a x c")).unwrap(), 1.0 / 3.0);
        assert_eq!(wer(&t("a"), &t("a b b")).unwrap(), 2.0);
        assert_eq!(wer(&t("Bin Blue"), &t("bin blue")).unwrap(), 0.0);
        assert!(wer::<String>(&[], &t("a")).is_err());
    }

    proptest! {
        #[test]
        fn matches_recursive_oracle(a in prop::collection::vec(0u8..4, 0..6), b in prop::collection::vec(0u8..4, 0..6)) {
            prop_assert_eq!(edit_distance(&a, &b), brute(&a, &b));
        }

        #[test]
        fn triangle_inequality(
            a in prop::collection::vec(0u8..3, 0..8),
            b in prop::collection::vec(0u8..3, 0..8),
            c in prop::collection::vec(0u8..3, 0..8),
        ) {
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        }
    }
}
