use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|selected ∩ annotated| / |selected|`.
pub fn image_precision(selected: &[usize], annotated: &[usize]) -> Result<f64> {
    let sel: HashSet<usize> = selected.iter().copied().collect();
    if sel.is_empty() {
        return Err(Error::Input("image precision needs at least one selected image".into()));
    }
    let ann: HashSet<usize> = annotated.iter().copied().collect();
    Ok(sel.intersection(&ann).count() as f64 / sel.len() as f64)
}

/// Best teacher relevance among the selected images.
pub fn msim_proxy(selected: &[usize], teacher_scores: &[f64]) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::Input("M_sim proxy needs at least one selected image".into()));
    }
    selected
        .iter()
        .map(|&i| {
            teacher_scores.get(i).copied().ok_or_else(|| {
                Error::Input(format!(
                    "selected image {i} but only {} scores",
                    teacher_scores.len()
                ))
            })
        })
        .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NovelNgrams {
    /// Distinct summary n-grams absent from the source.
    pub count: usize,
    /// Share of the reference's novel n-grams the summary also produced.
    pub recall: f64,
}

fn ngram_set<T: AsRef<str>>(tokens: &[T], n: usize) -> HashSet<Vec<&str>> {
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect())
        .collect()
}

pub fn novel_ngrams<T: AsRef<str>>(summary: &[T], source: &[T], reference: &[T], n: usize) -> NovelNgrams {
    let src = ngram_set(source, n);
    let novel_sum: HashSet<_> = ngram_set(summary, n).into_iter().filter(|g| !src.contains(g)).collect();
    let novel_ref: HashSet<_> = ngram_set(reference, n).into_iter().filter(|g| !src.contains(g)).collect();
    let recall = if novel_ref.is_empty() {
        0.0
    } else {
        novel_sum.intersection(&novel_ref).count() as f64 / novel_ref.len() as f64
    };
    NovelNgrams {
        count: novel_sum.len(),
        recall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn precision_examples() {
        assert_eq!(image_precision(&[0], &[0, 2]).unwrap(), 1.0);
        assert_eq!(image_precision(&[1], &[0, 2]).unwrap(), 0.0);
        assert_eq!(image_precision(&[0, 1, 3], &[1, 2, 3]).unwrap(), 2.0 / 3.0);
        assert!(image_precision(&[], &[1]).is_err());
    }

    #[test]
    fn msim_examples() {
        assert_eq!(msim_proxy(&[1], &[0.3, 0.6]).unwrap(), 0.6);
        assert_eq!(msim_proxy(&[1, 1], &[0.3, 0.6]).unwrap(), msim_proxy(&[1], &[0.3, 0.6]).unwrap());
        assert_eq!(msim_proxy(&[0, 1], &[0.1, 0.9]).unwrap(), 0.9);
        assert!(msim_proxy(&[], &[0.1]).is_err());
    }

    #[test]
    fn novel_examples() {
        let src = t("a b c");
        assert_eq!(novel_ngrams(&t("a b"), &src, &t("a d"), 1).count, 0);
        let r = t("a d");
        assert_eq!(novel_ngrams(&r, &src, &r, 1).recall, 1.0);
        let out = novel_ngrams(&t("b d"), &src, &t("a d"), 1);
        assert_eq!(out, NovelNgrams { count: 1, recall: 1.0 });
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.9, 0.1], 2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn k1_precision_is_argmax_indicator(scores in prop::collection::vec(-5.0f64..5.0, 1..8), ann in prop::collection::hash_set(0usize..8, 0..4)) {
            let ann: Vec<usize> = ann.into_iter().collect();
            let top = top_k_indices(&scores, 1);
            let ip = image_precision(&top, &ann).unwrap();
            prop_assert_eq!(ip, if ann.contains(&top[0]) { 1.0 } else { 0.0 });
        }

        #[test]
        fn substring_has_no_novel_ngrams(src in prop::collection::vec(0u8..6, 1..15), a in 0usize..15, len in 0usize..15, n in 1usize..5) {
            let src: Vec<String> = src.iter().map(|x| x.to_string()).collect();
            let a = a.min(src.len());
            let b = (a + len).min(src.len());
            let sum = src[a..b].to_vec();
            prop_assert_eq!(novel_ngrams(&sum, &src, &src, n).count, 0);
        }
    }
}
