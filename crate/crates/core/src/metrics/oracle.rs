use serde::{Deserialize, Serialize};

use super::rouge::rouge_l;

/// Greedily selected oracle sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabels {
    /// Sentence indices in the order they were picked.
    pub selected: Vec<usize>,
    /// ROUGE-L F1 of the selection after each pick; strictly increasing.
    pub trace: Vec<f64>,
    /// Nothing overlapped the reference.
    pub degenerate: bool,
}

impl OracleLabels {
    /// 0/1 label per sentence.
    pub fn labels(&self, n_sentences: usize) -> Vec<f64> {
        let mut l = vec![0.0; n_sentences];
        for &i in &self.selected {
            if i < n_sentences {
                l[i] = 1.0;
            }
        }
        l
    }

    pub fn final_score(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }
}

/// Concatenation of the chosen sentences in document order.
pub fn concat_in_order<'a, T>(sentences: &'a [Vec<T>], chosen: &[usize]) -> Vec<&'a T> {
    let mut idx = chosen.to_vec();
    idx.sort_unstable();
    idx.iter().flat_map(|&i| sentences[i].iter()).collect()
}

/// Adds, one at a time, the sentence that most improves ROUGE-L F1 of the
/// selection against `reference`; lowest index wins ties; stops as soon as
/// no sentence improves the score.
pub fn greedy_oracle<T: AsRef<str>>(sentences: &[Vec<T>], reference: &[T]) -> OracleLabels {
    let mut selected: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut best = 0.0;
    let reference: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    loop {
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..sentences.len() {
            if selected.contains(&i) {
                continue;
            }
            let mut trial = selected.clone();
            trial.push(i);
            let cand: Vec<&str> = concat_in_order(sentences, &trial)
                .into_iter()
                .map(AsRef::as_ref)
                .collect();
            let score = rouge_l(&cand, &reference).f1;
            if score > pick.map_or(best, |(_, s)| s) {
                pick = Some((i, score));
            }
        }
        match pick {
            Some((i, s)) => {
                selected.push(i);
                trace.push(s);
                best = s;
            }
            None => break,
        }
    }
    if selected.is_empty() {
        log::warn!("oracle: no sentence overlaps the reference");
    }
    OracleLabels {
        degenerate: selected.is_empty(),
        selected,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(ss: &[&str]) -> Vec<Vec<String>> {
        ss.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn reference_equal_to_one_sentence() {
        let s = sents(&["x y", "q r", "a b c", "m"]);
        let r: Vec<String> = s[2].clone();
        let o = greedy_oracle(&s, &r);
        assert_eq!(o.selected, vec![2]);
        assert_eq!(o.trace, vec![1.0]);
    }

    #[test]
    fn disjoint_is_degenerate() {
        let s = sents(&["x y", "q r"]);
        let r: Vec<String> = vec!["a".into()];
        let o = greedy_oracle(&s, &r);
        assert!(o.selected.is_empty() && o.degenerate);
    }

    #[test]
    fn selection_concatenates_in_document_order() {
        let s = sents(&["a b", "c d", "e f"]);
        let r: Vec<String> = "a b e f".split(' ').map(String::from).collect();
        let o = greedy_oracle(&s, &r);
        let mut sel = o.selected.clone();
        sel.sort();
        assert_eq!(sel, vec![0, 2]);
        assert_eq!(o.final_score(), 1.0);
        assert!(o.trace.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(o.labels(3), vec![1.0, 0.0, 1.0]);
    }
}
