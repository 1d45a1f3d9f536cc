//! Scoring of prediction files against a dataset.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unims::data::MultimodalDocument;
use unims::inference::Prediction;
use unims::metrics::oracle::concat_in_order;
use unims::metrics::{image_precision, novel_ngrams, rouge_l, rouge_n};
use unims::teacher::{msim_with_teacher, Teacher};
use unims::{Error, Result};

/// ROUGE-1/2/L F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

impl Rouge {
    pub fn score<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> Self {
        Self {
            r1: rouge_n(candidate, reference, 1).f1,
            r2: rouge_n(candidate, reference, 2).f1,
            rl: rouge_l(candidate, reference).f1,
        }
    }

    fn mean<'a>(items: impl Iterator<Item = &'a Rouge>) -> Self {
        let (mut acc, mut n) = (Rouge::default(), 0.0);
        for r in items {
            acc.r1 += r.r1;
            acc.r2 += r.r2;
            acc.rl += r.rl;
            n += 1.0;
        }
        if n > 0.0 {
            acc.r1 /= n;
            acc.r2 /= n;
            acc.rl /= n;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub id: String,
    pub abstractive: Rouge,
    pub extractive: Rouge,
    /// Absent when the document has no annotated images or none was selected.
    pub ip: Option<f64>,
    pub msim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub documents: usize,
    pub abstractive: Rouge,
    pub extractive: Rouge,
    pub ip: Option<f64>,
    /// Documents that contributed to `ip`.
    pub ip_documents: usize,
    pub msim: Option<f64>,
    pub msim_documents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileReport {
    pub file: String,
    pub summary: Summary,
    pub examples: Vec<ExampleScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub teacher: String,
    /// Unweighted mean of the per-file summaries.
    pub mean: Summary,
    pub files: Vec<FileReport>,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        (None, 0)
    } else {
        (Some(v.iter().sum::<f64>() / v.len() as f64), v.len())
    }
}

pub fn lookup<'a>(docs: &'a HashMap<&str, &MultimodalDocument>, id: &str) -> Result<&'a MultimodalDocument> {
    docs.get(id)
        .copied()
        .ok_or_else(|| Error::Lookup(format!("prediction for unknown document '{id}'")))
}

pub fn score_example(doc: &MultimodalDocument, pred: &Prediction, teacher: &dyn Teacher) -> Result<ExampleScores> {
    if let Some(&bad) = pred.extractive.iter().find(|&&i| i >= doc.sentences.len()) {
        return Err(Error::Input(format!(
            "{}: extractive index {bad} but {} sentences",
            pred.id,
            doc.sentences.len()
        )));
    }
    if let Some(&bad) = pred.images.iter().find(|&&i| i >= doc.images.len()) {
        return Err(Error::Input(format!("{}: image index {bad} but {} images", pred.id, doc.images.len())));
    }
    let ext: Vec<&String> = concat_in_order(&doc.sentences, &pred.extractive);
    let reference: Vec<&String> = doc.summary.iter().collect();
    let ip = match (&doc.image_refs, pred.images.is_empty()) {
        (Some(refs), false) => Some(image_precision(&pred.images, refs)?),
        _ => None,
    };
    let msim = if pred.images.is_empty() {
        None
    } else {
        Some(msim_with_teacher(teacher, doc, &pred.abstractive, &pred.images)?)
    };
    Ok(ExampleScores {
        id: pred.id.clone(),
        abstractive: Rouge::score(&pred.abstractive, &doc.summary),
        extractive: Rouge::score(&ext, &reference),
        ip,
        msim,
    })
}

pub fn summarize(examples: &[ExampleScores]) -> Summary {
    let (ip, ip_documents) = mean_opt(examples.iter().map(|e| e.ip));
    let (msim, msim_documents) = mean_opt(examples.iter().map(|e| e.msim));
    Summary {
        documents: examples.len(),
        abstractive: Rouge::mean(examples.iter().map(|e| &e.abstractive)),
        extractive: Rouge::mean(examples.iter().map(|e| &e.extractive)),
        ip,
        ip_documents,
        msim,
        msim_documents,
    }
}

pub fn file_report(
    file: String,
    docs: &HashMap<&str, &MultimodalDocument>,
    preds: &[Prediction],
    teacher: &dyn Teacher,
) -> Result<FileReport> {
    let examples = preds
        .par_iter()
        .map(|p| score_example(lookup(docs, &p.id)?, p, teacher))
        .collect::<Result<Vec<_>>>()?;
    Ok(FileReport {
        file,
        summary: summarize(&examples),
        examples,
    })
}

pub fn mean_summary(files: &[FileReport]) -> Summary {
    let (ip, _) = mean_opt(files.iter().map(|f| f.summary.ip));
    let (msim, _) = mean_opt(files.iter().map(|f| f.summary.msim));
    Summary {
        documents: files.iter().map(|f| f.summary.documents).sum(),
        abstractive: Rouge::mean(files.iter().map(|f| &f.summary.abstractive)),
        extractive: Rouge::mean(files.iter().map(|f| &f.summary.extractive)),
        ip,
        ip_documents: files.iter().map(|f| f.summary.ip_documents).sum(),
        msim,
        msim_documents: files.iter().map(|f| f.summary.msim_documents).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramRow {
    pub n: usize,
    /// Mean distinct novel n-grams per generated summary.
    pub generated_novel: f64,
    /// Same for the reference summaries.
    pub reference_novel: f64,
    /// Mean share of the reference's novel n-grams reproduced.
    pub recall: f64,
}

pub fn ngram_curve(docs: &HashMap<&str, &MultimodalDocument>, preds: &[Prediction]) -> Result<Vec<NgramRow>> {
    let pairs = preds
        .iter()
        .map(|p| Ok((lookup(docs, &p.id)?, p)))
        .collect::<Result<Vec<_>>>()?;
    let n_docs = pairs.len().max(1) as f64;
    Ok((1..=4)
        .map(|n| {
            let (mut gen, mut refn, mut rec) = (0.0, 0.0, 0.0);
            for (doc, p) in &pairs {
                let src = doc.source_tokens();
                let g = novel_ngrams(&p.abstractive, &src, &doc.summary, n);
                gen += g.count as f64;
                rec += g.recall;
                refn += novel_ngrams(&doc.summary, &src, &doc.summary, n).count as f64;
            }
            NgramRow {
                n,
                generated_novel: gen / n_docs,
                reference_novel: refn / n_docs,
                recall: rec / n_docs,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use unims::inference::PredictionScores;
    use unims::teacher::RougeRankTeacher;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn doc() -> MultimodalDocument {
        MultimodalDocument {
            id: "d".into(),
            sentences: vec![toks("a b c"), toks("d e"), toks("f g h")],
            images: vec![],
            captions: None,
            summary: toks("a b c f g h"),
            image_refs: Some(vec![1]),
        }
    }

    fn pred(ext: Vec<usize>, abs: &str) -> Prediction {
        Prediction {
            id: "d".into(),
            abstractive: toks(abs),
            extractive: ext,
            images: vec![],
            scores: PredictionScores {
                sentences: vec![],
                images: vec![],
                abstractive: 0.0,
            },
        }
    }

    #[test]
    fn perfect_extraction_scores_one() {
        let t = RougeRankTeacher::new(4);
        let s = score_example(&doc(), &pred(vec![2, 0], "a b"), &t).unwrap();
        assert_eq!(s.extractive, Rouge { r1: 1.0, r2: 1.0, rl: 1.0 });
        assert!(s.ip.is_none() && s.msim.is_none());
    }

    #[test]
    fn out_of_range_indices_are_input_errors() {
        let t = RougeRankTeacher::new(4);
        let e = score_example(&doc(), &pred(vec![3], ""), &t).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn file_mean_is_unweighted() {
        let mk = |r1, ip| FileReport {
            file: String::new(),
            summary: Summary {
                documents: 1,
                abstractive: Rouge { r1, r2: 0.0, rl: 0.0 },
                extractive: Rouge::default(),
                ip,
                ip_documents: usize::from(ip.is_some()),
                msim: None,
                msim_documents: 0,
            },
            examples: vec![],
        };
        let m = mean_summary(&[mk(0.2, Some(1.0)), mk(0.4, None)]);
        assert!((m.abstractive.r1 - 0.3).abs() < 1e-15);
        assert_eq!(m.ip, Some(1.0));
        assert_eq!(m.ip_documents, 1);
    }

    #[test]
    fn copied_summary_has_no_novel_ngrams() {
        let d = doc();
        let docs: HashMap<&str, &MultimodalDocument> = [("d", &d)].into_iter().collect();
        let rows = ngram_curve(&docs, &[pred(vec![], "a b c")]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.generated_novel == 0.0));
        // "c f" is the reference's only novel bigram
        assert_eq!(rows[1].reference_novel, 1.0);
    }
}
