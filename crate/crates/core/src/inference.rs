//! Per-document prediction: abstractive summary, extractive sentences and
//! selected images.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::DecodeConfig;
use crate::data::vocab::EOS;
use crate::data::{EncodedExample, Vocabulary};
use crate::decoding::{beam_search, ModelStepper};
use crate::error::Result;
use crate::metrics::top_k_indices;
use crate::model::UniMs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionScores {
    pub sentences: Vec<f64>,
    pub images: Vec<f64>,
    /// Length-penalized beam score of the abstractive output.
    pub abstractive: f64,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub abstractive: Vec<String>,
    /// Top-k sentences by score, in document order.
    pub extractive: Vec<usize>,
    /// Top-k images by selection score, best first.
    pub images: Vec<usize>,
    pub scores: PredictionScores,
}

/// The `k` best-scoring indices, returned in ascending index order.
pub fn top_k_in_order(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx = top_k_indices(scores, k);
    idx.sort_unstable();
    idx
}

/// Encoder-side scores: one per retained sentence, one per real image
/// (empty when the document has none).
pub fn head_scores(model: &UniMs, example: &EncodedExample) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let enc = model.encode_example(&mut tape, &b, example, &mut None)?;
    let s = model.sentence_scores(&mut tape, &b, &enc)?;
    let sentences = tape.value(s).data().to_vec();
    let images = if example.n_valid_images() > 0 {
        let v = model.image_select_scores(&mut tape, &b, &enc)?;
        tape.value(v).data().to_vec()
    } else {
        Vec::new()
    };
    Ok((sentences, images))
}

pub fn predict(model: &UniMs, vocab: &Vocabulary, example: &EncodedExample, cfg: &DecodeConfig) -> Result<Prediction> {
    let (sentences, images) = head_scores(model, example)?;
    let mut stepper = ModelStepper::new(model, example)?;
    let beam = beam_search(&mut stepper, cfg.beam_size, cfg.length_penalty, model.config.max_decode_len)?;
    let ids: Vec<usize> = beam.tokens.iter().copied().take_while(|&t| t != EOS).collect();
    Ok(Prediction {
        id: example.id.clone(),
        abstractive: vocab.decode(&ids),
        extractive: top_k_in_order(&sentences, cfg.ext_top_k),
        images: top_k_indices(&images, cfg.image_top_k),
        scores: PredictionScores {
            abstractive: beam.score(cfg.length_penalty),
            sentences,
            images,
        },
    })
}
