//! Full training forward pass: encoder, both heads, decoder and all losses.

use rand_chacha::ChaCha8Rng;

use super::decoder::DecoderMemory;
use super::loss::{abs_loss, ext_loss, kd_loss, LossTerms};
use super::{Bound, UniMs};
use crate::autodiff::{Tape, Var};
use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An encoded document with its extractive oracle and teacher image scores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub example: EncodedExample,
    /// 0/1 per retained sentence.
    pub oracle_labels: Vec<f64>,
    /// One score per real image.
    pub teacher_scores: Vec<f64>,
}

/// Loss nodes for one example. Absent terms contribute zero.
#[derive(Debug, Clone, Copy)]
pub struct ExampleLosses {
    pub kd: Option<Var>,
    pub ext: Option<Var>,
    pub abs: Var,
    pub ext_degenerate: bool,
}

/// Loss nodes for a batch, each the mean over examples.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub kd: Var,
    pub ext: Var,
    pub abs: Var,
    pub total: Var,
}

impl BatchLosses {
    pub fn terms(&self, tape: &Tape) -> LossTerms {
        LossTerms {
            kd: tape.value(self.kd).item(),
            ext: tape.value(self.ext).item(),
            abs: tape.value(self.abs).item(),
            total: tape.value(self.total).item(),
        }
    }
}

impl UniMs {
    pub fn example_losses(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tx: &TrainingExample,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<ExampleLosses> {
        let ex = &tx.example;
        if tx.oracle_labels.len() != ex.n_sentences() {
            return Err(Error::Input(format!(
                "example {}: {} oracle labels for {} sentences",
                ex.id,
                tx.oracle_labels.len(),
                ex.n_sentences()
            )));
        }
        let enc = self.encode_example(tape, b, ex, rng)?;

        let kd = if ex.n_valid_images() > 0 {
            if tx.teacher_scores.len() != ex.n_valid_images() {
                return Err(Error::Input(format!(
                    "example {}: {} teacher scores for {} images",
                    ex.id,
                    tx.teacher_scores.len(),
                    ex.n_valid_images()
                )));
            }
            let s = self.image_select_scores(tape, b, &enc)?;
            Some(kd_loss(tape, s, &tx.teacher_scores, self.config.kd_temperature)?)
        } else {
            None
        };

        let (ext, ext_degenerate) = if self.config.ablation.ext_loss() {
            let s = self.sentence_scores(tape, b, &enc)?;
            let e = ext_loss(tape, s, &tx.oracle_labels, self.config.ext_loss_mode)?;
            (Some(e.loss), e.degenerate)
        } else {
            (None, false)
        };

        let memory = DecoderMemory::from_encoder(&enc);
        let logits = self.decode_logits(tape, b, &memory, &ex.decoder_input(), rng)?;
        let abs = abs_loss(tape, logits, &ex.target_ids)?;
        Ok(ExampleLosses {
            kd,
            ext,
            abs,
            ext_degenerate,
        })
    }

    /// Per-term means over the batch and their unweighted sum.
    pub fn batch_losses(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &[TrainingExample],
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<BatchLosses> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut kd = Vec::new();
        let mut ext = Vec::new();
        let mut abs = Vec::new();
        for tx in batch {
            let l = self.example_losses(tape, b, tx, rng)?;
            kd.extend(l.kd);
            ext.extend(l.ext);
            abs.push(l.abs);
        }
        let n = batch.len() as f64;
        let kd = mean_of(tape, &kd, n)?;
        let ext = mean_of(tape, &ext, n)?;
        let abs = mean_of(tape, &abs, n)?;
        let total = super::loss::total_loss(tape, kd, ext, abs)?;
        if !tape.value(total).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss (kd {}, ext {}, abs {})",
                tape.value(kd).item(),
                tape.value(ext).item(),
                tape.value(abs).item()
            )));
        }
        Ok(BatchLosses { kd, ext, abs, total })
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var], n: f64) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / n))
}
