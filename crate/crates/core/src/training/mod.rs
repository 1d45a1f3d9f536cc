//! Optimization loop, learning-rate schedule, checkpoints and model selection.

pub mod checkpoint;
pub mod optim;
pub mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::data::{encode_document, MultimodalDocument, Vocabulary};
use crate::data::encode::collate;
use crate::error::{Error, Result};
use crate::metrics::greedy_oracle;
use crate::model::{step_rng, LossTerms, TrainingExample, UniMs};
use crate::teacher::Teacher;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{clip_grad_norm, lr_schedule, Adam};
pub use run::{train, StepRecord, TrainOutcome};

/// A validation result remembered by the best-k registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub step: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adam: Adam,
    /// Best checkpoints so far, lowest validation loss first.
    pub registry: Vec<RegistryEntry>,
}

impl TrainState {
    pub fn new(model: &UniMs) -> Self {
        Self {
            step: 0,
            adam: Adam::new(model.params.tensors()),
            registry: Vec::new(),
        }
    }

    /// Records a validation loss. Returns whether it entered the registry
    /// and the step evicted to make room, if any.
    pub fn register(&mut self, step: usize, val_loss: f64, keep: usize) -> (bool, Option<usize>) {
        self.registry.push(RegistryEntry { step, val_loss });
        self.registry
            .sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then(a.step.cmp(&b.step)));
        let evicted = (self.registry.len() > keep).then(|| self.registry.pop().expect("nonempty").step);
        (evicted != Some(step), evicted)
    }
}

/// Encodes documents and attaches oracle labels and teacher scores.
pub fn prepare_examples(
    docs: &[MultimodalDocument],
    vocab: &Vocabulary,
    model: &UniMs,
    teacher: &dyn Teacher,
) -> Result<Vec<TrainingExample>> {
    docs.iter()
        .map(|doc| {
            let example = encode_document(doc, vocab, &model.config)?;
            let kept = &doc.sentences[..example.n_sentences()];
            let oracle = greedy_oracle(kept, &doc.summary);
            let teacher_scores = if example.n_images() > 0 {
                let mut s = teacher.score_reference(doc)?.scores;
                s.truncate(example.n_images());
                s
            } else {
                Vec::new()
            };
            Ok(TrainingExample {
                oracle_labels: oracle.labels(example.n_sentences()),
                example,
                teacher_scores,
            })
        })
        .collect()
}

/// Example indices for 1-based `step`: consecutive slices of a stream of
/// per-epoch permutations, each seeded from `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let start = (step - 1) * batch_size;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = usize::MAX;
    let mut perm = Vec::new();
    for pos in start..start + batch_size.min(n) {
        if pos / n != epoch {
            epoch = pos / n;
            perm = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            perm.shuffle(&mut rng);
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Gradient of the total loss for every parameter (zero where none reached).
pub fn compute_gradients(
    model: &UniMs,
    batch: &[TrainingExample],
    rng: &mut Option<ChaCha8Rng>,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, true);
    let padded = pad_batch(batch);
    let losses = model.batch_losses(&mut tape, &b, &padded, rng)?;
    tape.backward(losses.total)?;
    let grads = b
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    Ok((losses.terms(&tape), grads))
}

/// Pads text and visual streams to the batch maxima.
pub fn pad_batch(batch: &[TrainingExample]) -> Vec<TrainingExample> {
    let encoded: Vec<_> = batch.iter().map(|t| t.example.clone()).collect();
    collate(&encoded)
        .into_iter()
        .zip(batch)
        .map(|(example, t)| TrainingExample {
            example,
            oracle_labels: t.oracle_labels.clone(),
            teacher_scores: t.teacher_scores.clone(),
        })
        .collect()
}

/// One optimizer update on `batch`. Returns the loss terms before the update.
pub fn train_step(
    model: &mut UniMs,
    state: &mut TrainState,
    batch: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    let step = state.step + 1;
    let mut rng = (model.config.dropout > 0.0).then(|| step_rng(model.config.seed, step as u64));
    let (terms, mut grads) = compute_gradients(model, batch, &mut rng).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        e => e,
    })?;
    clip_grad_norm(&mut grads, cfg.grad_clip);
    let lr = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.peak_lr)?;
    state.adam.update(model.params.tensors_mut(), &grads, lr, cfg);
    state.step = step;
    Ok(terms)
}

/// Mean loss terms over `examples`, without dropout or gradients.
pub fn evaluate_losses(model: &UniMs, examples: &[TrainingExample]) -> Result<LossTerms> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to evaluate".into()));
    }
    let mut sum = LossTerms::default();
    for tx in examples {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape, false);
        let l = model.batch_losses(&mut tape, &b, std::slice::from_ref(tx), &mut None)?;
        let t = l.terms(&tape);
        sum.kd += t.kd;
        sum.ext += t.ext;
        sum.abs += t.abs;
    }
    let n = examples.len() as f64;
    Ok(LossTerms::new(sum.kd / n, sum.ext / n, sum.abs / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen = Vec::new();
        for step in 1..=5 {
            seen.extend(batch_indices(n, 4, 3, step));
        }
        // 20 draws = two full epochs
        let mut first: Vec<_> = seen[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(n, 4, 3, 2), batch_indices(n, 4, 3, 2));
        assert_ne!(seen[..10], seen[10..]);
    }

    #[test]
    fn registry_keeps_best_k() {
        let cfg = crate::config::ModelConfig::default();
        let model = UniMs::new(cfg).unwrap();
        let mut st = TrainState::new(&model);
        assert_eq!(st.register(1, 3.0, 2), (true, None));
        assert_eq!(st.register(2, 1.0, 2), (true, None));
        assert_eq!(st.register(3, 2.0, 2), (true, Some(1)));
        assert_eq!(st.register(4, 5.0, 2), (false, Some(4)));
        let steps: Vec<_> = st.registry.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![2, 3]);
    }
}
