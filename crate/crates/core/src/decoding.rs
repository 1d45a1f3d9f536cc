//! Beam search with a length penalty, and greedy decoding.

use std::cmp::Ordering;

use crate::autodiff::Tape;
use crate::data::vocab::{BOS, CLS, EOS, PAD, SEP};
use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::{Bound, DecoderMemory, UniMs};

/// Anything that can score the next token given the tokens generated so far.
pub trait StepModel {
    /// Log-probabilities over the vocabulary for the token after `prefix`.
    /// `-inf` marks tokens that must not be generated.
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;

    fn eos(&self) -> usize;
}

/// `((5 + n) / 6)^α`.
pub fn length_penalty(n: usize, alpha: f64) -> f64 {
    ((5.0 + n as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len().max(1), alpha)
    }
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &Beam, b: &Beam, alpha: f64) -> Ordering {
    b.score(alpha)
        .total_cmp(&a.score(alpha))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `beam_size` best expansions per step; those ending in EOS are
/// set aside as finished. Returns the best finished beam, or the best beam
/// still open at `max_len`.
pub fn beam_search(model: &mut dyn StepModel, beam_size: usize, alpha: f64, max_len: usize) -> Result<Beam> {
    if max_len < 1 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    if beam_size < 1 {
        return Err(Error::Input("beam_size must be at least 1".into()));
    }
    let eos = model.eos();
    let mut live = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Beam> = Vec::new();
    for _ in 0..max_len {
        let mut cand = Vec::new();
        for beam in &live {
            let lp = model.next_log_probs(&beam.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                if l.is_nan() {
                    return Err(Error::Numeric("NaN next-token log-probability".into()));
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                cand.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + l,
                    finished: tok == eos,
                });
            }
        }
        cand.sort_by(|a, b| rank(a, b, alpha));
        cand.truncate(beam_size);
        let (done, open): (Vec<_>, Vec<_>) = cand.into_iter().partition(|b| b.finished);
        finished.extend(done);
        live = open;
        if live.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .chain(live)
        .min_by(|a, b| rank(a, b, alpha))
        .ok_or_else(|| Error::Numeric("every continuation has zero probability".into()))
}

/// Picks the most likely token at every step (lowest id on ties).
pub fn greedy(model: &mut dyn StepModel, max_len: usize) -> Result<Beam> {
    if max_len < 1 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    let eos = model.eos();
    let mut beam = Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while beam.tokens.len() < max_len && !beam.finished {
        let lp = model.next_log_probs(&beam.tokens)?;
        let (tok, &l) = lp
            .iter()
            .enumerate()
            .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })
            .ok_or_else(|| Error::Input("empty vocabulary".into()))?;
        if l == f64::NEG_INFINITY || l.is_nan() {
            return Err(Error::Numeric("no token has positive probability".into()));
        }
        beam.tokens.push(tok);
        beam.log_prob += l;
        beam.finished = tok == eos;
    }
    Ok(beam)
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Tokens the decoder may never emit.
pub const BANNED: [usize; 4] = [PAD, BOS, CLS, SEP];

/// Runs the decoder for one encoded example. The encoder runs once; each
/// step rewinds the tape to just after it.
pub struct ModelStepper<'m> {
    model: &'m UniMs,
    tape: Tape,
    bound: Bound,
    memory: DecoderMemory,
    mark: usize,
}

impl<'m> ModelStepper<'m> {
    pub fn new(model: &'m UniMs, example: &EncodedExample) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let enc = model.encode_example(&mut tape, &bound, example, &mut None)?;
        let memory = DecoderMemory::from_encoder(&enc);
        let mark = tape.checkpoint();
        Ok(Self {
            model,
            tape,
            bound,
            memory,
            mark,
        })
    }
}

impl StepModel for ModelStepper<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.tape.rewind(self.mark);
        let input: Vec<usize> = std::iter::once(BOS).chain(prefix.iter().copied()).collect();
        let logits = self
            .model
            .decode_logits(&mut self.tape, &self.bound, &self.memory, &input, &mut None)?;
        let v = self.tape.value(logits);
        let last = v.row(v.rows() - 1);
        let mut out = log_softmax(last);
        for b in BANNED {
            out[b] = f64::NEG_INFINITY;
        }
        Ok(out)
    }

    fn eos(&self) -> usize {
        EOS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
        start: Vec<f64>,
    }

    impl StepModel for Bigram {
        fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(match prefix.last() {
                None => self.start.clone(),
                Some(&t) => self.table[t].clone(),
            })
        }

        fn eos(&self) -> usize {
            0
        }
    }

    fn logs(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert_eq!(length_penalty(1, 3.3), 1.0);
        assert!((length_penalty(5, 2.0) - 100.0 / 36.0).abs() < 1e-12);
        assert!((length_penalty(5, 2.0) - 2.7778).abs() < 1e-4);
    }

    #[test]
    fn beam_beats_greedy_on_garden_path() {
        // greedy takes token 1 first (0.6) but its continuations are flat
        let mut m = Bigram {
            start: logs(&[0.0001, 0.6, 0.3999]),
            table: vec![
                logs(&[1.0, 1e-9, 1e-9]),
                logs(&[0.34, 0.33, 0.33]),
                logs(&[0.98, 0.01, 0.01]),
            ],
        };
        let g = greedy(&mut m, 2).unwrap();
        assert_eq!(g.tokens, vec![1, 0]);
        let b = beam_search(&mut m, 2, 0.0, 2).unwrap();
        assert_eq!(b.tokens, vec![2, 0]);
        assert_eq!(beam_search(&mut m, 1, 0.0, 2).unwrap(), g);
    }

    #[test]
    fn zero_length_is_rejected() {
        let mut m = Bigram {
            start: vec![0.0],
            table: vec![vec![0.0]],
        };
        assert!(matches!(beam_search(&mut m, 2, 1.0, 0), Err(Error::Input(_))));
        assert!(matches!(greedy(&mut m, 0), Err(Error::Input(_))));
    }

    #[test]
    fn unfinished_output_has_max_len() {
        let mut m = Bigram {
            start: logs(&[0.1, 0.9]),
            table: vec![logs(&[0.5, 0.5]), logs(&[0.01, 0.99])],
        };
        let b = beam_search(&mut m, 3, 0.0, 4).unwrap();
        assert!(b.finished || b.tokens.len() == 4);
    }
}
