//! Distillation, extractive, abstractive and combined objectives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, PROB_FLOOR};
use crate::config::ExtLossMode;
use crate::data::vocab::PAD;
use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

/// Softened student distribution `softmax(student/τ)`, flattened.
pub fn student_distribution(tape: &mut Tape, student: Var, tau: f64) -> Result<Var> {
    let n = tape.value(student).len();
    let flat = tape.reshape(student, &[n])?;
    let scaled = tape.scale(flat, 1.0 / tau);
    tape.softmax(scaled)
}

/// Softened teacher distribution `softmax(teacher/τ)`, floored at
/// [`PROB_FLOOR`] so the KL stays finite.
pub fn teacher_distribution(teacher: &[f64], tau: f64) -> Vec<f64> {
    softmax(&teacher.iter().map(|t| t / tau).collect::<Vec<_>>())
        .into_iter()
        .map(|v| v.max(PROB_FLOOR))
        .collect()
}

/// `KL(p ‖ q)` with `p = softmax(student/τ)` and `q = softmax(teacher/τ)`.
/// The teacher side is a constant, so gradient reaches the student only.
pub fn kd_loss(tape: &mut Tape, student: Var, teacher: &[f64], tau: f64) -> Result<Var> {
    let n = tape.value(student).len();
    if n == 0 || n != teacher.len() {
        return Err(Error::Input(format!(
            "kd_loss: {n} student scores for {} teacher scores",
            teacher.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("kd_loss: temperature {tau} must be positive")));
    }
    let p = student_distribution(tape, student, tau)?;
    let q = tape.constant(Tensor::vector(teacher_distribution(teacher, tau)));
    tape.kl_div(p, q)
}

#[derive(Debug, Clone, Copy)]
pub struct ExtLoss {
    pub loss: Var,
    /// The oracle marked no sentence; the loss is a constant zero.
    pub degenerate: bool,
}

/// Extractive loss over per-sentence scores and 0/1 oracle labels.
pub fn ext_loss(tape: &mut Tape, scores: Var, labels: &[f64], mode: ExtLossMode) -> Result<ExtLoss> {
    let n = tape.value(scores).len();
    if n != labels.len() {
        return Err(Error::Input(format!("ext_loss: {n} scores for {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Input("ext_loss: labels must be 0 or 1".into()));
    }
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1.0)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        log::warn!("ext_loss: oracle has no positive sentence");
        return Ok(ExtLoss {
            loss: tape.constant(Tensor::scalar(0.0)),
            degenerate: true,
        });
    }
    let loss = match mode {
        ExtLossMode::Bce => tape.bce_with_logits(scores, labels)?,
        ExtLossMode::SoftmaxNll => {
            let flat = tape.reshape(scores, &[n])?;
            let logp = tape.log_softmax(flat)?;
            let col = tape.reshape(logp, &[n, 1])?;
            let picked = tape.gather_rows(col, &positives)?;
            let s = tape.sum(picked);
            tape.scale(s, -1.0)
        }
    };
    Ok(ExtLoss {
        loss,
        degenerate: false,
    })
}

/// Mean token negative log-likelihood; PAD targets are ignored.
pub fn abs_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| (t != PAD).then_some(t))
        .collect();
    tape.cross_entropy(logits, &t)
}

/// Unweighted sum of the three objectives.
pub fn total_loss(tape: &mut Tape, kd: Var, ext: Var, abs: Var) -> Result<Var> {
    let s = tape.add(kd, ext)?;
    tape.add(s, abs)
}

/// Scalar values of each objective, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub kd: f64,
    pub ext: f64,
    pub abs: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn new(kd: f64, ext: f64, abs: f64) -> Self {
        Self {
            kd,
            ext,
            abs,
            total: kd + ext + abs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kd(student: &[f64], teacher: &[f64], tau: f64) -> f64 {
        let mut t = Tape::new();
        let s = t.param(Tensor::vector(student.to_vec()));
        let l = kd_loss(&mut t, s, teacher, tau).unwrap();
        t.value(l).item()
    }

    #[test]
    fn kd_examples() {
        assert_eq!(kd(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0], 10.0), 0.0);
        assert_eq!(kd(&[5.0], &[-3.0], 10.0), 0.0);
        // teacher logits ln 9 apart give q = (0.9, 0.1) at τ = 1
        let v = kd(&[0.0, 0.0], &[9f64.ln(), 0.0], 1.0);
        assert!((v - 0.510826).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kd_length_mismatch() {
        let mut t = Tape::new();
        let s = t.param(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(kd_loss(&mut t, s, &[1.0], 1.0), Err(Error::Input(_))));
    }

    fn ext(scores: &[f64], labels: &[f64], mode: ExtLossMode) -> (f64, bool) {
        let mut t = Tape::new();
        let s = t.param(Tensor::vector(scores.to_vec()));
        let e = ext_loss(&mut t, s, labels, mode).unwrap();
        (t.value(e.loss).item(), e.degenerate)
    }

    #[test]
    fn ext_examples() {
        let (l, _) = ext(&[20.0, -20.0, 20.0], &[1.0, 0.0, 1.0], ExtLossMode::Bce);
        assert!(l < 1e-8);
        let (l, _) = ext(&[0.0, 0.0], &[1.0, 0.0], ExtLossMode::Bce);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let (l, _) = ext(&[0.0; 4], &[0.0, 1.0, 0.0, 0.0], ExtLossMode::SoftmaxNll);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn ext_without_positive_is_flagged_zero() {
        for mode in [ExtLossMode::Bce, ExtLossMode::SoftmaxNll] {
            assert_eq!(ext(&[1.0, 2.0], &[0.0, 0.0], mode), (0.0, true));
        }
    }

    #[test]
    fn abs_examples() {
        let mut t = Tape::new();
        let mut logits = vec![-50.0; 3 * 4];
        let targets = [2usize, 3, 1];
        for (r, &c) in targets.iter().enumerate() {
            logits[r * 4 + c] = 50.0;
        }
        let x = t.param(Tensor::matrix(3, 4, logits).unwrap());
        let l = abs_loss(&mut t, x, &targets).unwrap();
        assert!(t.value(l).item() < 1e-12);

        let x = t.param(Tensor::zeros(&[3, 4]));
        let l = abs_loss(&mut t, x, &[2, 3, 1]).unwrap();
        assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let x = t.param(Tensor::zeros(&[2, 4]));
        assert!(matches!(abs_loss(&mut t, x, &[PAD, PAD]), Err(Error::Input(_))));
    }

    #[test]
    fn total_is_plain_sum() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = total_loss(&mut t, z, z, z).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        let a = t.constant(Tensor::scalar(0.5));
        let b = t.constant(Tensor::scalar(0.7));
        let c = t.constant(Tensor::scalar(1.3));
        let s = total_loss(&mut t, a, b, c).unwrap();
        assert!((t.value(s).item() - 2.5).abs() < 1e-15);
        assert_eq!(LossTerms::new(0.5, 0.7, 1.3).total, 0.5 + 0.7 + 1.3);
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    proptest::proptest! {
        #[test]
        fn kd_is_nonnegative(s in proptest::collection::vec(-5.0f64..5.0, 1..6), seed in 0u64..1000, tau in 0.5f64..20.0) {
            let t: Vec<f64> = s.iter().enumerate().map(|(i, v)| v * 0.3 + ((seed + i as u64) % 7) as f64 - 3.0).collect();
            proptest::prop_assert!(kd(&s, &t, tau) >= 0.0);
        }

        #[test]
        fn kd_vanishes_under_a_shift(s in proptest::collection::vec(-5.0f64..5.0, 1..6), c in -10.0f64..10.0) {
            let t: Vec<f64> = s.iter().map(|v| v + c).collect();
            proptest::prop_assert!(kd(&s, &t, 10.0).abs() < 1e-12);
        }

        #[test]
        fn temperature_flattens_but_keeps_ranking(s in proptest::collection::vec(-5.0f64..5.0, 2..6)) {
            let mut last = -1.0;
            let am = crate::metrics::top_k_indices(&s, 1);
            for tau in [1.0, 5.0, 10.0, 20.0] {
                let q = softmax(&s.iter().map(|v| v / tau).collect::<Vec<_>>());
                let h = entropy(&q);
                proptest::prop_assert!(h >= last - 1e-12);
                last = h;
                proptest::prop_assert_eq!(&crate::metrics::top_k_indices(&q, 1), &am);
            }
        }

        #[test]
        fn bce_ignores_sentence_order(
            pairs in proptest::collection::vec((-5.0f64..5.0, proptest::bool::ANY), 1..7),
            rot in 0usize..7,
        ) {
            let mut pairs = pairs;
            pairs[0].1 = true;
            let split = |p: &[(f64, bool)]| -> (Vec<f64>, Vec<f64>) {
                (p.iter().map(|x| x.0).collect(), p.iter().map(|x| f64::from(u8::from(x.1))).collect())
            };
            let (s, l) = split(&pairs);
            let a = ext(&s, &l, ExtLossMode::Bce).0;
            let n = pairs.len();
            pairs.rotate_left(rot % n);
            pairs.reverse();
            let (s, l) = split(&pairs);
            let b = ext(&s, &l, ExtLossMode::Bce).0;
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
