//! The multimodal encoder-decoder, its two scoring heads and its losses.

pub mod decoder;
pub mod encoder;
pub mod forward;
pub mod loss;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnMask, Tape, Var};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::tensor::Tensor;

pub use decoder::decoder_layer;
pub use decoder::DecoderMemory;
pub use encoder::EncoderOutput;
pub use forward::{BatchLosses, ExampleLosses, TrainingExample};
pub use loss::{abs_loss, ext_loss, kd_loss, student_distribution, teacher_distribution, total_loss, ExtLoss, LossTerms};
pub use params::{Bound, ParamId, ParamStore};

use params::{truncated_normal, INIT_STD};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Attention sub-layer with its residual LayerNorm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnBlock {
    pub up: Linear,
    pub down: Linear,
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttnBlock,
    pub ffn: FfnBlock,
}

/// Causal self-attention, then cross-attention over visual states, then over
/// textual states, then the feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttnBlock,
    pub cross_visual: AttnBlock,
    pub cross_text: AttnBlock,
    pub ffn: FfnBlock,
}

/// Where each parameter lives in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// Token embeddings, also the (tied) output projection.
    pub tok_emb: ParamId,
    pub patch_proj: ParamId,
    /// Learned image-CLS input in patch space; projected like a patch.
    pub v_cls: ParamId,
    pub v_pos: ParamId,
    pub e_pos: ParamId,
    pub enc_emb_norm: Norm,
    pub enc: Vec<EncoderLayer>,
    pub sel_head: Linear,
    pub ext_head: Linear,
    pub dec_pos: ParamId,
    pub dec_emb_norm: Norm,
    pub dec: Vec<DecoderLayer>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = truncated_normal(&mut self.rng, shape, INIT_STD);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.weight(&format!("{name}.w"), &[din, dout]),
            b: self.zeros(&format!("{name}.b"), &[dout]),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: self.zeros(&format!("{name}.bias"), &[d]),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnBlock {
        AttnBlock {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FfnBlock {
        FfnBlock {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }
}

/// Builds the layout and freshly initialized parameters for `config`.
pub fn init_params(config: &ModelConfig) -> (Layout, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let d = config.d_model;
    let layout = Layout {
        tok_emb: init.weight("tok_emb", &[config.vocab_size, d]),
        patch_proj: init.weight("patch_proj", &[config.patch_dim(), d]),
        v_cls: init.weight("v_cls", &[1, config.patch_dim()]),
        v_pos: init.weight("v_pos", &[1 + config.patches_per_image(), d]),
        e_pos: init.weight("e_pos", &[config.max_positions(), d]),
        enc_emb_norm: init.norm("enc.emb_norm", d),
        enc: (0..config.n_enc_layers)
            .map(|i| EncoderLayer {
                attn: init.attn(&format!("enc.{i}.self"), d),
                ffn: init.ffn(&format!("enc.{i}.ffn"), d, config.ffn_dim),
            })
            .collect(),
        sel_head: init.linear("head.select", d, 1),
        ext_head: init.linear("head.extract", d, 1),
        dec_pos: init.weight("dec_pos", &[config.max_decode_len, d]),
        dec_emb_norm: init.norm("dec.emb_norm", d),
        dec: (0..config.n_dec_layers)
            .map(|i| DecoderLayer {
                self_attn: init.attn(&format!("dec.{i}.self"), d),
                cross_visual: init.attn(&format!("dec.{i}.cross_visual"), d),
                cross_text: init.attn(&format!("dec.{i}.cross_text"), d),
                ffn: init.ffn(&format!("dec.{i}.ffn"), d, config.ffn_dim),
            })
            .collect(),
    };
    (layout, store)
}

/// Model configuration, parameter layout and parameter values.
#[derive(Debug, Clone)]
pub struct UniMs {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore,
}

impl UniMs {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = init_params(&config);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Reassembles a model from stored parameters, checking every tensor
    /// against the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (layout, fresh) = init_params(&config);
        if fresh.len() != params.len() {
            return Err(crate::Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                fresh.len(),
                params.len()
            )));
        }
        for ((_, want_name, want), (_, name, got)) in fresh.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(crate::Error::Integrity(format!(
                    "parameter '{name}' {:?} does not match expected '{want_name}' {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Dropout is applied only when a generator is supplied (training).
    pub(crate) fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<ChaCha8Rng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => tape.dropout(x, self.config.dropout, r),
            _ => x,
        }
    }
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, l: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, b[l.w])?;
    tape.add_row(y, b[l.b])
}

pub(crate) fn norm(tape: &mut Tape, b: &Bound, n: Norm, x: Var) -> Result<Var> {
    tape.layer_norm(x, b[n.gain], b[n.bias], LN_EPS)
}

/// `LN(x + Attn(x → memory))`.
pub(crate) fn attn_block(
    model: &UniMs,
    tape: &mut Tape,
    b: &Bound,
    blk: AttnBlock,
    x: Var,
    memory: Var,
    mask: &AttnMask,
    rng: &mut Option<ChaCha8Rng>,
) -> Result<Var> {
    let q = linear(tape, b, blk.q, x)?;
    let k = linear(tape, b, blk.k, memory)?;
    let v = linear(tape, b, blk.v, memory)?;
    let a = tape.attention(q, k, v, model.config.n_heads, mask)?;
    let o = linear(tape, b, blk.o, a)?;
    let o = model.dropout(tape, o, rng);
    let r = tape.add(x, o)?;
    norm(tape, b, blk.norm, r)
}

/// `LN(x + W₂·GELU(W₁·x))`.
pub(crate) fn ffn_block(
    model: &UniMs,
    tape: &mut Tape,
    b: &Bound,
    blk: FfnBlock,
    x: Var,
    rng: &mut Option<ChaCha8Rng>,
) -> Result<Var> {
    let h = linear(tape, b, blk.up, x)?;
    let h = tape.gelu(h);
    let o = linear(tape, b, blk.down, h)?;
    let o = model.dropout(tape, o, rng);
    let r = tape.add(x, o)?;
    norm(tape, b, blk.norm, r)
}

/// Seeded generator for a given training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    let salt: u64 = base.random();
    ChaCha8Rng::seed_from_u64(salt ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::default();
        let (l1, p1) = init_params(&cfg);
        let (_, p2) = init_params(&cfg);
        assert_eq!(p1, p2);
        assert_eq!(p1.get(l1.patch_proj).shape(), &[cfg.patch_dim(), cfg.d_model]);
        assert_eq!(p1.get(l1.sel_head.w).shape(), &[cfg.d_model, 1]);
        assert_eq!(p1.get(l1.ext_head.w).shape(), &[cfg.d_model, 1]);
        assert_ne!(l1.dec[0].cross_visual, l1.dec[0].cross_text);
        assert!(p1.get(l1.tok_emb).data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let cfg = ModelConfig::default();
        let m = UniMs::new(cfg.clone()).unwrap();
        let other = ModelConfig {
            d_model: 32,
            ..cfg
        };
        assert!(UniMs::from_params(other, m.params).is_err());
    }
}

#[cfg(test)]
#[path = "tests.rs"]
mod model_tests;
