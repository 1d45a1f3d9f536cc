//! Visual-guided decoder: every layer cross-attends to the visual states
//! first and to the textual states second.

use rand_chacha::ChaCha8Rng;

use super::{attn_block, ffn_block, norm, Bound, DecoderLayer, EncoderOutput, UniMs};
use crate::autodiff::{AttnMask, Tape, Var};
use crate::error::{shape_err, Result};

/// Encoder states as seen by the decoder.
#[derive(Debug, Clone)]
pub struct DecoderMemory {
    pub h_t: Var,
    pub text_mask: Vec<bool>,
    /// Visual states with their mask; `None` or all-masked skips the visual block.
    pub h_v: Option<(Var, Vec<bool>)>,
    /// Whole encoder output, used by the single-cross-attention ablation.
    pub h: Var,
    pub joint_mask: Vec<bool>,
}

impl DecoderMemory {
    pub fn from_encoder(enc: &EncoderOutput) -> Self {
        Self {
            h_t: enc.h_t,
            text_mask: enc.text_mask(),
            h_v: enc.h_v.map(|v| (v, enc.visual_mask())),
            h: enc.h,
            joint_mask: enc.key_valid.clone(),
        }
    }
}

/// One decoder layer. With `visual_guide` off, the visual block is skipped and
/// the textual block attends over the concatenated encoder output instead.
pub fn decoder_layer(
    model: &UniMs,
    tape: &mut Tape,
    b: &Bound,
    layer: &DecoderLayer,
    y: Var,
    memory: &DecoderMemory,
    rng: &mut Option<ChaCha8Rng>,
) -> Result<Var> {
    let mut y = attn_block(model, tape, b, layer.self_attn, y, y, &AttnMask::causal(), rng)?;
    if model.config.ablation.visual_guide() {
        if let Some((h_v, vmask)) = &memory.h_v {
            if vmask.iter().any(|v| *v) {
                let mask = AttnMask::keys(vmask.clone());
                y = attn_block(model, tape, b, layer.cross_visual, y, *h_v, &mask, rng)?;
            }
        }
        let mask = AttnMask::keys(memory.text_mask.clone());
        y = attn_block(model, tape, b, layer.cross_text, y, memory.h_t, &mask, rng)?;
    } else {
        let mask = AttnMask::keys(memory.joint_mask.clone());
        y = attn_block(model, tape, b, layer.cross_text, y, memory.h, &mask, rng)?;
    }
    ffn_block(model, tape, b, layer.ffn, y, rng)
}

impl UniMs {
    /// Next-token logits (`len × vocab`) for a decoder input beginning with BOS.
    pub fn decode_logits(
        &self,
        tape: &mut Tape,
        b: &Bound,
        memory: &DecoderMemory,
        input_ids: &[usize],
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if input_ids.is_empty() || input_ids.len() > cfg.max_decode_len {
            return Err(shape_err!(
                "decoder input of length {} outside 1..={}",
                input_ids.len(),
                cfg.max_decode_len
            ));
        }
        if let Some(&bad) = input_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(shape_err!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        let l = &self.layout;
        let tok = tape.gather_rows(b[l.tok_emb], input_ids)?;
        let pos_idx: Vec<usize> = (0..input_ids.len()).collect();
        let pos = tape.gather_rows(b[l.dec_pos], &pos_idx)?;
        let e = tape.add(tok, pos)?;
        let mut y = norm(tape, b, l.dec_emb_norm, e)?;
        y = self.dropout(tape, y, rng);
        for layer in &l.dec {
            y = decoder_layer(self, tape, b, layer, y, memory, rng)?;
        }
        tape.matmul_t(y, b[l.tok_emb])
    }
}
