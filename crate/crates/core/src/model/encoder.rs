//! Joint text+image encoder and the two encoder-side scoring heads.

use rand_chacha::ChaCha8Rng;

use super::{attn_block, ffn_block, linear, norm, Bound, Linear, UniMs};
use crate::autodiff::{AttnMask, Tape, Var};
use crate::data::EncodedExample;
use crate::error::{shape_err, Error, Result};

/// Encoder states for one example. Positions index rows of `h`: the text
/// stream occupies `0..text_len`, the visual stream follows.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub h: Var,
    pub h_t: Var,
    /// `None` when the example has no images.
    pub h_v: Option<Var>,
    pub text_len: usize,
    pub visual_len: usize,
    pub sentence_cls: Vec<usize>,
    /// Image-CLS rows of every image slot, padded ones included.
    pub image_cls: Vec<usize>,
    pub image_valid: Vec<bool>,
    /// Validity of every row of `h`.
    pub key_valid: Vec<bool>,
    /// Output of each encoder layer, first to last.
    pub layer_states: Vec<Var>,
}

impl EncoderOutput {
    pub fn text_mask(&self) -> Vec<bool> {
        self.key_valid[..self.text_len].to_vec()
    }

    pub fn visual_mask(&self) -> Vec<bool> {
        self.key_valid[self.text_len..].to_vec()
    }

    pub fn has_visual(&self) -> bool {
        self.visual_mask().iter().any(|v| *v)
    }

    /// States after 1-based layer `layer`.
    pub fn tapped(&self, layer: usize) -> Var {
        self.layer_states[layer - 1]
    }

    pub fn valid_image_cls(&self) -> Vec<usize> {
        self.image_cls
            .iter()
            .zip(&self.image_valid)
            .filter(|(_, v)| **v)
            .map(|(p, _)| *p)
            .collect()
    }
}

impl UniMs {
    /// Token embeddings for the text stream, projected patches (each image led
    /// by the CLS input) plus within-image positions for the visual stream,
    /// then joint positions over the whole sequence.
    pub fn embed_multimodal(&self, tape: &mut Tape, b: &Bound, ex: &EncodedExample) -> Result<Var> {
        let cfg = &self.config;
        let l = &self.layout;
        if ex.text_len() > cfg.max_text_tokens {
            return Err(shape_err!(
                "text stream of {} exceeds max_text_tokens {}",
                ex.text_len(),
                cfg.max_text_tokens
            ));
        }
        if ex.n_images() > cfg.max_images {
            return Err(shape_err!("{} images exceed max_images {}", ex.n_images(), cfg.max_images));
        }
        if let Some(&bad) = ex.text_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(shape_err!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        let k = cfg.patches_per_image();
        for p in &ex.images {
            if p.rows() != k || p.cols() != cfg.patch_dim() {
                return Err(shape_err!(
                    "image patches {:?} do not match configured {k}x{}",
                    p.shape(),
                    cfg.patch_dim()
                ));
            }
        }

        let mut parts = Vec::with_capacity(2);
        if ex.text_len() > 0 {
            parts.push(tape.gather_rows(b[l.tok_emb], &ex.text_ids)?);
        }
        if !ex.images.is_empty() {
            let mut rows = Vec::with_capacity(2 * ex.n_images());
            for p in &ex.images {
                rows.push(b[l.v_cls]);
                rows.push(tape.constant(p.clone()));
            }
            let raw = tape.concat_rows(&rows)?;
            let proj = tape.matmul(raw, b[l.patch_proj])?;
            let vpos_idx: Vec<usize> = (0..ex.n_images()).flat_map(|_| 0..=k).collect();
            let vpos = tape.gather_rows(b[l.v_pos], &vpos_idx)?;
            parts.push(tape.add(proj, vpos)?);
        }
        if parts.is_empty() {
            return Err(Error::Input(format!("example {} is empty", ex.id)));
        }
        let e = tape.concat_rows(&parts)?;
        let positions: Vec<usize> = (0..ex.text_len())
            .chain((0..ex.visual_len()).map(|j| cfg.max_text_tokens + j))
            .collect();
        let epos = tape.gather_rows(b[l.e_pos], &positions)?;
        tape.add(e, epos)
    }

    /// Post-norm bidirectional transformer over the joint sequence. Padded
    /// positions are masked as keys.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        embeddings: Var,
        ex: &EncodedExample,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let text_len = ex.text_len();
        let visual_len = ex.visual_len();
        let mut key_valid = ex.text_valid.clone();
        for (p, &v) in ex.images.iter().zip(&ex.image_valid) {
            key_valid.extend(std::iter::repeat_n(v, 1 + p.rows()));
        }
        if key_valid.len() != tape.value(embeddings).rows() {
            return Err(shape_err!(
                "embedding rows {} do not match example layout {}",
                tape.value(embeddings).rows(),
                key_valid.len()
            ));
        }
        let mask = AttnMask::keys(key_valid.clone());

        let mut x = norm(tape, b, self.layout.enc_emb_norm, embeddings)?;
        x = self.dropout(tape, x, rng);
        let mut layer_states = Vec::with_capacity(self.layout.enc.len());
        for layer in &self.layout.enc {
            x = attn_block(self, tape, b, layer.attn, x, x, &mask, rng)?;
            x = ffn_block(self, tape, b, layer.ffn, x, rng)?;
            layer_states.push(x);
        }
        let h_t = tape.slice_rows(x, 0, text_len)?;
        let h_v = if visual_len > 0 {
            Some(tape.slice_rows(x, text_len, visual_len)?)
        } else {
            None
        };
        let image_cls = ex.image_cls_offsets().iter().map(|o| text_len + o).collect();
        Ok(EncoderOutput {
            h: x,
            h_t,
            h_v,
            text_len,
            visual_len,
            sentence_cls: ex.sentence_cls.clone(),
            image_cls,
            image_valid: ex.image_valid.clone(),
            key_valid,
            layer_states,
        })
    }

    pub fn encode_example(
        &self,
        tape: &mut Tape,
        b: &Bound,
        ex: &EncodedExample,
        rng: &mut Option<ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let e = self.embed_multimodal(tape, b, ex)?;
        self.encode(tape, b, e, ex, rng)
    }

    /// Image-selection head applied to the image-CLS states of the tap layer;
    /// one score per real (unpadded) image.
    pub fn image_select_scores(&self, tape: &mut Tape, b: &Bound, enc: &EncoderOutput) -> Result<Var> {
        let rows = enc.valid_image_cls();
        if rows.is_empty() {
            return Err(Error::Input("image selection needs at least one image".into()));
        }
        let states = enc.tapped(self.config.kd_tap_layer);
        head_scores(tape, b, self.layout.sel_head, states, &rows)
    }

    /// Extraction head applied to each sentence-CLS state of the last layer.
    pub fn sentence_scores(&self, tape: &mut Tape, b: &Bound, enc: &EncoderOutput) -> Result<Var> {
        if enc.sentence_cls.is_empty() {
            return Err(Error::Input("sentence scoring needs at least one sentence".into()));
        }
        head_scores(tape, b, self.layout.ext_head, enc.h, &enc.sentence_cls)
    }
}

/// `W·h + b` on selected rows, flattened to a vector.
pub(crate) fn head_scores(tape: &mut Tape, b: &Bound, head: Linear, states: Var, rows: &[usize]) -> Result<Var> {
    let picked = tape.gather_rows(states, rows)?;
    let s = linear(tape, b, head, picked)?;
    tape.reshape(s, &[rows.len()])
}
