//! Turns a document into the model's two input streams.
//!
//! Text stream: `[CLS] s₁ [SEP] [CLS] s₂ [SEP] …`, truncated to whole
//! sentences. Visual stream: per image, one CLS slot followed by its patches.

use super::dataset::MultimodalDocument;
use super::image::patchify;
use super::vocab::{Vocabulary, BOS, CLS, EOS, PAD, SEP};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub text_ids: Vec<usize>,
    /// `false` marks padding added by [`collate`].
    pub text_valid: Vec<bool>,
    /// Position of each retained sentence's CLS marker in the text stream.
    pub sentence_cls: Vec<usize>,
    /// One `patches × patch_dim` matrix per image.
    pub images: Vec<Tensor>,
    pub image_valid: Vec<bool>,
    /// Summary ids followed by EOS, at most `max_decode_len` long.
    pub target_ids: Vec<usize>,
}

impl EncodedExample {
    pub fn n_sentences(&self) -> usize {
        self.sentence_cls.len()
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_valid_images(&self) -> usize {
        self.image_valid.iter().filter(|v| **v).count()
    }

    pub fn patches_per_image(&self) -> usize {
        self.images.first().map_or(0, Tensor::rows)
    }

    pub fn text_len(&self) -> usize {
        self.text_ids.len()
    }

    pub fn visual_len(&self) -> usize {
        self.images.iter().map(|p| 1 + p.rows()).sum()
    }

    /// Offsets of each image's CLS slot within the visual stream.
    pub fn image_cls_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.images
            .iter()
            .map(|p| {
                let o = off;
                off += 1 + p.rows();
                o
            })
            .collect()
    }

    /// Teacher-forcing input: BOS followed by all targets but the last.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(self.target_ids[..self.target_ids.len().saturating_sub(1)].iter().copied())
            .collect()
    }
}

/// Number of leading sentences that fit in the text budget. A first sentence
/// too long on its own is kept, hard-truncated.
pub fn retained_sentences(sentence_lens: &[usize], max_text_tokens: usize) -> usize {
    let mut used = 0;
    for (i, &len) in sentence_lens.iter().enumerate() {
        if used + len + 2 <= max_text_tokens {
            used += len + 2;
        } else {
            return if i == 0 { 1 } else { i };
        }
    }
    sentence_lens.len()
}

pub fn encode_document(doc: &MultimodalDocument, vocab: &Vocabulary, config: &ModelConfig) -> Result<EncodedExample> {
    if doc.sentences.is_empty() {
        return Err(Error::Input(format!("document {} has no sentences", doc.id)));
    }
    let lens: Vec<usize> = doc.sentences.iter().map(Vec::len).collect();
    let keep = retained_sentences(&lens, config.max_text_tokens);
    let mut text_ids = Vec::new();
    let mut sentence_cls = Vec::with_capacity(keep);
    for sent in &doc.sentences[..keep] {
        let room = config.max_text_tokens - text_ids.len() - 2;
        sentence_cls.push(text_ids.len());
        text_ids.push(CLS);
        text_ids.extend(sent.iter().take(room).map(|t| vocab.id(t)));
        text_ids.push(SEP);
    }

    let images = doc
        .images
        .iter()
        .take(config.max_images)
        .map(|img| {
            let img = img
                .with_channels(config.channels)
                .resize_nearest(config.image_resolution);
            patchify(&img, config.patch_size)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut target_ids: Vec<usize> = doc
        .summary
        .iter()
        .take(config.max_decode_len - 1)
        .map(|t| vocab.id(t))
        .collect();
    target_ids.push(EOS);

    Ok(EncodedExample {
        id: doc.id.clone(),
        text_valid: vec![true; text_ids.len()],
        text_ids,
        sentence_cls,
        image_valid: vec![true; images.len()],
        images,
        target_ids,
    })
}

/// Pads text and visual streams independently to the batch maxima.
pub fn collate(batch: &[EncodedExample]) -> Vec<EncodedExample> {
    let max_text = batch.iter().map(EncodedExample::text_len).max().unwrap_or(0);
    let max_images = batch.iter().map(EncodedExample::n_images).max().unwrap_or(0);
    let blank = batch
        .iter()
        .find_map(|e| e.images.first())
        .map(|t| Tensor::zeros(t.shape()));
    batch
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let pad = max_text - e.text_len();
            e.text_ids.extend(std::iter::repeat_n(PAD, pad));
            e.text_valid.extend(std::iter::repeat_n(false, pad));
            if let Some(blank) = &blank {
                while e.images.len() < max_images {
                    e.images.push(blank.clone());
                    e.image_valid.push(false);
                }
            }
            e
        })
        .collect()
}
