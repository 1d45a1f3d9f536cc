//! Seeded synthetic corpus: pseudo-word articles, striped images, and
//! summaries copied (with a small edit) from one or two source sentences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::vocab::{CLS, EOS, NUM_RESERVED, SEP};
use crate::data::{EncodedExample, ImageRaster, MultimodalDocument};
use crate::model::TrainingExample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_images: usize,
    pub max_images: usize,
    pub resolution: usize,
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 32,
            min_sentences: 3,
            max_sentences: 6,
            min_words: 4,
            max_words: 8,
            min_images: 2,
            max_images: 4,
            resolution: 32,
            pool_size: 240,
            seed: 7,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// `size` distinct two-syllable pseudo-words.
pub fn word_pool(size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    words.shuffle(rng);
    words.truncate(size);
    words
}

fn striped_image(res: usize, rng: &mut ChaCha8Rng) -> ImageRaster {
    let base: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let kind = rng.random_range(0..3u8);
    let period = [4, 8, 16][rng.random_range(0..3)];
    let amp: f32 = rng.random_range(0.05..0.1);
    let mut data = Vec::with_capacity(res * res * 3);
    for y in 0..res {
        for x in 0..res {
            let on = match kind {
                0 => (y / period) % 2 == 0,
                1 => (x / period) % 2 == 0,
                _ => (x / period + y / period) % 2 == 0,
            };
            for b in base {
                let v = if on { b + amp } else { b - amp };
                // 8-bit quantized so PPM export is lossless
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    ImageRaster::new(res, res, 3, data).expect("consistent raster")
}

pub fn generate(cfg: &SynthConfig) -> Vec<MultimodalDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = word_pool(cfg.pool_size, &mut rng);
    (0..cfg.n_docs)
        .map(|d| {
            let n_sent = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
            let sentences: Vec<Vec<String>> = (0..n_sent)
                .map(|_| {
                    let n = rng.random_range(cfg.min_words..=cfg.max_words);
                    (0..n).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
                })
                .collect();

            let n_pick = rng.random_range(1..=2.min(n_sent));
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, n_sent, n_pick).into_vec();
            picked.sort_unstable();
            let mut summary: Vec<String> = Vec::new();
            for (i, &s) in picked.iter().enumerate() {
                let sent = &sentences[s];
                if i == 0 && sent.len() > 3 {
                    // drop one word so the summary is not a verbatim copy
                    let skip = rng.random_range(0..sent.len());
                    summary.extend(sent.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, w)| w.clone()));
                } else {
                    summary.extend(sent.iter().cloned());
                }
            }

            let n_img = rng.random_range(cfg.min_images..=cfg.max_images);
            let images = (0..n_img).map(|_| striped_image(cfg.resolution, &mut rng)).collect();
            let topic: Vec<usize> = (0..n_img).map(|_| rng.random_range(0..n_sent)).collect();
            let captions = topic.iter().map(|&s| sentences[s].iter().take(3).cloned().collect()).collect();
            let refs: Vec<usize> = (0..n_img).filter(|k| picked.contains(&topic[*k])).collect();

            MultimodalDocument {
                id: format!("syn{d:03}"),
                sentences,
                images,
                captions: Some(captions),
                summary,
                image_refs: (!refs.is_empty()).then_some(refs),
            }
        })
        .collect()
}

/// A model small enough for exhaustive finite-difference checks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        ffn_dim: 12,
        vocab_size: 16,
        patch_size: 4,
        image_resolution: 8,
        channels: 3,
        max_images: 3,
        max_text_tokens: 16,
        kd_temperature: 2.0,
        kd_tap_layer: 1,
        max_decode_len: 6,
        ..ModelConfig::default()
    }
}

/// A random already-encoded example with `n_images` images, plus random
/// oracle labels (at least one positive) and teacher scores.
pub fn random_example(cfg: &ModelConfig, n_images: usize, rng: &mut ChaCha8Rng) -> TrainingExample {
    let word = |rng: &mut ChaCha8Rng| rng.random_range(NUM_RESERVED..cfg.vocab_size);
    let n_sent = rng.random_range(2..=3);
    let mut text_ids = Vec::new();
    let mut sentence_cls = Vec::new();
    for _ in 0..n_sent {
        sentence_cls.push(text_ids.len());
        text_ids.push(CLS);
        for _ in 0..rng.random_range(1..=3) {
            text_ids.push(word(rng));
        }
        text_ids.push(SEP);
    }
    let k = cfg.patches_per_image();
    let images: Vec<Tensor> = (0..n_images)
        .map(|_| {
            let data = (0..k * cfg.patch_dim()).map(|_| rng.random::<f64>()).collect();
            Tensor::matrix(k, cfg.patch_dim(), data).expect("sized")
        })
        .collect();
    let mut target_ids: Vec<usize> = (0..rng.random_range(1..cfg.max_decode_len)).map(|_| word(rng)).collect();
    target_ids.push(EOS);
    let mut oracle_labels: Vec<f64> = (0..n_sent).map(|_| f64::from(rng.random_bool(0.5))).collect();
    oracle_labels[rng.random_range(0..n_sent)] = 1.0;
    let teacher_scores = (0..n_images).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrainingExample {
        example: EncodedExample {
            id: format!("r{}", rng.random::<u32>()),
            text_valid: vec![true; text_ids.len()],
            text_ids,
            sentence_cls,
            image_valid: vec![true; n_images],
            images,
            target_ids,
        },
        oracle_labels,
        teacher_scores,
    }
}
