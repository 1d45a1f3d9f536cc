//! Per-image relevance scores used as distillation targets.
//!
//! Three sources share the [`Teacher`] interface: a seeded random-projection
//! stand-in for a contrastive image-text model, scores precomputed elsewhere
//! and read from JSONL, and caption-based ROUGE ranking.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::image::patchify;
use crate::data::MultimodalDocument;
use crate::error::{Error, Result};
use crate::metrics::{msim_proxy, rouge_l};

/// One relevance score per retained image, in image order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherScores {
    pub id: String,
    pub scores: Vec<f64>,
}

pub trait Teacher: Send + Sync {
    /// Scores every retained image of `doc` against `summary`.
    fn score(&self, doc: &MultimodalDocument, summary: &[String]) -> Result<TeacherScores>;

    fn name(&self) -> String;

    /// Scores against the document's own reference summary.
    fn score_reference(&self, doc: &MultimodalDocument) -> Result<TeacherScores> {
        self.score(doc, &doc.summary)
    }
}

const EMBED_DIM: usize = 64;
const TEXT_BUCKETS: usize = 256;

/// Cosine similarity of random projections: the summary as hashed
/// bag-of-words, each image as its mean patch vector (pixels centred at 0.5).
pub struct MockTeacher {
    text_proj: Vec<f64>,
    image_proj: Vec<f64>,
    patch_size: usize,
    resolution: usize,
    channels: usize,
    max_images: usize,
}

impl MockTeacher {
    pub fn new(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let text_proj = draw(TEXT_BUCKETS * EMBED_DIM);
        let image_proj = draw(config.patch_dim() * EMBED_DIM);
        Self {
            text_proj,
            image_proj,
            patch_size: config.patch_size,
            resolution: config.image_resolution,
            channels: config.channels,
            max_images: config.max_images,
        }
    }

    fn project(input: &[f64], proj: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; EMBED_DIM];
        for (x, row) in input.iter().zip(proj.chunks(EMBED_DIM)) {
            if *x != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
        }
        out
    }

    fn text_embedding(&self, summary: &[String]) -> Vec<f64> {
        let mut bow = vec![0.0; TEXT_BUCKETS];
        for tok in summary {
            bow[(fnv1a(tok.as_bytes()) % TEXT_BUCKETS as u64) as usize] += 1.0;
        }
        Self::project(&bow, &self.text_proj)
    }

    fn image_embedding(&self, img: &crate::data::ImageRaster) -> Result<Vec<f64>> {
        let img = img.with_channels(self.channels).resize_nearest(self.resolution);
        let patches = patchify(&img, self.patch_size)?;
        let n = patches.rows() as f64;
        let mut mean = vec![0.0; patches.cols()];
        for r in 0..patches.rows() {
            for (m, v) in mean.iter_mut().zip(patches.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n - 0.5);
        Ok(Self::project(&mean, &self.image_proj))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

impl Teacher for MockTeacher {
    fn score(&self, doc: &MultimodalDocument, summary: &[String]) -> Result<TeacherScores> {
        let text = self.text_embedding(summary);
        let scores = doc
            .images
            .iter()
            .take(self.max_images)
            .map(|img| Ok(cosine(&self.image_embedding(img)?, &text)))
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherScores {
            id: doc.id.clone(),
            scores,
        })
    }

    fn name(&self) -> String {
        "mock".into()
    }
}

/// Scores computed by an external model, keyed by document id.
pub struct FileTeacher {
    scores: HashMap<String, Vec<f64>>,
    max_images: usize,
}

impl FileTeacher {
    pub fn new(scores: HashMap<String, Vec<f64>>, max_images: usize) -> Self {
        Self { scores, max_images }
    }

    pub fn load(path: &Path, max_images: usize) -> Result<Self> {
        let rows = read_teacher_scores(path)?;
        Ok(Self::new(
            rows.into_iter().map(|r| (r.id, r.scores)).collect(),
            max_images,
        ))
    }
}

impl Teacher for FileTeacher {
    fn score(&self, doc: &MultimodalDocument, _summary: &[String]) -> Result<TeacherScores> {
        let stored = self
            .scores
            .get(&doc.id)
            .ok_or_else(|| Error::Lookup(format!("no teacher scores for document '{}'", doc.id)))?;
        if stored.len() != doc.images.len() {
            return Err(Error::Format(format!(
                "document '{}' has {} images but {} teacher scores",
                doc.id,
                doc.images.len(),
                stored.len()
            )));
        }
        if stored.iter().any(|s| !s.is_finite()) {
            return Err(Error::Format(format!("non-finite teacher score for '{}'", doc.id)));
        }
        Ok(TeacherScores {
            id: doc.id.clone(),
            scores: stored.iter().take(self.max_images).copied().collect(),
        })
    }

    fn name(&self) -> String {
        "file".into()
    }
}

/// ROUGE-L F1 between each image caption and the summary.
pub struct RougeRankTeacher {
    max_images: usize,
}

impl RougeRankTeacher {
    pub fn new(max_images: usize) -> Self {
        Self { max_images }
    }
}

impl Teacher for RougeRankTeacher {
    fn score(&self, doc: &MultimodalDocument, summary: &[String]) -> Result<TeacherScores> {
        let n = doc.images.len().min(self.max_images);
        let scores = (0..n)
            .map(|i| {
                let caption = doc
                    .captions
                    .as_ref()
                    .and_then(|c| c.get(i))
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| {
                        Error::Input(format!("document '{}': image {i} has no caption", doc.id))
                    })?;
                Ok(rouge_l(caption, summary).f1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherScores {
            id: doc.id.clone(),
            scores,
        })
    }

    fn name(&self) -> String {
        "rouge-rank".into()
    }
}

/// `mock`, `file:<path>` or `rouge-rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TeacherSource {
    Mock,
    File(std::path::PathBuf),
    RougeRank,
}

impl std::str::FromStr for TeacherSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(TeacherSource::Mock),
            "rouge-rank" => Ok(TeacherSource::RougeRank),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(TeacherSource::File(p.into())),
                _ => Err(Error::Input(format!(
                    "unknown teacher '{s}' (expected mock, file:<path> or rouge-rank)"
                ))),
            },
        }
    }
}

impl std::fmt::Display for TeacherSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TeacherSource::Mock => write!(f, "mock"),
            TeacherSource::File(p) => write!(f, "file:{}", p.display()),
            TeacherSource::RougeRank => write!(f, "rouge-rank"),
        }
    }
}

impl TeacherSource {
    pub fn build(&self, config: &ModelConfig, seed: u64) -> Result<Box<dyn Teacher>> {
        Ok(match self {
            TeacherSource::Mock => Box::new(MockTeacher::new(config, seed)),
            TeacherSource::File(p) => Box::new(FileTeacher::load(p, config.max_images)?),
            TeacherSource::RougeRank => Box::new(RougeRankTeacher::new(config.max_images)),
        })
    }
}

/// M_sim proxy: best teacher relevance of the selected images against a
/// generated summary.
pub fn msim_with_teacher(
    teacher: &dyn Teacher,
    doc: &MultimodalDocument,
    summary: &[String],
    selected: &[usize],
) -> Result<f64> {
    let scores = teacher.score(doc, summary)?;
    msim_proxy(selected, &scores.scores)
}

pub fn read_teacher_scores(path: &Path) -> Result<Vec<TeacherScores>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TeacherScores = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_teacher_scores(path: &Path, rows: &[TeacherScores]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, ImageRaster};

    fn img(v: f32) -> ImageRaster {
        let data = (0..32 * 32 * 3).map(|i| (v + (i % 7) as f32 * 0.05).min(1.0)).collect();
        ImageRaster::new(32, 32, 3, data).unwrap()
    }

    fn doc(images: Vec<ImageRaster>) -> MultimodalDocument {
        MultimodalDocument {
            id: "d1".into(),
            sentences: vec![tokenize("the cat sat on the mat")],
            captions: None,
            summary: tokenize("the cat sat"),
            image_refs: None,
            images,
        }
    }

    #[test]
    fn mock_identical_images_score_identically() {
        let t = MockTeacher::new(&ModelConfig::default(), 7);
        let s = t.score_reference(&doc(vec![img(0.2), img(0.2)])).unwrap();
        assert_eq!(s.scores[0], s.scores[1]);
    }

    #[test]
    fn mock_single_image_in_cosine_range() {
        let t = MockTeacher::new(&ModelConfig::default(), 7);
        let s = t.score_reference(&doc(vec![img(0.7)])).unwrap();
        assert_eq!(s.scores.len(), 1);
        assert!((-1.0..=1.0).contains(&s.scores[0]));
    }

    #[test]
    fn mock_is_permutation_equivariant() {
        let t = MockTeacher::new(&ModelConfig::default(), 3);
        let a = t.score_reference(&doc(vec![img(0.1), img(0.5), img(0.9)])).unwrap();
        let b = t.score_reference(&doc(vec![img(0.9), img(0.1), img(0.5)])).unwrap();
        assert_eq!(b.scores, vec![a.scores[2], a.scores[0], a.scores[1]]);
    }

    #[test]
    fn file_teacher_lookup() {
        let mut m = HashMap::new();
        m.insert("d1".to_string(), vec![0.2, 0.8]);
        let t = FileTeacher::new(m, 10);
        let s = t.score_reference(&doc(vec![img(0.1), img(0.2)])).unwrap();
        assert_eq!(s.scores, vec![0.2, 0.8]);

        let mut other = doc(vec![img(0.1), img(0.2)]);
        other.id = "nope".into();
        assert!(matches!(t.score_reference(&other), Err(Error::Lookup(_))));

        let mut m = HashMap::new();
        m.insert("d1".to_string(), vec![0.2, 0.8, 0.1]);
        let t = FileTeacher::new(m, 10);
        assert!(matches!(
            t.score_reference(&doc(vec![img(0.1), img(0.2)])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_teacher_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "{\"id\":\"d1\",\"scores\":[0.2,0.8]}\n").unwrap();
        let t = FileTeacher::load(&p, 10).unwrap();
        assert_eq!(t.score_reference(&doc(vec![img(0.1), img(0.2)])).unwrap().scores, vec![0.2, 0.8]);
    }

    #[test]
    fn rouge_rank_examples() {
        let t = RougeRankTeacher::new(10);
        let mut d = doc(vec![img(0.1), img(0.2), img(0.3)]);
        d.summary = tokenize("the cat");
        d.captions = Some(vec![tokenize("the cat"), tokenize("dogs run"), tokenize("the cat sat")]);
        let s = t.score_reference(&d).unwrap();
        assert_eq!(s.scores[0], 1.0);
        assert_eq!(s.scores[1], 0.0);
        assert!((s.scores[2] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn rouge_rank_missing_caption_names_index() {
        let t = RougeRankTeacher::new(10);
        let mut d = doc(vec![img(0.1), img(0.2)]);
        d.captions = Some(vec![tokenize("x"), vec![]]);
        let err = t.score_reference(&d).unwrap_err().to_string();
        assert!(err.contains("image 1"), "{err}");
    }

    #[test]
    fn msim_single_selection_is_teacher_score() {
        let t = MockTeacher::new(&ModelConfig::default(), 7);
        let d = doc(vec![img(0.2), img(0.6)]);
        let s = t.score_reference(&d).unwrap();
        let m = msim_with_teacher(&t, &d, &d.summary, &[1]).unwrap();
        assert_eq!(m, s.scores[1]);
    }

    #[test]
    fn source_parsing() {
        assert_eq!("mock".parse::<TeacherSource>().unwrap(), TeacherSource::Mock);
        assert_eq!(
            "file:x.jsonl".parse::<TeacherSource>().unwrap(),
            TeacherSource::File("x.jsonl".into())
        );
        assert!("clip".parse::<TeacherSource>().is_err());
    }
}
