//! JSONL dataset files: one document per line.
//!
//! ```json
//! {"id": "d1", "sentences": ["..."], "images": ["img/d1_0.uimg", {"height": 2, "width": 2, "channels": 1, "data": [0, 0, 1, 1]}],
//!  "captions": ["..."], "summary": "...", "image_refs": [0]}
//! ```
//!
//! Image paths are resolved relative to the dataset file.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::ImageRaster;
use super::tokenize::{detokenize, tokenize};
use crate::error::{Error, Result};

/// A tokenized article with its images and reference summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDocument {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub images: Vec<ImageRaster>,
    pub captions: Option<Vec<Vec<String>>>,
    pub summary: Vec<String>,
    /// Annotated reference images, when the split carries them.
    pub image_refs: Option<Vec<usize>>,
}

impl MultimodalDocument {
    /// All tokens of the article followed by the summary.
    pub fn all_tokens(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flatten().chain(&self.summary)
    }

    pub fn source_tokens(&self) -> Vec<String> {
        self.sentences.iter().flatten().cloned().collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageSource {
    Path(String),
    Inline(ImageRaster),
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    sentences: Vec<String>,
    #[serde(default)]
    images: Vec<ImageSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captions: Option<Vec<String>>,
    summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_refs: Option<Vec<usize>>,
}

/// How [`write_dataset`] stores images.
#[derive(Debug, Clone)]
pub enum ImageStorage {
    Inline,
    /// UIMG files in this directory, relative to the dataset file.
    Files(PathBuf),
}

pub fn parse_document(line: &str, base: &Path) -> Result<MultimodalDocument> {
    let rec: DocRecord = serde_json::from_str(line)?;
    let images = rec
        .images
        .into_iter()
        .map(|src| match src {
            ImageSource::Path(p) => ImageRaster::load(&base.join(p)),
            ImageSource::Inline(img) => {
                ImageRaster::new(img.height, img.width, img.channels, img.data)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(c) = &rec.captions {
        if c.len() != images.len() {
            return Err(Error::Format(format!(
                "document {}: {} captions for {} images",
                rec.id,
                c.len(),
                images.len()
            )));
        }
    }
    Ok(MultimodalDocument {
        id: rec.id,
        sentences: rec.sentences.iter().map(|s| tokenize(s)).collect(),
        images,
        captions: rec
            .captions
            .map(|cs| cs.iter().map(|c| tokenize(c)).collect()),
        summary: tokenize(&rec.summary),
        image_refs: rec.image_refs,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<MultimodalDocument>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_document(&line, base).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_dataset(path: &Path, docs: &[MultimodalDocument], storage: &ImageStorage) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    if let ImageStorage::Files(dir) = storage {
        let full = base.join(dir);
        std::fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
    }
    let mut out = Vec::new();
    for doc in docs {
        let images = doc
            .images
            .iter()
            .enumerate()
            .map(|(k, img)| match storage {
                ImageStorage::Inline => Ok(ImageSource::Inline(img.clone())),
                ImageStorage::Files(dir) => {
                    let rel = dir.join(format!("{}_{k}.uimg", doc.id));
                    img.save_uimg(&base.join(&rel))?;
                    Ok(ImageSource::Path(rel.to_string_lossy().replace('\\', "/")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = DocRecord {
            id: doc.id.clone(),
            sentences: doc.sentences.iter().map(|s| detokenize(s)).collect(),
            images,
            captions: doc
                .captions
                .as_ref()
                .map(|cs| cs.iter().map(|c| detokenize(c)).collect()),
            summary: detokenize(&doc.summary),
            image_refs: doc.image_refs.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_inline_images_and_optional_fields() {
        let line = r#"{"id":"d1","sentences":["The cat sat.","It slept."],"images":[{"height":1,"width":1,"channels":1,"data":[0.5]}],"summary":"Cat sat."}"#;
        let doc = parse_document(line, Path::new(".")).unwrap();
        assert_eq!(doc.id, "d1");
        assert_eq!(doc.sentences[0], ["the", "cat", "sat", "."]);
        assert_eq!(doc.images[0].data, vec![0.5]);
        assert!(doc.captions.is_none() && doc.image_refs.is_none());
    }

    #[test]
    fn caption_count_must_match_images() {
        let line = r#"{"id":"d1","sentences":["a"],"images":[],"captions":["x"],"summary":"a"}"#;
        assert!(matches!(parse_document(line, Path::new(".")), Err(Error::Format(_))));
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let doc = MultimodalDocument {
            id: "x1".into(),
            sentences: vec![tokenize("one two ."), tokenize("three")],
            images: vec![ImageRaster::new(2, 2, 3, vec![0.25; 12]).unwrap()],
            captions: Some(vec![tokenize("a caption")]),
            summary: tokenize("one three"),
            image_refs: Some(vec![0]),
        };
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, std::slice::from_ref(&doc), &ImageStorage::Files("img".into())).unwrap();
        assert!(dir.path().join("img/x1_0.uimg").exists());
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, vec![doc.clone()]);

        write_dataset(&path, std::slice::from_ref(&doc), &ImageStorage::Inline).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), vec![doc]);
    }
}
