//! Tokenization, vocabulary, image handling, dataset files and document encoding.

pub mod dataset;
pub mod encode;
pub mod image;
pub mod tokenize;
pub mod vocab;

pub use dataset::{read_dataset, write_dataset, ImageStorage, MultimodalDocument};
pub use encode::{encode_document, EncodedExample};
pub use image::{patchify, unpatchify, ImageRaster};
pub use tokenize::{detokenize, tokenize};
pub use vocab::Vocabulary;
