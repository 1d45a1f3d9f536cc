//! ROUGE, greedy oracle labels, image precision and output analysis.

pub mod analysis;
pub mod importance;
pub mod oracle;
pub mod rouge;

pub use analysis::{image_precision, msim_proxy, novel_ngrams, top_k_indices, NovelNgrams};
pub use importance::{cross_modal_importance, min_max_normalize, ImportanceMaps};
pub use oracle::{greedy_oracle, OracleLabels};
pub use rouge::{rouge_l, rouge_n, RougeScore};
