//! Cross-modal importance maps: each scoring head applied to every hidden
//! state of the other modality.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::EncodedExample;
use crate::error::Result;
use crate::model::UniMs;
use crate::model::encoder::head_scores;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMaps {
    pub id: String,
    /// Per real image, one value per patch (the image-CLS slot excluded).
    pub patch_maps: Vec<Vec<f64>>,
    /// One value per real text token.
    pub token_map: Vec<f64>,
}

/// Rescales to `[0, 1]`; a constant input maps to all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Patch importance from the extraction head over final visual states; token
/// importance from the image-selection head over the tapped textual states.
pub fn cross_modal_importance(model: &UniMs, example: &EncodedExample) -> Result<ImportanceMaps> {
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape, false);
    let enc = model.encode_example(&mut tape, &b, example, &mut None)?;

    let text_rows: Vec<usize> = (0..enc.text_len).filter(|&i| enc.key_valid[i]).collect();
    let tapped = enc.tapped(model.config.kd_tap_layer);
    let raw_tokens = head_scores(&mut tape, &b, model.layout.sel_head, tapped, &text_rows)?;
    let token_map = min_max_normalize(tape.value(raw_tokens).data());

    let mut patch_rows = Vec::new();
    let mut counts = Vec::new();
    for ((&cls, &valid), p) in enc.image_cls.iter().zip(&enc.image_valid).zip(&example.images) {
        if valid {
            patch_rows.extend(cls + 1..=cls + p.rows());
            counts.push(p.rows());
        }
    }
    let patch_maps = if patch_rows.is_empty() {
        Vec::new()
    } else {
        let raw = head_scores(&mut tape, &b, model.layout.ext_head, enc.h, &patch_rows)?;
        let flat = min_max_normalize(tape.value(raw).data());
        let mut off = 0;
        counts
            .iter()
            .map(|&n| {
                let m = flat[off..off + n].to_vec();
                off += n;
                m
            })
            .collect()
    };
    Ok(ImportanceMaps {
        id: example.id.clone(),
        patch_maps,
        token_map,
    })
}
