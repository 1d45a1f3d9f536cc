//! Reference outputs of seeded components. Regenerate with `UPDATE_GOLDEN=1`.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Serialize};

use unims::config::ModelConfig;
use unims::inference::head_scores;
use unims::metrics::cross_modal_importance;
use unims::model::UniMs;
use unims::synth::{generate, random_example, tiny_model_config, SynthConfig};
use unims::teacher::{MockTeacher, Teacher, TeacherScores};

const TOL: f64 = 1e-12;

fn check<T: Serialize + DeserializeOwned>(name: &str, got: &T, flat: impl Fn(&T) -> Vec<f64>) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(got).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let want: T = serde_json::from_str(&text).unwrap();
    let (a, b) = (flat(got), flat(&want));
    assert_eq!(a.len(), b.len(), "{name}");
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!((x - y).abs() <= TOL, "{name}[{i}]: {x} vs {y}");
    }
}

fn seven() -> ModelConfig {
    ModelConfig {
        seed: 7,
        ..tiny_model_config()
    }
}

#[test]
fn mock_teacher_scores() {
    let docs = generate(&SynthConfig {
        n_docs: 4,
        ..SynthConfig::default()
    });
    let cfg = ModelConfig {
        max_images: 4,
        ..ModelConfig::default()
    };
    let teacher = MockTeacher::new(&cfg, 7);
    let scores: Vec<TeacherScores> = docs.iter().map(|d| teacher.score_reference(d).unwrap()).collect();
    check("mock_teacher_seed7.json", &scores, |v| {
        v.iter().flat_map(|s| s.scores.clone()).collect()
    });
}

#[test]
fn untrained_selection_scores() {
    let model = UniMs::new(seven()).unwrap();
    let ex = random_example(&model.config, 3, &mut ChaCha8Rng::seed_from_u64(7)).example;
    let (sentences, images) = head_scores(&model, &ex).unwrap();
    check("untrained_scores_seed7.json", &(images, sentences), |(a, b)| {
        a.iter().chain(b).copied().collect()
    });
}

#[test]
fn importance_map() {
    let model = UniMs::new(seven()).unwrap();
    let ex = random_example(&model.config, 2, &mut ChaCha8Rng::seed_from_u64(7)).example;
    let maps = cross_modal_importance(&model, &ex).unwrap();
    assert_eq!(maps.token_map.len(), ex.text_len());
    assert_eq!(maps.patch_maps.len(), 2);
    assert!(maps.patch_maps.iter().all(|m| m.len() == model.config.patches_per_image()));
    check("importance_seed7.json", &maps, |m| {
        m.token_map.iter().chain(m.patch_maps.iter().flatten()).copied().collect()
    });
}

#[test]
fn constant_heads_give_zero_maps() {
    let mut model = UniMs::new(seven()).unwrap();
    for id in [model.layout.ext_head.w, model.layout.sel_head.w] {
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let ex = random_example(&model.config, 2, &mut ChaCha8Rng::seed_from_u64(7)).example;
    let maps = cross_modal_importance(&model, &ex).unwrap();
    assert!(maps.token_map.iter().chain(maps.patch_maps.iter().flatten()).all(|v| *v == 0.0));
}
