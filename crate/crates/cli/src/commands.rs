use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unims::data::{encode_document, read_dataset, write_dataset, ImageStorage, MultimodalDocument, Vocabulary};
use unims::inference::{predict, Prediction};
use unims::metrics::{cross_modal_importance, greedy_oracle, ImportanceMaps};
use unims::model::UniMs;
use unims::synth::{generate, SynthConfig};
use unims::teacher::{write_teacher_scores, Teacher};
use unims::training::{load_checkpoint, prepare_examples, train, RegistryEntry, TrainState};
use unims::{Error, Result, RunConfig};

use crate::manifest::RunManifest;
use crate::report::{file_report, mean_summary, ngram_curve, EvalReport, Rouge};
use crate::{Cli, Command};

pub const VOCAB: &str = "vocab.json";

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Input("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(cli)?;
    let out = cli.common.out.as_path();
    RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        command: command_name(&cli.command).into(),
        argv: std::env::args().collect(),
        config: cfg.clone(),
        seed: cfg.model.seed,
        data: data_paths(&cli.command),
        teacher: cli.common.teacher.to_string(),
        out: out.to_path_buf(),
        threads: cli.common.threads,
    }
    .write(out)?;

    let teacher = || cli.common.teacher.build(&cfg.model, cfg.model.seed);
    match &cli.command {
        Command::Synth { n_docs, name } => synth(&cfg, *n_docs, name, out),
        Command::BuildVocab { data } => build_vocab(&cfg, data, out),
        Command::Oracle { data } => oracle(data, out),
        Command::TeacherScores { data } => teacher_scores(&*teacher()?, data, out),
        Command::Train { data, val, resume } => {
            train_cmd(&cfg, &*teacher()?, data, val.as_deref(), resume.as_deref(), out)
        }
        Command::Summarize {
            data,
            checkpoint,
            vocab,
            topk_images,
        } => summarize(&cfg, data, checkpoint, vocab.as_deref(), *topk_images, out),
        Command::Evaluate { data, predictions } => evaluate(&*teacher()?, data, predictions, out),
        Command::AnalyzeNgrams { data, predictions } => analyze_ngrams(data, predictions, out),
        Command::Visualize {
            data,
            checkpoint,
            vocab,
        } => visualize(data, checkpoint, vocab.as_deref(), out),
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.model.seed = s;
    }
    if let Some(a) = cli.common.ablation {
        cfg.model.ablation = a;
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::BuildVocab { .. } => "build-vocab",
        Command::Oracle { .. } => "oracle",
        Command::TeacherScores { .. } => "teacher-scores",
        Command::Train { .. } => "train",
        Command::Summarize { .. } => "summarize",
        Command::Evaluate { .. } => "evaluate",
        Command::AnalyzeNgrams { .. } => "analyze-ngrams",
        Command::Visualize { .. } => "visualize",
    }
}

fn data_paths(c: &Command) -> Vec<PathBuf> {
    match c {
        Command::Synth { .. } => vec![],
        Command::BuildVocab { data } | Command::Oracle { data } | Command::TeacherScores { data } => {
            vec![data.clone()]
        }
        Command::Train { data, val, .. } => std::iter::once(data.clone()).chain(val.clone()).collect(),
        Command::Summarize { data, .. } | Command::Visualize { data, .. } => vec![data.clone()],
        Command::Evaluate { data, predictions } => {
            std::iter::once(data.clone()).chain(predictions.iter().cloned()).collect()
        }
        Command::AnalyzeNgrams { data, predictions } => vec![data.clone(), predictions.clone()],
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
            );
        }
    }
    Ok(out)
}

fn by_id(docs: &[MultimodalDocument]) -> HashMap<&str, &MultimodalDocument> {
    docs.iter().map(|d| (d.id.as_str(), d)).collect()
}

fn synth(cfg: &RunConfig, n_docs: usize, name: &str, out: &Path) -> Result<()> {
    let docs = generate(&SynthConfig {
        n_docs,
        seed: cfg.model.seed,
        resolution: cfg.model.image_resolution,
        ..SynthConfig::default()
    });
    let path = out.join(name);
    write_dataset(&path, &docs, &ImageStorage::Files("images".into()))?;
    println!("wrote {} synthetic documents to {}", docs.len(), path.display());
    Ok(())
}

fn build_vocabulary(cfg: &RunConfig, docs: &[MultimodalDocument]) -> Vocabulary {
    Vocabulary::build(docs.iter().flat_map(|d| d.all_tokens()), cfg.vocab.min_count, cfg.vocab.max_size)
}

fn build_vocab(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let vocab = build_vocabulary(cfg, &docs);
    vocab.save(&out.join(VOCAB))?;
    println!("vocabulary: {} entries from {} documents", vocab.len(), docs.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub id: String,
    pub selected: Vec<usize>,
    pub trace: Vec<f64>,
    pub degenerate: bool,
    pub labels: Vec<f64>,
}

fn oracle(data: &Path, out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let rows: Vec<OracleRow> = docs
        .par_iter()
        .map(|d| {
            let o = greedy_oracle(&d.sentences, &d.summary);
            OracleRow {
                id: d.id.clone(),
                labels: o.labels(d.sentences.len()),
                selected: o.selected,
                trace: o.trace,
                degenerate: o.degenerate,
            }
        })
        .collect();
    write_jsonl(&out.join("oracle.jsonl"), &rows)?;
    let n = rows.len().max(1) as f64;
    let picked: usize = rows.iter().map(|r| r.selected.len()).sum();
    let final_rl: f64 = rows.iter().map(|r| r.trace.last().copied().unwrap_or(0.0)).sum();
    println!(
        "oracle: {} documents, {:.2} sentences each, mean ROUGE-L {:.4}, {} degenerate",
        rows.len(),
        picked as f64 / n,
        final_rl / n,
        rows.iter().filter(|r| r.degenerate).count()
    );
    Ok(())
}

fn teacher_scores(teacher: &dyn Teacher, data: &Path, out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let rows = docs
        .par_iter()
        .map(|d| teacher.score_reference(d))
        .collect::<Result<Vec<_>>>()?;
    write_teacher_scores(&out.join("teacher_scores.jsonl"), &rows)?;
    let n_images: usize = rows.iter().map(|r| r.scores.len()).sum();
    println!("teacher {}: scored {} images in {} documents", teacher.name(), n_images, rows.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainSummary {
    steps: usize,
    first_total: Option<f64>,
    last_total: Option<f64>,
    best: Vec<RegistryEntry>,
}

fn train_cmd(
    cfg: &RunConfig,
    teacher: &dyn Teacher,
    data: &Path,
    val: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let docs = read_dataset(data)?;
    let val_docs = match val {
        Some(p) => read_dataset(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocabulary(cfg, &docs);
    vocab.save(&out.join(VOCAB))?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size != vocab.len() {
        log::info!("vocab_size {} -> {} to match the built vocabulary", model_cfg.vocab_size, vocab.len());
        model_cfg.vocab_size = vocab.len();
    }

    let (mut model, mut state, train_cfg) = match resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, Some(&model_cfg))?;
            (ck.model, ck.state, ck.train)
        }
        None => {
            let log = out.join("train_log.jsonl");
            if log.exists() {
                fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
            let model = UniMs::new(model_cfg)?;
            let state = TrainState::new(&model);
            (model, state, cfg.train.clone())
        }
    };
    let train_set = prepare_examples(&docs, &vocab, &model, teacher)?;
    let val_set = prepare_examples(&val_docs, &vocab, &model, teacher)?;
    let outcome = train(&mut model, &mut state, &train_set, &val_set, &train_cfg, Some(out), None)?;

    let summary = TrainSummary {
        steps: state.step,
        first_total: outcome.records.first().map(|r| r.losses.total),
        last_total: outcome.records.last().map(|r| r.losses.total),
        best: state.registry.clone(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} steps on {} documents: loss {:.4} -> {:.4}",
        outcome.records.len(),
        docs.len(),
        summary.first_total.unwrap_or(f64::NAN),
        summary.last_total.unwrap_or(f64::NAN)
    );
    for e in &state.registry {
        println!("  kept step {} (validation loss {:.4})", e.step, e.val_loss);
    }
    Ok(())
}

/// `vocab.json` in the checkpoint directory or up to two levels above it.
fn find_vocab(explicit: Option<&Path>, checkpoint: &Path) -> Result<Vocabulary> {
    if let Some(p) = explicit {
        return Vocabulary::load(p);
    }
    checkpoint
        .ancestors()
        .take(3)
        .map(|d| d.join(VOCAB))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Input(format!("no {VOCAB} near {}; pass --vocab", checkpoint.display())))
        .and_then(|p| Vocabulary::load(&p))
}

fn load_model(checkpoint: &Path, vocab: &Vocabulary) -> Result<UniMs> {
    let model = load_checkpoint(checkpoint, None)?.model;
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocab_size {} but vocabulary has {} entries",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(model)
}

fn summarize(
    cfg: &RunConfig,
    data: &Path,
    checkpoints: &[PathBuf],
    vocab: Option<&Path>,
    topk_images: Option<usize>,
    out: &Path,
) -> Result<()> {
    let docs = read_dataset(data)?;
    let vocab = find_vocab(vocab, &checkpoints[0])?;
    let mut decode = cfg.decode.clone();
    if let Some(k) = topk_images {
        decode.image_top_k = k;
    }
    for (i, ck) in checkpoints.iter().enumerate() {
        let model = load_model(ck, &vocab)?;
        let preds = docs
            .par_iter()
            .map(|d| predict(&model, &vocab, &encode_document(d, &vocab, &model.config)?, &decode))
            .collect::<Result<Vec<Prediction>>>()?;
        let name = if checkpoints.len() == 1 {
            "predictions.jsonl".to_string()
        } else {
            format!("predictions-{i}.jsonl")
        };
        let path = out.join(name);
        write_jsonl(&path, &preds)?;
        let by = by_id(&docs);
        let mean = preds
            .iter()
            .map(|p| Rouge::score(&p.abstractive, &by[p.id.as_str()].summary))
            .fold(0.0, |a, r| a + r.rl)
            / preds.len().max(1) as f64;
        println!(
            "{}: {} documents -> {} (abstractive ROUGE-L {:.4})",
            ck.display(),
            preds.len(),
            path.display(),
            mean
        );
    }
    Ok(())
}

fn evaluate(teacher: &dyn Teacher, data: &Path, predictions: &[PathBuf], out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let by = by_id(&docs);
    let files = predictions
        .iter()
        .map(|p| {
            let preds: Vec<Prediction> = read_jsonl(p)?;
            file_report(p.display().to_string(), &by, &preds, teacher)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        teacher: teacher.name(),
        mean: mean_summary(&files),
        files,
    };
    write_json(&out.join("eval.json"), &report)?;
    let m = &report.mean;
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    println!(
        "{} documents over {} file(s)\n  abstractive R-1 {:.2} R-2 {:.2} R-L {:.2}\n  extractive  R-1 {:.2} R-2 {:.2} R-L {:.2}\n  IP {} ({} documents)  M_sim proxy {}",
        m.documents,
        report.files.len(),
        100.0 * m.abstractive.r1,
        100.0 * m.abstractive.r2,
        100.0 * m.abstractive.rl,
        100.0 * m.extractive.r1,
        100.0 * m.extractive.r2,
        100.0 * m.extractive.rl,
        opt(m.ip),
        m.ip_documents,
        m.msim.map_or("n/a".to_string(), |x| format!("{x:.4}")),
    );
    Ok(())
}

fn analyze_ngrams(data: &Path, predictions: &Path, out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let rows = ngram_curve(&by_id(&docs), &preds)?;
    write_json(&out.join("ngrams.json"), &rows)?;
    println!("n  novel(generated)  novel(reference)  recall");
    for r in &rows {
        println!("{}  {:>16.2}  {:>16.2}  {:>6.3}", r.n, r.generated_novel, r.reference_novel, r.recall);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImportanceRow {
    /// Real text tokens, aligned with `maps.token_map`.
    tokens: Vec<String>,
    #[serde(flatten)]
    maps: ImportanceMaps,
}

/// Patch map as an 8-bit greyscale PGM, one pixel per patch.
fn heatmap_pgm(map: &[f64]) -> Vec<u8> {
    let side = (map.len() as f64).sqrt().round() as usize;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(map.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn visualize(data: &Path, checkpoint: &Path, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let docs = read_dataset(data)?;
    let vocab = find_vocab(vocab, checkpoint)?;
    let model = load_model(checkpoint, &vocab)?;
    let rows = docs
        .par_iter()
        .map(|d| {
            let ex = encode_document(d, &vocab, &model.config)?;
            let tokens = ex
                .text_ids
                .iter()
                .zip(&ex.text_valid)
                .filter(|(_, v)| **v)
                .map(|(&t, _)| vocab.token(t).to_string())
                .collect();
            Ok(ImportanceRow {
                tokens,
                maps: cross_modal_importance(&model, &ex)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(&out.join("importance.jsonl"), &rows)?;
    let maps = out.join("maps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let mut n = 0;
    for r in &rows {
        for (k, m) in r.maps.patch_maps.iter().enumerate() {
            let p = maps.join(format!("{}_{k}.pgm", r.maps.id));
            fs::write(&p, heatmap_pgm(m)).map_err(|e| Error::io(&p, e))?;
            n += 1;
        }
    }
    println!("importance maps for {} documents, {} patch heatmaps in {}", rows.len(), n, maps.display());
    Ok(())
}
