//! `unims`: vocabulary, oracle labels, teacher scores, training, inference
//! and evaluation over JSONL multimodal datasets.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use unims::teacher::TeacherSource;
use unims::{Ablation, Error};

#[derive(Parser, Debug)]
#[command(name = "unims", version, about = "Multimodal summarization with image selection")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for machine-readable results.
    #[arg(long, global = true, default_value = "unims-out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// mock, file:<path> or rouge-rank.
    #[arg(long, global = true, default_value = "mock")]
    pub teacher: TeacherSource,
    /// none, no-visual-guide, no-ext or no-both.
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
    /// Worker threads (falls back to UNIMS_THREADS, then all cores).
    #[arg(long, global = true, env = "UNIMS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 32)]
        n_docs: usize,
        #[arg(long, default_value = "corpus.jsonl")]
        name: String,
    },
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
    },
    /// Greedy ROUGE-L oracle labels per document.
    Oracle {
        #[arg(long)]
        data: PathBuf,
    },
    /// Teacher relevance of each image against the reference summary.
    TeacherScores {
        #[arg(long)]
        data: PathBuf,
    },
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Validation set; the training set is used when omitted.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predictions JSONL for every document, one file per checkpoint.
    Summarize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Defaults to vocab.json next to or above the first checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        topk_images: Option<usize>,
    },
    /// ROUGE, image precision and M_sim proxy, averaged over prediction files.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
    },
    /// Novel n-gram counts and recall for n = 1..=4.
    AnalyzeNgrams {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Cross-modal importance maps.
    Visualize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("unims: {first}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("unims: {}", single_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn single_line(e: &Error) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}
