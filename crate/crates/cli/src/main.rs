//! `captioner`: featurize, prepare, train, caption and score audio clips.

mod commands;

use anyhow::Result;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "captioner", version, about = "Text-guided Patchout audio captioner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a log-mel spectrogram from a WAV file into a .mel tensor store
    Featurize {
        /// Input WAV (16-bit PCM or 32-bit float)
        #[arg(long = "in")]
        input: PathBuf,
        /// Output .mel directory
        #[arg(long)]
        out: PathBuf,
        /// Run config for non-default frontend settings
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build the vocabulary, fine-tune the tagger on paired labels and cache
    /// guiding-text distributions into prepared manifests
    Prepare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Pair caption embeddings with label embeddings by cosine similarity
    PairLabels {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output TSV: caption_index, label_index, cosine
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage training schedule
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Caption one WAV clip with a trained checkpoint
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Beam width
        #[arg(long, default_value_t = 3)]
        beam: usize,
        /// Use plain greedy decoding instead of beam search
        #[arg(long)]
        greedy: bool,
    },
    /// Score predictions against references (BLEU-1..4, ROUGE-L, CIDEr)
    Eval {
        /// JSONL: {"id": ..., "caption": ...}
        #[arg(long)]
        pred: PathBuf,
        /// JSONL: {"id": ..., "captions": [...]}
        #[arg(long)]
        refs: PathBuf,
        /// Where to write metrics.json
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Generate a synthetic corpus (clips, manifests, labels, embeddings)
    SynthCorpus {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Extra clips written to a validation manifest
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long = "captions-per-clip", default_value_t = 1)]
        captions_per_clip: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Featurize { input, out, config } => {
            commands::featurize(&input, &out, config.as_deref())
        }
        Command::Prepare { config } => commands::prepare(&config),
        Command::PairLabels { captions, labels, out } => {
            commands::pair_labels(&captions, &labels, &out)
        }
        Command::Train { config } => commands::train(&config),
        Command::Infer { ckpt, input, beam, greedy } => commands::infer(&ckpt, &input, beam, greedy),
        Command::Eval { pred, refs, out } => commands::eval(&pred, &refs, &out),
        Command::SynthCorpus { n, out, seed, val, captions_per_clip } => {
            commands::synth_corpus(n, &out, seed, val, captions_per_clip)
        }
    }
}
