//! Command-line surface. Every tunable is an `Option` so that a value from
//! `--config` can fill in when the flag is absent.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mrasp", version, about = "Multilingual translation pre-training with random aligned substitution")]
pub struct Cli {
    /// key=value file supplying defaults for any flag (flags win).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel stages; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn joint BPE merges over every side of a manifest.
    LearnBpe(LearnBpe),
    /// Segment a text file with learned merges.
    ApplyBpe(ApplyBpe),
    /// Build the joint vocabulary from BPE-segmented manifest text.
    BuildVocab(BuildVocab),
    /// Write code-switched variants of a parallel corpus.
    RasAugment(RasAugment),
    /// Pre-train on the manifest pool, with RAS when --dict is given.
    Pretrain(Pretrain),
    /// Continue training a checkpoint on one direction.
    Finetune(Finetune),
    /// Translate a file with beam search or greedy decoding.
    Translate(Translate),
    /// Corpus BLEU of a hypothesis file against a reference file.
    ScoreBleu(ScoreBleu),
    /// Average cosine similarity of dictionary-aligned word embeddings.
    AnalyzeSimilarity(AnalyzeSimilarity),
    /// Project dictionary word embeddings with PCA.
    AnalyzePca(AnalyzePca),
    /// Generate a synthetic language family with dictionaries and manifest.
    SynthGenerate(SynthGenerate),
    /// Run a paired experiment described by a spec file.
    Experiment(Experiment),
}

/// Tokenizer files shared by model commands.
#[derive(Debug, Args)]
pub struct TokenizerArgs {
    /// BPE merges file from learn-bpe.
    #[arg(long, value_name = "FILE")]
    pub merges: Option<PathBuf>,
    /// Vocabulary file from build-vocab.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
}

/// A single-direction parallel corpus.
#[derive(Debug, Args)]
pub struct PairArgs {
    /// Direction as SRC-TGT language codes, e.g. en-fr.
    #[arg(long, value_name = "SRC-TGT")]
    pub pair: Option<String>,
    /// Source-side text, one sentence per line.
    #[arg(long, value_name = "FILE")]
    pub src: Option<PathBuf>,
    /// Target-side text, line-aligned with --src.
    #[arg(long, value_name = "FILE")]
    pub tgt: Option<PathBuf>,
}

/// Optimisation flags shared by pretrain and finetune.
#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Seed for initialisation, sampling, RAS and dropout (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total update steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Linear warmup steps.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Dropout during training.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Source plus target tokens per batch.
    #[arg(long, value_name = "N")]
    pub batch_tokens: Option<usize>,
    /// Clip the global gradient norm to this value.
    #[arg(long, value_name = "NORM")]
    pub clip_norm: Option<f64>,
    /// Also write a checkpoint every N steps.
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<u64>,
    /// Output directory for checkpoints, train.log and config.txt.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnBpe {
    /// Corpus manifest (src, tgt, src_path, tgt_path, weight per line).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Number of merges to learn.
    #[arg(long, value_name = "N")]
    pub num_merges: Option<usize>,
    /// Stop once the best pair occurs fewer times than this.
    #[arg(long, value_name = "N")]
    pub min_frequency: Option<u64>,
    /// Cap on sentences read from each monolingual entry.
    #[arg(long, value_name = "N")]
    pub mono_limit: Option<usize>,
    /// Where to write the merges.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyBpe {
    /// BPE merges file.
    #[arg(long, value_name = "FILE")]
    pub merges: Option<PathBuf>,
    /// Input text (standard input when absent).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildVocab {
    /// Corpus manifest.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// BPE merges file.
    #[arg(long, value_name = "FILE")]
    pub merges: Option<PathBuf>,
    /// Drop subwords seen fewer times than this.
    #[arg(long, value_name = "N")]
    pub min_count: Option<u64>,
    /// Cap on sentences read from each monolingual entry.
    #[arg(long, value_name = "N")]
    pub mono_limit: Option<usize>,
    /// Where to write the vocabulary.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Substitution flags shared by ras-augment and pretrain.
#[derive(Debug, Args)]
pub struct RasArgs {
    /// Directory of src-tgt.txt dictionaries.
    #[arg(long, value_name = "DIR")]
    pub dict: Option<PathBuf>,
    /// Per-word substitution probability.
    #[arg(long)]
    pub prob: Option<f64>,
    /// Keep only the first N entries of each dictionary.
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
    /// Substitute target words as well.
    #[arg(long)]
    pub target_side: bool,
}

#[derive(Debug, Args)]
pub struct RasAugment {
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub ras: RasArgs,
    /// Seed for the substitution draws (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Emit only the variant instead of original then variant.
    #[arg(long)]
    pub replace_in_place: bool,
    /// Output prefix; writes PREFIX.<lang>.ras per side.
    #[arg(long, value_name = "PREFIX")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    /// Corpus manifest; every parallel entry is used in both directions.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    #[command(flatten)]
    pub ras: RasArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Encoder and decoder layers.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Model dimension.
    #[arg(long)]
    pub model_dim: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward inner dimension.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Longest sequence, in subword positions.
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Label smoothing of the cross-entropy.
    #[arg(long)]
    pub label_smoothing: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Finetune {
    /// Checkpoint to start from.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    #[command(flatten)]
    pub pair: PairArgs,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct Translate {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Direction as SRC-TGT language codes.
    #[arg(long, value_name = "SRC-TGT")]
    pub pair: Option<String>,
    /// Source sentences, one per line.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Beam width.
    #[arg(long, conflicts_with = "greedy")]
    pub beam: Option<usize>,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
    /// Most generated tokens per sentence, end marker included.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreBleu {
    /// Hypotheses, one per line.
    #[arg(long, value_name = "FILE")]
    pub hyp: Option<PathBuf>,
    /// References, line-aligned with --hyp.
    #[arg(long = "ref", value_name = "FILE")]
    pub reference: Option<PathBuf>,
    /// Longest n-gram order.
    #[arg(long)]
    pub max_n: Option<usize>,
    /// Add-one smoothing for orders above 1.
    #[arg(long)]
    pub smooth: bool,
    /// Report file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeSimilarity {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Directory of src-tgt.txt dictionaries.
    #[arg(long, value_name = "DIR")]
    pub dict: Option<PathBuf>,
    /// Use the first N entries of each dictionary.
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
    /// Report file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzePca {
    /// Model checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerArgs,
    /// Directory of src-tgt.txt dictionaries.
    #[arg(long, value_name = "DIR")]
    pub dict: Option<PathBuf>,
    /// Words taken from the head of each dictionary.
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
    /// Output dimensions.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Coordinates file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthGenerate {
    /// Experiment-style spec; only the family keys matter here.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Family seed (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Experiment {
    /// Experiment spec (key=value).
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Family seed (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated training seeds, overriding the spec.
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    /// Report file (standard output when absent).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}
