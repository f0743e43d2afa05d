//! Pre-training over a multilingual pool, fine-tuning on one direction,
//! the optimizer and its schedule.

mod checkpoint;

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use thiserror::Error;

use crate::corpus::{CorpusError, LanguageCode, ParallelCorpus, SentencePair};
use crate::model::{
    self, beam_search_decode, greedy_decode, init_parameters, BatchStats, DecodeConfig, Example,
    InitOptions, ModelConfig, ModelError, ModelParameters,
};
use crate::ras::{Lexicon, RasConfig, RasEngine, RasError};
use crate::seeding::{self, stream};
use crate::subword::{self, BpeModel, SubwordError, Vocabulary, EOS_ID};

pub use checkpoint::{AdamState, Checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {step} outside the schedule of {total} steps")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("the training pool is empty")]
    EmptyPool,
    #[error("corpus {0} has no sentence pairs")]
    EmptyCorpus(String),
    #[error("non-finite loss at step {step}; last good state is step {}", .last_good.step)]
    NaNLoss { step: u64, last_good: Box<Checkpoint> },
    #[error("non-finite parameter update at step {step}; last good state is step {}", .last_good.step)]
    NaNUpdate { step: u64, last_good: Box<Checkpoint> },
    #[error("the vocabulary has no indicator token for {0}")]
    UnknownLanguage(LanguageCode),
    #[error("parameter update is not finite")]
    NonFiniteUpdate,
    #[error("checkpoint vocabulary hash {found} does not match vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("malformed checkpoint {path}: {reason}")]
    MalformedCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint {0} failed its checksum")]
    ChecksumMismatch(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ras(#[from] RasError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
}

impl TrainError {
    pub fn is_numerical(&self) -> bool {
        match self {
            TrainError::NaNLoss { .. } | TrainError::NaNUpdate { .. } | TrainError::NonFiniteUpdate => true,
            TrainError::Model(e) => e.is_numerical(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Token budget per batch, source plus target.
    pub batch_tokens: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Code-switch sampled pairs; requires a lexicon in the context.
    pub ras: Option<RasConfig>,
    /// Global gradient-norm clip, off when `None`.
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many steps (0 = final only).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk-scale pre-training: warmup 200 of 2000 steps, 1024-token batches.
    pub fn desk() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            batch_tokens: 1024,
            dropout: 0.1,
            seed: 0,
            ras: None,
            clip_norm: None,
            checkpoint_every: 0,
        }
    }

    /// Fine-tuning defaults: dropout 0.3 and a shorter restarted schedule.
    pub fn finetune_desk() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            warmup_steps: 100,
            total_steps: 1000,
            dropout: 0.3,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        if let Some(r) = &self.ras {
            r.validate()?;
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step > t {
        return Err(TrainError::StepOutOfRange { step, total: t });
    }
    if step < w {
        return Ok(cfg.peak_lr * step as f64 / w as f64);
    }
    if t == w {
        return Ok(cfg.peak_lr);
    }
    Ok(cfg.peak_lr * (t - step) as f64 / (t - w) as f64)
}

/// One Adam update with bias correction. Nothing is modified when the
/// update would produce a non-finite parameter.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(ModelError::ShapeMismatch("adam state".into()).into());
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let t = state.step + 1;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut next = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let m = b1 * state.m[i] + (1.0 - b1) * grads[i];
        let v = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let p = params[i] - lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
        if !p.is_finite() {
            return Err(TrainError::NonFiniteUpdate);
        }
        next.push((m, v, p));
    }
    for (i, (m, v, p)) in next.into_iter().enumerate() {
        state.m[i] = m;
        state.v[i] = v;
        params[i] = p;
    }
    state.step = t;
    Ok(())
}

/// BPE segmentation plus vocabulary lookup, with a per-word cache.
#[derive(Debug)]
pub struct Tokenizer {
    bpe: BpeModel,
    vocab: Vocabulary,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

impl Clone for Tokenizer {
    fn clone(&self) -> Self {
        Tokenizer::new(self.bpe.clone(), self.vocab.clone())
    }
}

impl Tokenizer {
    pub fn new(bpe: BpeModel, vocab: Vocabulary) -> Self {
        Tokenizer {
            bpe,
            vocab,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn bpe(&self) -> &BpeModel {
        &self.bpe
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut cache = self.cache.lock().expect("tokenizer cache poisoned");
        let mut ids = Vec::new();
        for w in words {
            let w = w.as_ref();
            if let Some(hit) = cache.get(w) {
                ids.extend_from_slice(hit);
                continue;
            }
            let enc = self.vocab.encode(&self.bpe.apply_word(w));
            ids.extend_from_slice(&enc);
            cache.insert(w.to_string(), enc);
        }
        ids
    }

    /// Ids followed by `</s>`, cut to `max_len` tokens in total.
    pub fn encode_side<S: AsRef<str>>(&self, words: &[S], max_len: usize) -> Vec<u32> {
        let mut ids = self.encode_words(words);
        ids.truncate(max_len.saturating_sub(1));
        ids.push(EOS_ID);
        ids
    }

    /// Training example for a tagged pair. The decoder input is one token
    /// shorter than the target, hence the extra target position.
    pub fn example(&self, pair: &SentencePair, max_positions: usize) -> Example {
        Example::new(
            self.encode_side(&pair.source, max_positions),
            self.encode_side(&pair.target, max_positions + 1),
        )
    }

    /// Words of a decoded id sequence, dropping specials and indicators.
    pub fn decode_words(&self, ids: &[u32]) -> Result<Vec<String>, SubwordError> {
        let toks = self.vocab.decode(ids)?;
        let kept: Vec<&String> = toks
            .iter()
            .filter(|t| {
                ![subword::PAD, subword::BOS, subword::EOS].contains(&t.as_str())
                    && !crate::corpus::is_language_token(t)
            })
            .collect();
        Ok(subword::detokenize(&kept)
            .split_whitespace()
            .map(str::to_string)
            .collect())
    }

    pub fn language_id(&self, lang: &LanguageCode) -> Result<u32, TrainError> {
        self.vocab
            .language_id(lang)
            .ok_or_else(|| TrainError::UnknownLanguage(lang.clone()))
    }
}

/// Learns BPE over both sides of every corpus (oversampling smaller
/// languages) and builds the shared vocabulary, with every language's
/// indicator included.
pub fn build_tokenizer(
    corpora: &[ParallelCorpus],
    num_merges: usize,
    min_count: u64,
) -> Result<Tokenizer, SubwordError> {
    let sides: Vec<subword::TextSide> = corpora.iter().flat_map(subword::TextSide::from_parallel).collect();
    let policy = subword::compute_oversampling_weights(&subword::language_sizes(&sides))?;
    let bpe = subword::learn_bpe(&sides, &subword::BpeLearnConfig::new(num_merges), &policy)?;
    let segmented: Vec<Vec<String>> = sides
        .iter()
        .flat_map(|s| s.sentences.iter().map(|sent| bpe.apply(sent)))
        .collect();
    let mut langs: Vec<LanguageCode> = sides.iter().map(|s| s.lang.clone()).collect();
    langs.sort();
    langs.dedup();
    let vocab = subword::build_vocabulary(segmented.iter().map(Vec::as_slice), min_count, &langs)?;
    Ok(Tokenizer::new(bpe, vocab))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.lr, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Shared inputs to a training run.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub tokenizer: &'a Tokenizer,
    pub lexicon: Option<&'a Lexicon>,
    /// When set, `train.log` and checkpoints are written here.
    pub out_dir: Option<&'a Path>,
}

impl<'a> TrainContext<'a> {
    pub fn new(tokenizer: &'a Tokenizer) -> Self {
        TrainContext {
            tokenizer,
            lexicon: None,
            out_dir: None,
        }
    }
}

/// Picks the direction of each batch with probability proportional to
/// corpus size times weight.
#[derive(Debug, Clone)]
pub struct DirectionSampler {
    dist: WeightedIndex<f64>,
    seed: u64,
}

impl DirectionSampler {
    pub fn new(pool: &[ParallelCorpus], seed: u64) -> Result<Self, TrainError> {
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        if let Some(c) = pool.iter().find(|c| c.is_empty()) {
            let (s, t) = c.direction();
            return Err(TrainError::EmptyCorpus(format!("{s}-{t}")));
        }
        let weights: Vec<f64> = pool.iter().map(|c| c.len() as f64 * c.weight()).collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| TrainError::InvalidConfig(format!("direction weights: {e}")))?;
        Ok(DirectionSampler { dist, seed })
    }

    /// The generator for batch `step`, after its direction draw.
    fn draw(&self, step: u64) -> (usize, seeding::Rng) {
        let mut rng = seeding::rng(self.seed, stream::SAMPLING, step);
        let dir = self.dist.sample(&mut rng);
        (dir, rng)
    }

    pub fn direction(&self, step: u64) -> usize {
        self.draw(step).0
    }
}

struct BatchSource<'a> {
    pool: Vec<ParallelCorpus>,
    sampler: DirectionSampler,
    engine: Option<RasEngine>,
    tokenizer: &'a Tokenizer,
    budget: usize,
    max_positions: usize,
    drawn: u64,
}

impl<'a> BatchSource<'a> {
    fn new(
        pool: &[ParallelCorpus],
        ctx: &TrainContext<'a>,
        cfg: &TrainConfig,
        max_positions: usize,
    ) -> Result<Self, TrainError> {
        let pool = pool
            .iter()
            .map(|c| if c.is_tagged() { Ok(c.clone()) } else { c.tagged() })
            .collect::<Result<Vec<_>, _>>()?;
        let engine = match (&cfg.ras, ctx.lexicon) {
            (Some(r), Some(lex)) => Some(RasEngine::new(
                lex,
                RasConfig {
                    seed: cfg.seed,
                    ..r.clone()
                },
            )?),
            (Some(_), None) => {
                return Err(TrainError::InvalidConfig("ras configured without a lexicon".into()))
            }
            _ => None,
        };
        Ok(BatchSource {
            sampler: DirectionSampler::new(&pool, cfg.seed)?,
            pool,
            engine,
            tokenizer: ctx.tokenizer,
            budget: cfg.batch_tokens,
            max_positions,
            drawn: 0,
        })
    }

    fn batch(&mut self, step: u64) -> Vec<Example> {
        let (dir, mut rng) = self.sampler.draw(step);
        let corpus = &self.pool[dir];
        let mut batch = Vec::new();
        let mut tokens = 0;
        loop {
            let pair = corpus.pair(rng.gen_range(0..corpus.len()));
            let pairs = match &self.engine {
                Some(e) => e.expand(pair, self.drawn),
                None => vec![pair],
            };
            self.drawn += 1;
            let exs: Vec<Example> = pairs
                .iter()
                .map(|p| self.tokenizer.example(p, self.max_positions))
                .collect();
            let n: usize = exs.iter().map(|e| e.src.len() + e.tgt.len()).sum();
            if !batch.is_empty() && tokens + n > self.budget {
                break;
            }
            tokens += n;
            batch.extend(exs);
            if tokens >= self.budget {
                break;
            }
        }
        batch
    }
}

fn clip_gradient(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

fn train_loop(
    mut params: ModelParameters,
    pool: &[ParallelCorpus],
    ctx: &TrainContext,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let vocab_hash = ctx.tokenizer.vocab().content_hash();
    let model_dropout = params.config.dropout;
    params.config.dropout = cfg.dropout;
    let mut source = BatchSource::new(pool, ctx, cfg, params.config.max_positions)?;
    let mut adam = AdamState::new(params.data.len());
    let mut log = Vec::with_capacity(cfg.total_steps as usize);
    let mut log_file = match ctx.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train.log");
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let snapshot = |params: &ModelParameters, adam: &AdamState, step: u64, loss: f64| {
        let mut p = params.clone();
        p.config.dropout = model_dropout;
        Checkpoint {
            params: p,
            adam: Some(adam.clone()),
            step,
            loss,
            vocab_hash: vocab_hash.clone(),
        }
    };

    let mut last_loss = f64::NAN;
    for step in 1..=cfg.total_steps {
        let batch = source.batch(step);
        let mut drop_rng = seeding::rng(cfg.seed, stream::DROPOUT, step);
        let fail = |params: &ModelParameters, adam: &AdamState| TrainError::NaNLoss {
            step,
            last_good: Box::new(snapshot(params, adam, step - 1, last_loss)),
        };
        let (loss, mut grads) = match model::loss_and_grad_with_dropout(&params, &batch, &mut drop_rng) {
            Ok(r) => r,
            Err(ModelError::NaNLoss) => return Err(fail(&params, &adam)),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(fail(&params, &adam));
        }
        if let Some(c) = cfg.clip_norm {
            clip_gradient(&mut grads.data, c);
        }
        let lr = lr_schedule(step, cfg)?;
        if adam_step(&mut params.data, &grads.data, &mut adam, lr, cfg).is_err() {
            return Err(TrainError::NaNUpdate {
                step,
                last_good: Box::new(snapshot(&params, &adam, step - 1, last_loss)),
            });
        }
        last_loss = loss;
        let entry = LogEntry { step, lr, loss };
        if let Some((f, path)) = log_file.as_mut() {
            writeln!(f, "{}", entry.to_line()).map_err(io_err(path))?;
        }
        log.push(entry);
        if let Some(dir) = ctx.out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.total_steps {
                snapshot(&params, &adam, step, loss).save(&dir.join(format!("checkpoint_{step}.mrasp")))?;
            }
        }
    }
    let checkpoint = snapshot(&params, &adam, cfg.total_steps, last_loss);
    if let Some(dir) = ctx.out_dir {
        checkpoint.save(&dir.join("checkpoint_last.mrasp"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Trains a freshly initialized model over every direction in `pool`.
///
/// Each corpus is one direction (use [`crate::corpus::directed_pool`] for
/// both directions of each pair). Untagged corpora are tagged here.
pub fn pretrain(
    pool: &[ParallelCorpus],
    ctx: &TrainContext,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    let params = init_parameters(model_cfg, train_cfg.seed, InitOptions::default())?;
    train_loop(params, pool, ctx, train_cfg)
}

/// The baseline: training from scratch on one direction.
pub fn direct_train(
    corpus: &ParallelCorpus,
    ctx: &TrainContext,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainOutcome, TrainError> {
    pretrain(std::slice::from_ref(corpus), ctx, train_cfg, model_cfg)
}

/// Continues from a checkpoint on one direction with a fresh optimizer.
pub fn finetune(
    ckpt: &Checkpoint,
    corpus: &ParallelCorpus,
    ctx: &TrainContext,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    ckpt.check_vocab(ctx.tokenizer.vocab())?;
    train_loop(ckpt.params.clone(), std::slice::from_ref(corpus), ctx, train_cfg)
}

/// Teacher-forced loss and accuracy over a corpus, in evaluation mode.
pub fn evaluate_corpus(
    params: &ModelParameters,
    tokenizer: &Tokenizer,
    corpus: &ParallelCorpus,
) -> Result<BatchStats, TrainError> {
    let corpus = if corpus.is_tagged() { corpus.clone() } else { corpus.tagged()? };
    let max = params.config.max_positions;
    let mut stats = BatchStats::default();
    let pairs: Vec<SentencePair> = corpus.iter().collect();
    for chunk in pairs.chunks(64) {
        let batch: Vec<Example> = chunk.iter().map(|p| tokenizer.example(p, max)).collect();
        stats.merge(&model::evaluate(params, &batch)?);
    }
    Ok(stats)
}

/// How to search for translations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Search {
    Greedy,
    Beam(usize),
}

/// Translates tokenized (untagged) source words into `tgt_lang`.
pub fn translate_words<S: AsRef<str>>(
    params: &ModelParameters,
    tokenizer: &Tokenizer,
    source: &[S],
    src_lang: &LanguageCode,
    tgt_lang: &LanguageCode,
    search: Search,
    max_len: usize,
) -> Result<Vec<String>, TrainError> {
    let mut words = vec![src_lang.token()];
    words.extend(source.iter().map(|s| s.as_ref().to_string()));
    let src = tokenizer.encode_side(&words, params.config.max_positions);
    let prefix = [tokenizer.language_id(tgt_lang)?];
    let hyp = match search {
        Search::Greedy => greedy_decode(params, &src, &prefix, max_len, EOS_ID)?,
        Search::Beam(k) => beam_search_decode(params, &src, &prefix, &DecodeConfig::new(k, max_len, EOS_ID))?
            .into_iter()
            .next()
            .ok_or(ModelError::EmptySequence)?,
    };
    Ok(tokenizer.decode_words(hyp.content())?)
}

#[cfg(test)]
mod tests;
