//! Synthetic language families and the paired experiments run on them.
//!
//! Every language in a family is a private relabeling of one latent concept
//! stream, read out in a language-specific word order. Translation between
//! any two languages is therefore exact and known, and the relabeling maps
//! double as ground-truth bilingual dictionaries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::corpus::{self, CorpusError, LanguageCode, ParallelCorpus, SentencePair};
use crate::model::{init_parameters, InitOptions, ModelConfig, ModelError, ModelParameters};
use crate::ras::{BilingualDictionary, Lexicon, RasConfig, RasError};
use crate::seeding::{self, stream};
use crate::subword::SubwordError;
use crate::trainer::{
    self, build_tokenizer, evaluate_corpus, finetune, pretrain, Checkpoint, Search, TrainConfig,
    LogEntry, TrainContext, TrainError, Tokenizer,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible family spec: {0}")]
    SpecInfeasible(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("experiment spec line {line}: {reason}")]
    MalformedSpec { line: usize, reason: String },
    #[error("the family has no pair {0}-{1}")]
    UnknownPair(String, String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Ras(#[from] RasError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxz";
const VOWELS: &[u8] = b"aeiou";
const CONSONANTS_PER_LANGUAGE: usize = 4;
/// Disjoint consonant sets cap the family size.
pub const MAX_LANGUAGES: usize = CONSONANTS.len() / CONSONANTS_PER_LANGUAGE;

/// Position permutation applied when a language reads out the latent
/// concept sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordOrder {
    Identity,
    Reverse,
    /// Swap positions (0,1), (2,3), ...
    SwapPairs,
    /// Move the first word to the end.
    Rotate,
}

impl WordOrder {
    pub fn apply<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match self {
            WordOrder::Identity => {}
            WordOrder::Reverse => v.reverse(),
            WordOrder::SwapPairs => v.chunks_exact_mut(2).for_each(|c| c.swap(0, 1)),
            WordOrder::Rotate => {
                if !v.is_empty() {
                    v.rotate_left(1)
                }
            }
        }
        v
    }

    pub fn invert<T: Clone>(&self, xs: &[T]) -> Vec<T> {
        match self {
            WordOrder::Rotate => {
                let mut v = xs.to_vec();
                if !v.is_empty() {
                    v.rotate_right(1);
                }
                v
            }
            // the others are involutions
            other => other.apply(xs),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WordOrder::Identity => "identity",
            WordOrder::Reverse => "reverse",
            WordOrder::SwapPairs => "swap_pairs",
            WordOrder::Rotate => "rotate",
        }
    }
}

impl FromStr for WordOrder {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "identity" => WordOrder::Identity,
            "reverse" => WordOrder::Reverse,
            "swap_pairs" => WordOrder::SwapPairs,
            "rotate" => WordOrder::Rotate,
            _ => return Err(SynthError::InvalidSpec(format!("unknown word order {s:?}"))),
        })
    }
}

/// One language pair of a family with its split sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSpec {
    pub a: usize,
    pub b: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Part of the pre-training pool (both directions).
    pub in_pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFamilySpec {
    pub num_languages: usize,
    /// Latent concepts, i.e. words per language.
    pub vocab_per_lang: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// One word order per language.
    pub orders: Vec<WordOrder>,
    /// Probability that the next concept ignores the successor table.
    pub noise: f64,
    /// Allowed successors per concept in the latent Markov chain.
    pub successors: usize,
    pub pairs: Vec<PairSpec>,
    pub seed: u64,
}

impl SynthFamilySpec {
    /// Three languages: a rich pooled pair `la-lb`, a low-resource pooled
    /// pair `la-lc`, and the never-pooled pair `lb-lc`.
    pub fn toy(seed: u64) -> Self {
        let pair = |a, b, train, in_pool| PairSpec {
            a,
            b,
            train,
            dev: 200,
            test: 200,
            in_pool,
        };
        SynthFamilySpec {
            num_languages: 3,
            vocab_per_lang: 60,
            min_len: 4,
            max_len: 8,
            orders: vec![WordOrder::Identity, WordOrder::Reverse, WordOrder::SwapPairs],
            noise: 0.15,
            successors: 4,
            pairs: vec![pair(0, 1, 2000, true), pair(0, 2, 300, true), pair(1, 2, 2000, false)],
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(2..=MAX_LANGUAGES).contains(&self.num_languages) {
            return bad(format!("num_languages must be in 2..={MAX_LANGUAGES}"));
        }
        if self.orders.len() != self.num_languages {
            return bad("one word order per language is required".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len".into());
        }
        if !(0.0..=1.0).contains(&self.noise) || self.successors == 0 {
            return bad("noise must be in [0, 1] and successors positive".into());
        }
        if self.pairs.is_empty() {
            return bad("no pairs".into());
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if p.a == p.b || p.a >= self.num_languages || p.b >= self.num_languages {
                return bad(format!("pair {}-{} is not two distinct languages", p.a, p.b));
            }
            if !seen.insert((p.a.min(p.b), p.a.max(p.b))) {
                return bad(format!("pair {}-{} listed twice", p.a, p.b));
            }
        }
        let forms = surface_forms(0).len();
        if self.vocab_per_lang < 2 || self.vocab_per_lang > forms {
            return Err(SynthError::SpecInfeasible(format!(
                "vocab_per_lang must be in 2..={forms}"
            )));
        }
        // distinct latent sentences available under the successor chain
        let branch = if self.noise > 0.0 { self.vocab_per_lang } else { self.successors.min(self.vocab_per_lang) };
        let space: f64 = (self.min_len..=self.max_len)
            .map(|l| self.vocab_per_lang as f64 * (branch as f64).powi(l as i32 - 1))
            .sum();
        // sentences are distinct across the whole family
        let need: usize = self.pairs.iter().map(|p| p.train + p.dev + p.test).sum();
        if space < 2.0 * need as f64 {
            return Err(SynthError::SpecInfeasible(format!(
                "vocabulary of {} cannot yield {need} distinct sentences of length {}..={}",
                self.vocab_per_lang, self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// The `i`-th language code: `la`, `lb`, ...
pub fn language_code(i: usize) -> LanguageCode {
    let c = (b'a' + i as u8) as char;
    LanguageCode::new(&format!("l{c}")).expect("valid code")
}

/// Every CV-syllable word of one to three syllables over the language's
/// private consonants, shortest first.
fn surface_forms(lang: usize) -> Vec<String> {
    let cons = &CONSONANTS[lang * CONSONANTS_PER_LANGUAGE..(lang + 1) * CONSONANTS_PER_LANGUAGE];
    let syll: Vec<String> = cons
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let mut out = syll.clone();
    let mut prev = syll.clone();
    for _ in 1..3 {
        prev = prev.iter().flat_map(|p| syll.iter().map(move |s| format!("{p}{s}"))).collect();
        out.extend(prev.iter().cloned());
    }
    out
}

/// Train, dev and test corpora of one pair, stored in the `a -> b` order.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFamily {
    pub spec: SynthFamilySpec,
    /// `words[lang][concept]`.
    words: Vec<Vec<String>>,
    concept_of: Vec<HashMap<String, usize>>,
    splits: BTreeMap<(usize, usize), Splits>,
}

/// Zipf-like weights so that concept id is also frequency rank.
fn zipf(v: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..v).map(|k| 1.0 / (k + 1) as f64)).expect("positive weights")
}

pub fn generate_family(spec: &SynthFamilySpec) -> Result<SynthFamily, SynthError> {
    spec.validate()?;
    let v = spec.vocab_per_lang;
    let mut words = Vec::with_capacity(spec.num_languages);
    for lang in 0..spec.num_languages {
        let forms = surface_forms(lang);
        // prefer short forms, drawn at random from the 1-2 syllable pool
        let pool = forms.len().min(v.max(CONSONANTS_PER_LANGUAGE * VOWELS.len() * 21));
        let mut rng = seeding::rng(spec.seed, stream::SYNTH, lang as u64);
        let picked = index::sample(&mut rng, pool, v);
        words.push(picked.iter().map(|i| forms[i].clone()).collect::<Vec<_>>());
    }
    let concept_of = words
        .iter()
        .map(|ws| ws.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect())
        .collect();

    let mut rng = seeding::rng(spec.seed, stream::SYNTH, 1000);
    let succ: Vec<Vec<usize>> = (0..v)
        .map(|_| (0..spec.successors).map(|_| rng.gen_range(0..v)).collect())
        .collect();
    let freq = zipf(v);

    let mut family = SynthFamily {
        spec: spec.clone(),
        words,
        concept_of,
        splits: BTreeMap::new(),
    };
    // shared across pairs so no held-out sentence of any pair is trained on
    let mut seen = HashSet::new();
    for (pi, p) in spec.pairs.iter().enumerate() {
        let mut rng = seeding::rng(spec.seed, stream::SYNTH, 2000 + pi as u64);
        let need = p.train + p.dev + p.test;
        let mut latents = Vec::with_capacity(need);
        let mut attempts = 0usize;
        while latents.len() < need {
            attempts += 1;
            if attempts > 50 * need + 1000 {
                return Err(SynthError::SpecInfeasible(format!(
                    "could not draw {need} distinct sentences for pair {}-{}",
                    language_code(p.a),
                    language_code(p.b)
                )));
            }
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let mut s = vec![freq.sample(&mut rng)];
            while s.len() < len {
                let prev = *s.last().expect("nonempty");
                let next = if rng.gen::<f64>() < spec.noise {
                    freq.sample(&mut rng)
                } else {
                    succ[prev][rng.gen_range(0..spec.successors)]
                };
                s.push(next);
            }
            if seen.insert(s.clone()) {
                latents.push(s);
            }
        }
        let make = |range: std::ops::Range<usize>| -> Result<ParallelCorpus, SynthError> {
            let pairs = latents[range]
                .iter()
                .map(|l| {
                    SentencePair::new(
                        family.render(l, p.a),
                        family.render(l, p.b),
                        language_code(p.a),
                        language_code(p.b),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ParallelCorpus::from_pairs(language_code(p.a), language_code(p.b), pairs)?)
        };
        let splits = Splits {
            train: make(0..p.train)?,
            dev: make(p.train..p.train + p.dev)?,
            test: make(p.train + p.dev..need)?,
        };
        family.splits.insert((p.a, p.b), splits);
    }
    Ok(family)
}

impl SynthFamily {
    pub fn languages(&self) -> Vec<LanguageCode> {
        (0..self.spec.num_languages).map(language_code).collect()
    }

    pub fn language_index(&self, lang: &LanguageCode) -> Option<usize> {
        (0..self.spec.num_languages).find(|&i| &language_code(i) == lang)
    }

    /// Surface sentence of a latent concept sequence in language `lang`.
    pub fn render(&self, latent: &[usize], lang: usize) -> Vec<String> {
        let words: Vec<String> = latent.iter().map(|&c| self.words[lang][c].clone()).collect();
        self.spec.orders[lang].apply(&words)
    }

    /// The generating rule: relabel word by word, then reorder. `None` for
    /// words outside language `src`.
    pub fn translate(&self, words: &[String], src: usize, tgt: usize) -> Option<Vec<String>> {
        let concepts: Vec<usize> = words
            .iter()
            .map(|w| self.concept_of[src].get(w).copied())
            .collect::<Option<_>>()?;
        Some(self.render(&self.spec.orders[src].invert(&concepts), tgt))
    }

    /// Ground-truth dictionary, most frequent concept first.
    pub fn dictionary(&self, src: usize, tgt: usize) -> BilingualDictionary {
        let mut d = BilingualDictionary::new(language_code(src), language_code(tgt));
        for (a, b) in self.words[src].iter().zip(&self.words[tgt]) {
            d.insert(a, b);
        }
        d
    }

    /// Dictionaries between every ordered pair of the given languages.
    pub fn lexicon(&self, langs: &[usize]) -> Result<Lexicon, SynthError> {
        let mut dicts = Vec::new();
        for &a in langs {
            for &b in langs {
                if a != b {
                    dicts.push(self.dictionary(a, b));
                }
            }
        }
        Ok(Lexicon::new(dicts)?)
    }

    /// Corpus of split `split` in the `src -> tgt` direction.
    pub fn corpus(&self, split: Split, src: usize, tgt: usize) -> Result<ParallelCorpus, SynthError> {
        let pick = |s: &Splits| match split {
            Split::Train => s.train.clone(),
            Split::Dev => s.dev.clone(),
            Split::Test => s.test.clone(),
        };
        if let Some(s) = self.splits.get(&(src, tgt)) {
            return Ok(pick(s));
        }
        if let Some(s) = self.splits.get(&(tgt, src)) {
            return Ok(pick(s).reversed());
        }
        Err(SynthError::UnknownPair(
            language_code(src).to_string(),
            language_code(tgt).to_string(),
        ))
    }

    /// Languages and undirected pairs of the pre-training pool.
    pub fn pool_pairs(&self) -> Vec<(usize, usize)> {
        self.spec.pairs.iter().filter(|p| p.in_pool).map(|p| (p.a, p.b)).collect()
    }

    pub fn pool_languages(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.pool_pairs().iter().flat_map(|&(a, b)| [a, b]).collect();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// Writes corpora (`{split}.{a}-{b}.{lang}`), dictionaries
    /// (`dict/{x}-{y}.txt`) and a pool manifest (`manifest.tsv`).
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), SynthError> {
        let dict_dir = dir.join("dict");
        fs::create_dir_all(&dict_dir).map_err(io_err(&dict_dir))?;
        let mut manifest = String::from("# src\ttgt\tsrc_path\ttgt_path\tweight\n");
        for p in &self.spec.pairs {
            let (la, lb) = (language_code(p.a), language_code(p.b));
            for split in [Split::Train, Split::Dev, Split::Test] {
                let stem = format!("{}.{la}-{lb}", split.name());
                let c = self.corpus(split, p.a, p.b)?;
                corpus::write_parallel_corpus(&c, &dir.join(format!("{stem}.{la}")), &dir.join(format!("{stem}.{lb}")))?;
                if split == Split::Train && p.in_pool {
                    let _ = writeln!(manifest, "{la}\t{lb}\t{stem}.{la}\t{stem}.{lb}\t1");
                }
            }
        }
        let mpath = dir.join("manifest.tsv");
        fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
        for a in 0..self.spec.num_languages {
            for b in 0..self.spec.num_languages {
                if a != b {
                    let path = dict_dir.join(format!("{}-{}.txt", language_code(a), language_code(b)));
                    fs::write(&path, self.dictionary(a, b).to_text()).map_err(io_err(&path))?;
                }
            }
        }
        Ok(())
    }
}

/// Where a fine-tuning direction sits relative to the pre-training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taxonomy {
    /// The pair itself was pre-trained on.
    SeenPair,
    /// Both languages were pre-trained on, never together.
    ExoticPair,
    ExoticSource,
    ExoticTarget,
    ExoticFull,
}

impl Taxonomy {
    pub fn classify(pool: &[(usize, usize)], src: usize, tgt: usize) -> Taxonomy {
        let seen_lang = |l: usize| pool.iter().any(|&(a, b)| a == l || b == l);
        let seen_pair = pool.iter().any(|&(a, b)| (a, b) == (src, tgt) || (b, a) == (src, tgt));
        match (seen_pair, seen_lang(src), seen_lang(tgt)) {
            (true, _, _) => Taxonomy::SeenPair,
            (false, true, true) => Taxonomy::ExoticPair,
            (false, false, true) => Taxonomy::ExoticSource,
            (false, true, false) => Taxonomy::ExoticTarget,
            (false, false, false) => Taxonomy::ExoticFull,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Taxonomy::SeenPair => "Seen Pair",
            Taxonomy::ExoticPair => "Exotic Pair",
            Taxonomy::ExoticSource => "Exotic Source",
            Taxonomy::ExoticTarget => "Exotic Target",
            Taxonomy::ExoticFull => "Exotic Full",
        }
    }
}

/// Models, schedules and tokenization shared by every arm of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct LabConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Used by every trained arm, fine-tuned or from scratch, so arms
    /// differ only in their starting point.
    pub finetune: TrainConfig,
    pub bpe_merges: usize,
    pub min_count: u64,
    pub ras_prob: f64,
    /// Dev sentences decoded greedily for BLEU (0 skips BLEU).
    pub bleu_sentences: usize,
}

impl LabConfig {
    /// Small enough for a single core: one layer each side, dimension 32.
    pub fn toy() -> Self {
        let model = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            model_dim: 32,
            heads: 4,
            ffn_dim: 64,
            max_positions: 16,
            dropout: 0.1,
            vocab_size: 0,
            label_smoothing: 0.0,
        };
        LabConfig {
            model,
            pretrain: TrainConfig {
                peak_lr: 3e-3,
                warmup_steps: 100,
                total_steps: 2000,
                batch_tokens: 600,
                dropout: 0.1,
                ..TrainConfig::desk()
            },
            finetune: TrainConfig {
                peak_lr: 2e-3,
                warmup_steps: 30,
                total_steps: 300,
                batch_tokens: 600,
                dropout: 0.1,
                ..TrainConfig::finetune_desk()
            },
            bpe_merges: 600,
            min_count: 1,
            ras_prob: 0.3,
            bleu_sentences: 50,
        }
    }
}

/// A family plus everything needed to train on it; caches pre-trained
/// checkpoints per `(ras, seed)`.
pub struct Lab {
    pub family: SynthFamily,
    pub cfg: LabConfig,
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
    cache: Mutex<HashMap<(bool, u64), (Checkpoint, Vec<LogEntry>)>>,
}

impl Lab {
    /// Builds the shared tokenizer over every training corpus of the family.
    pub fn new(family: SynthFamily, mut cfg: LabConfig) -> Result<Lab, SynthError> {
        let corpora: Vec<ParallelCorpus> = family
            .spec
            .pairs
            .iter()
            .map(|p| family.corpus(Split::Train, p.a, p.b))
            .collect::<Result<_, _>>()?;
        let tokenizer = build_tokenizer(&corpora, cfg.bpe_merges, cfg.min_count)?;
        cfg.model.vocab_size = tokenizer.vocab().len();
        let lexicon = family.lexicon(&family.pool_languages())?;
        Ok(Lab {
            family,
            cfg,
            tokenizer,
            lexicon,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn pool(&self) -> Result<Vec<ParallelCorpus>, SynthError> {
        let undirected: Vec<ParallelCorpus> = self
            .family
            .pool_pairs()
            .iter()
            .map(|&(a, b)| self.family.corpus(Split::Train, a, b))
            .collect::<Result<_, _>>()?;
        Ok(corpus::directed_pool(&undirected)?)
    }

    pub fn pretrain_config(&self, ras: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ras: ras.then(|| RasConfig {
                substitution_prob: self.cfg.ras_prob,
                ..RasConfig::default()
            }),
            ..self.cfg.pretrain.clone()
        }
    }

    /// The pre-trained checkpoint for `(ras, seed)`, trained on first use.
    pub fn pretrained(&self, ras: bool, seed: u64) -> Result<Checkpoint, SynthError> {
        Ok(self.pretrain_run(ras, seed)?.0)
    }

    /// Checkpoint and per-step training log of the `(ras, seed)` run.
    pub fn pretrain_run(&self, ras: bool, seed: u64) -> Result<(Checkpoint, Vec<LogEntry>), SynthError> {
        if let Some(c) = self.cache.lock().expect("cache").get(&(ras, seed)) {
            return Ok(c.clone());
        }
        let ctx = TrainContext {
            lexicon: Some(&self.lexicon),
            ..TrainContext::new(&self.tokenizer)
        };
        log::info!("pre-training ras={ras} seed={seed}");
        let out = pretrain(&self.pool()?, &ctx, &self.pretrain_config(ras, seed), &self.cfg.model)?;
        let run = (out.checkpoint, out.log);
        self.cache.lock().expect("cache").insert((ras, seed), run.clone());
        Ok(run)
    }

    /// Seeds the cache, e.g. with checkpoints loaded from disk.
    pub fn insert_pretrained(&self, ras: bool, seed: u64, ckpt: Checkpoint) {
        self.cache.lock().expect("cache").insert((ras, seed), (ckpt, Vec::new()));
    }

    pub fn taxonomy(&self, src: usize, tgt: usize) -> Taxonomy {
        Taxonomy::classify(&self.family.pool_pairs(), src, tgt)
    }

    /// Mean of the aligned-word cosine over every ordered pair of family
    /// languages.
    pub fn mean_aligned_cosine(&self, params: &ModelParameters) -> Result<f64, SynthError> {
        let n = self.family.spec.num_languages;
        let mut vals = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let r = analysis::avg_aligned_cosine(params, &self.tokenizer, &self.family.dictionary(a, b), 1000)?;
                    vals.push(r.average);
                }
            }
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn evaluate(&self, params: &ModelParameters, src: usize, tgt: usize) -> Result<Metrics, SynthError> {
        let dev = self.family.corpus(Split::Dev, src, tgt)?;
        let stats = evaluate_corpus(params, &self.tokenizer, &dev)?;
        let bleu = if self.cfg.bleu_sentences == 0 {
            f64::NAN
        } else {
            let (sl, tl) = (language_code(src), language_code(tgt));
            let n = self.cfg.bleu_sentences.min(dev.len());
            let mut hyps = Vec::with_capacity(n);
            let mut refs = Vec::with_capacity(n);
            for pair in dev.iter().take(n) {
                let max_len = pair.target.len() * 2 + 4;
                hyps.push(trainer::translate_words(params, &self.tokenizer, &pair.source, &sl, &tl, Search::Greedy, max_len)?);
                refs.push(pair.target);
            }
            analysis::bleu_detailed(&hyps, &refs, 4, true)?.score
        };
        Ok(Metrics {
            dev_loss: stats.mean_loss(),
            dev_acc: stats.accuracy(),
            bleu,
            cosine: self.mean_aligned_cosine(params)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub dev_loss: f64,
    pub dev_acc: f64,
    pub bleu: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    DevLoss,
    DevAccuracy,
    Bleu,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::DevLoss, Metric::DevAccuracy, Metric::Bleu, Metric::Cosine];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::DevLoss => "dev_loss",
            Metric::DevAccuracy => "dev_acc",
            Metric::Bleu => "bleu",
            Metric::Cosine => "cosine",
        }
    }

    pub fn of(&self, m: &Metrics) -> f64 {
        match self {
            Metric::DevLoss => m.dev_loss,
            Metric::DevAccuracy => m.dev_acc,
            Metric::Bleu => m.bleu,
            Metric::Cosine => m.cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Start {
    Scratch,
    Pretrained { ras: bool },
}

/// One arm: where training starts, what it trains on, and the direction
/// it is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub start: Start,
    pub src: usize,
    pub tgt: usize,
    /// Training pairs taken from the direction's train split (`None` for
    /// all of it); ignored when `steps` is 0.
    pub size: Option<usize>,
    pub steps: u64,
}

impl ArmSpec {
    pub fn direct(name: &str, src: usize, tgt: usize, steps: u64) -> Self {
        ArmSpec {
            name: name.into(),
            start: Start::Scratch,
            src,
            tgt,
            size: None,
            steps,
        }
    }

    pub fn finetuned(name: &str, ras: bool, src: usize, tgt: usize, steps: u64) -> Self {
        ArmSpec {
            start: Start::Pretrained { ras },
            ..ArmSpec::direct(name, src, tgt, steps)
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = Some(size);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    /// `(arm name, description)` in run order.
    pub arms: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub results: Vec<ArmResult>,
}

fn run_arm(lab: &Lab, arm: &ArmSpec, seed: u64) -> Result<Metrics, SynthError> {
    let mut params = match arm.start {
        Start::Scratch => {
            let p = init_parameters(&lab.cfg.model, seed, InitOptions::default())?;
            Checkpoint {
                params: p,
                adam: None,
                step: 0,
                loss: f64::NAN,
                vocab_hash: lab.tokenizer.vocab().content_hash(),
            }
        }
        Start::Pretrained { ras } => lab.pretrained(ras, seed)?,
    }
    .clone();
    if arm.steps > 0 {
        let full = lab.family.corpus(Split::Train, arm.src, arm.tgt)?;
        let data = match arm.size {
            Some(n) => corpus::subsample(&full, n, seeding::derive(seed, stream::SUBSAMPLE, n as u64)),
            None => full,
        };
        let cfg = TrainConfig {
            seed,
            total_steps: arm.steps,
            warmup_steps: lab.cfg.finetune.warmup_steps.min(arm.steps),
            ..lab.cfg.finetune.clone()
        };
        params = finetune(&params, &data, &TrainContext::new(&lab.tokenizer), &cfg)?.checkpoint;
    }
    lab.evaluate(&params.params, arm.src, arm.tgt)
}

/// Trains and evaluates every arm under every seed. Arms sharing a
/// pre-training setup reuse one checkpoint per seed, and every arm of a
/// seed sees the same batches.
pub fn run_comparison(lab: &Lab, arms: &[ArmSpec], seeds: &[u64]) -> Result<ExperimentReport, SynthError> {
    if seeds.is_empty() || arms.is_empty() {
        return Err(SynthError::InvalidSpec("need at least one arm and one seed".into()));
    }
    let per_seed: Vec<Vec<ArmResult>> = seeds
        .par_iter()
        .map(|&seed| {
            arms.iter()
                .map(|arm| {
                    Ok(ArmResult {
                        arm: arm.name.clone(),
                        seed,
                        metrics: run_arm(lab, arm, seed)?,
                    })
                })
                .collect::<Result<Vec<_>, SynthError>>()
        })
        .collect::<Result<_, _>>()?;
    let describe = |a: &ArmSpec| {
        let start = match a.start {
            Start::Scratch => "scratch".to_string(),
            Start::Pretrained { ras } => format!("pretrained(ras={ras})"),
        };
        let size = a.size.map_or("all".to_string(), |n| n.to_string());
        format!(
            "{start} {}->{} [{}] size={size} steps={}",
            language_code(a.src),
            language_code(a.tgt),
            lab.taxonomy(a.src, a.tgt).label(),
            a.steps
        )
    };
    Ok(ExperimentReport {
        arms: arms.iter().map(|a| (a.name.clone(), describe(a))).collect(),
        seeds: seeds.to_vec(),
        results: per_seed.into_iter().flatten().collect(),
    })
}

impl ExperimentReport {
    /// Values of `metric` for `arm`, in seed order.
    pub fn per_seed(&self, arm: &str, metric: Metric) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|s| {
                self.results
                    .iter()
                    .find(|r| r.arm == arm && r.seed == *s)
                    .map(|r| metric.of(&r.metrics))
            })
            .collect()
    }

    pub fn mean(&self, arm: &str, metric: Metric) -> f64 {
        let v = self.per_seed(arm, metric);
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Per-seed `arm - baseline`.
    pub fn delta(&self, arm: &str, baseline: &str, metric: Metric) -> Vec<f64> {
        self.per_seed(arm, metric)
            .iter()
            .zip(self.per_seed(baseline, metric))
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Aligned text table of per-arm means plus descriptions.
    pub fn to_table(&self) -> String {
        let mut rows = vec![vec!["arm".to_string()]];
        rows[0].extend(Metric::ALL.iter().map(|m| m.name().to_string()));
        rows[0].push("setup".into());
        for (name, desc) in &self.arms {
            let mut r = vec![name.clone()];
            r.extend(Metric::ALL.iter().map(|m| format!("{:.4}", self.mean(name, *m))));
            r.push(desc.clone());
            rows.push(r);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut s = format!("# seeds: {:?}\n", self.seeds);
        for r in rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i + 1 == cols { c.clone() } else { format!("{c:<w$}") })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }

    /// `arm TAB seed TAB metric TAB value` per measurement.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            for m in Metric::ALL {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", r.arm, r.seed, m.name(), m.of(&r.metrics));
            }
        }
        s
    }
}

/// One size of a fine-tuning volume curve.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRow {
    pub size: usize,
    pub seed: u64,
    pub pretrained: Metrics,
    pub direct: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeCurve {
    pub rows: Vec<VolumeRow>,
}

impl VolumeCurve {
    /// `pretrained - direct` dev accuracy at `size` for `seed`.
    pub fn gap(&self, size: usize, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.size == size && r.seed == seed)
            .map(|r| r.pretrained.dev_acc - r.direct.dev_acc)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("size\tseed\tpretrained_acc\tdirect_acc\tgap\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.size,
                r.seed,
                r.pretrained.dev_acc,
                r.direct.dev_acc,
                r.pretrained.dev_acc - r.direct.dev_acc
            );
        }
        s
    }
}

/// Fine-tuned (from the RAS checkpoint) versus direct training at each
/// data size with the same step budget. Size 0 evaluates the untouched
/// starting points. Sizes are reported in ascending order.
pub fn volume_curve(
    lab: &Lab,
    src: usize,
    tgt: usize,
    sizes: &[usize],
    steps: u64,
    seeds: &[u64],
) -> Result<VolumeCurve, SynthError> {
    let full = lab.family.corpus(Split::Train, src, tgt)?.len();
    let mut sizes: Vec<usize> = sizes.iter().map(|&s| s.min(full)).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut arms = Vec::new();
    for &n in &sizes {
        let st = if n == 0 { 0 } else { steps };
        arms.push(ArmSpec::finetuned(&format!("pre@{n}"), true, src, tgt, st).with_size(n));
        arms.push(ArmSpec::direct(&format!("direct@{n}"), src, tgt, st).with_size(n));
    }
    let report = run_comparison(lab, &arms, seeds)?;
    let mut rows = Vec::new();
    for &n in &sizes {
        for &seed in seeds {
            let find = |name: String| {
                report
                    .results
                    .iter()
                    .find(|r| r.arm == name && r.seed == seed)
                    .map(|r| r.metrics)
                    .expect("every arm ran")
            };
            rows.push(VolumeRow {
                size: n,
                seed,
                pretrained: find(format!("pre@{n}")),
                direct: find(format!("direct@{n}")),
            });
        }
    }
    Ok(VolumeCurve { rows })
}

/// What an experiment spec asks to run.
#[derive(Debug, Clone, PartialEq)]
pub enum Design {
    /// Direct vs fine-tuned (with and without RAS) on each target direction.
    Main { targets: Vec<(usize, usize)> },
    /// RAS vs no-RAS pre-training, compared on aligned-word cosine.
    Ras,
    Volume { src: usize, tgt: usize, sizes: Vec<usize> },
}

/// A parsed `key=value` experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub family: SynthFamilySpec,
    pub lab: LabConfig,
    pub design: Design,
    pub seeds: Vec<u64>,
}

fn parse_list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse().ok()).collect()
}

fn parse_lang(s: &str, n: usize) -> Option<usize> {
    let code = LanguageCode::new(s).ok()?;
    (0..n).find(|&i| language_code(i) == code)
}

fn parse_dir(s: &str, n: usize) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('-')?;
    Some((parse_lang(a, n)?, parse_lang(b, n)?))
}

impl ExperimentSpec {
    /// Keys not given keep the toy defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<ExperimentSpec, SynthError> {
        let mut kv: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(SynthError::MalformedSpec {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            kv.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let get = |key: &str| kv.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
        let seed = match get("family_seed") {
            Some((l, v)) => v.parse().map_err(|_| SynthError::MalformedSpec {
                line: l,
                reason: "family_seed".into(),
            })?,
            None => 1,
        };
        let mut fam = SynthFamilySpec::toy(seed);
        if let Some((l, v)) = get("languages") {
            fam.num_languages = v.parse().map_err(|_| SynthError::MalformedSpec {
                line: l,
                reason: "languages".into(),
            })?;
            let defaults = [WordOrder::Identity, WordOrder::Reverse, WordOrder::SwapPairs, WordOrder::Rotate];
            fam.orders = (0..fam.num_languages).map(|i| defaults[i % defaults.len()]).collect();
        }
        let n = fam.num_languages;
        let mut lab = LabConfig::toy();
        let mut design_name = "main".to_string();
        let mut targets = None;
        let mut sizes = vec![100, 1000, usize::MAX];
        let mut seeds = vec![1, 2, 3];
        for (line, k, v) in &kv {
            let bad = || SynthError::MalformedSpec {
                line: *line,
                reason: format!("bad value for {k}: {v:?}"),
            };
            macro_rules! num {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k.as_str() {
                "family_seed" | "languages" => {}
                "vocab" => fam.vocab_per_lang = num!(),
                "min_len" => fam.min_len = num!(),
                "max_len" => fam.max_len = num!(),
                "noise" => fam.noise = num!(),
                "successors" => fam.successors = num!(),
                "orders" => {
                    fam.orders = v.split(',').map(|s| s.trim().parse()).collect::<Result<_, _>>().map_err(|_| bad())?
                }
                "pairs" | "pool" => {}
                "model_dim" => lab.model.model_dim = num!(),
                "heads" => lab.model.heads = num!(),
                "ffn_dim" => lab.model.ffn_dim = num!(),
                "layers" => {
                    let l: usize = num!();
                    lab.model.enc_layers = l;
                    lab.model.dec_layers = l;
                }
                "max_positions" => lab.model.max_positions = num!(),
                "pretrain_steps" => lab.pretrain.total_steps = num!(),
                "pretrain_warmup" => lab.pretrain.warmup_steps = num!(),
                "pretrain_lr" => lab.pretrain.peak_lr = num!(),
                "finetune_steps" => lab.finetune.total_steps = num!(),
                "finetune_warmup" => lab.finetune.warmup_steps = num!(),
                "finetune_lr" => lab.finetune.peak_lr = num!(),
                "finetune_dropout" => lab.finetune.dropout = num!(),
                "dropout" => lab.pretrain.dropout = num!(),
                "batch_tokens" => {
                    let b: usize = num!();
                    lab.pretrain.batch_tokens = b;
                    lab.finetune.batch_tokens = b;
                }
                "ras_prob" => lab.ras_prob = num!(),
                "merges" => lab.bpe_merges = num!(),
                "min_count" => lab.min_count = num!(),
                "bleu_sentences" => lab.bleu_sentences = num!(),
                "design" => design_name = v.clone(),
                "targets" => {
                    targets = Some(v.split(',').map(|s| parse_dir(s.trim(), n)).collect::<Option<Vec<_>>>().ok_or_else(bad)?)
                }
                "sizes" => {
                    sizes = v
                        .split(',')
                        .map(|s| match s.trim() {
                            "full" => Some(usize::MAX),
                            t => t.parse().ok(),
                        })
                        .collect::<Option<_>>()
                        .ok_or_else(bad)?
                }
                "seeds" => seeds = parse_list(v).ok_or_else(bad)?,
                _ => {
                    return Err(SynthError::MalformedSpec {
                        line: *line,
                        reason: format!("unknown key {k}"),
                    })
                }
            }
        }
        if let Some((line, v)) = get("pairs") {
            let bad = || SynthError::MalformedSpec {
                line,
                reason: "pairs must look like la-lb:2000,...".into(),
            };
            fam.pairs = v
                .split(',')
                .map(|item| {
                    let (dir, size) = item.trim().split_once(':')?;
                    let (a, b) = parse_dir(dir, n)?;
                    Some(PairSpec {
                        a,
                        b,
                        train: size.parse().ok()?,
                        dev: 200,
                        test: 200,
                        in_pool: false,
                    })
                })
                .collect::<Option<_>>()
                .ok_or_else(bad)?;
            if get("pool").is_none() {
                fam.pairs.iter_mut().for_each(|p| p.in_pool = true);
            }
        }
        if let Some((line, v)) = get("pool") {
            let pool: Vec<(usize, usize)> = v
                .split(',')
                .map(|s| parse_dir(s.trim(), n))
                .collect::<Option<_>>()
                .ok_or(SynthError::MalformedSpec {
                    line,
                    reason: "pool must list pairs like la-lb".into(),
                })?;
            for p in fam.pairs.iter_mut() {
                p.in_pool = pool.iter().any(|&(a, b)| (a, b) == (p.a, p.b) || (b, a) == (p.a, p.b));
            }
        }
        let pool: Vec<(usize, usize)> = fam.pairs.iter().filter(|p| p.in_pool).map(|p| (p.a, p.b)).collect();
        let design = match design_name.as_str() {
            "main" => Design::Main {
                targets: targets.unwrap_or_else(|| {
                    // every non-pooled pair plus the smallest pooled one
                    let mut t: Vec<(usize, usize)> = fam
                        .pairs
                        .iter()
                        .filter(|p| !p.in_pool)
                        .map(|p| (p.a, p.b))
                        .collect();
                    if let Some(p) = fam.pairs.iter().filter(|p| p.in_pool).min_by_key(|p| p.train) {
                        t.insert(0, (p.a, p.b));
                    }
                    t
                }),
            },
            "ras" => Design::Ras,
            "volume" => {
                let (src, tgt) = targets
                    .and_then(|t| t.first().copied())
                    .or_else(|| fam.pairs.iter().find(|p| !p.in_pool).map(|p| (p.a, p.b)))
                    .ok_or_else(|| SynthError::InvalidSpec("volume design needs a target".into()))?;
                Design::Volume { src, tgt, sizes }
            }
            other => return Err(SynthError::InvalidSpec(format!("unknown design {other:?}"))),
        };
        if pool.is_empty() {
            return Err(SynthError::InvalidSpec("the pre-training pool is empty".into()));
        }
        fam.validate()?;
        Ok(ExperimentSpec {
            family: fam,
            lab,
            design,
            seeds,
        })
    }
}

/// Runs a parsed experiment and returns its report text (table, then the
/// TSV dump).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<String, SynthError> {
    let family = generate_family(&spec.family)?;
    let lab = Lab::new(family, spec.lab.clone())?;
    let steps = spec.lab.finetune.total_steps;
    match &spec.design {
        Design::Main { targets } => {
            let mut arms = Vec::new();
            for &(s, t) in targets {
                let tag = format!("{}-{}", language_code(s), language_code(t));
                arms.push(ArmSpec::direct(&format!("direct:{tag}"), s, t, steps));
                arms.push(ArmSpec::finetuned(&format!("mrasp:{tag}"), true, s, t, steps));
                arms.push(ArmSpec::finetuned(&format!("noras:{tag}"), false, s, t, steps));
                arms.push(ArmSpec::finetuned(&format!("noft:{tag}"), true, s, t, 0));
            }
            let r = run_comparison(&lab, &arms, &spec.seeds)?;
            let mut out = r.to_table();
            out.push_str("# delta mrasp - direct (dev_acc) per seed\n");
            for &(s, t) in targets {
                let tag = format!("{}-{}", language_code(s), language_code(t));
                let d = r.delta(&format!("mrasp:{tag}"), &format!("direct:{tag}"), Metric::DevAccuracy);
                let ds: Vec<String> = d.iter().map(|x| format!("{x:.4}")).collect();
                let _ = writeln!(out, "# {tag}\t{}\t{}", lab.taxonomy(s, t).label(), ds.join("\t"));
            }
            out.push_str(&r.to_tsv());
            Ok(out)
        }
        Design::Ras => {
            let pool = lab.family.pool_pairs();
            let (s, t) = pool[0];
            let arms = [
                ArmSpec::finetuned("pretrain+ras", true, s, t, 0),
                ArmSpec::finetuned("pretrain", false, s, t, 0),
            ];
            let r = run_comparison(&lab, &arms, &spec.seeds)?;
            Ok(r.to_table() + &r.to_tsv())
        }
        Design::Volume { src, tgt, sizes } => {
            let v = volume_curve(&lab, *src, *tgt, sizes, steps, &spec.seeds)?;
            Ok(v.to_table())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthFamilySpec {
        let pair = |a, b, train, in_pool| PairSpec {
            a,
            b,
            train,
            dev: 20,
            test: 20,
            in_pool,
        };
        SynthFamilySpec {
            num_languages: 3,
            vocab_per_lang: 20,
            min_len: 3,
            max_len: 6,
            orders: vec![WordOrder::Identity, WordOrder::Reverse, WordOrder::Rotate],
            noise: 0.2,
            successors: 3,
            pairs: vec![pair(0, 1, 100, true), pair(0, 2, 40, true), pair(1, 2, 60, false)],
            seed,
        }
    }

    #[test]
    fn word_orders_invert() {
        let xs: Vec<u32> = (0..7).collect();
        for o in [WordOrder::Identity, WordOrder::Reverse, WordOrder::SwapPairs, WordOrder::Rotate] {
            assert_eq!(o.invert(&o.apply(&xs)), xs);
            assert_eq!(o.name().parse::<WordOrder>().unwrap(), o);
        }
        assert_eq!(WordOrder::SwapPairs.apply(&[1, 2, 3]), vec![2, 1, 3]);
        assert_eq!(WordOrder::Rotate.apply(&[1, 2, 3]), vec![2, 3, 1]);
    }

    #[test]
    fn identity_grammar_is_a_relabeling() {
        let mut spec = small_spec(3);
        spec.orders = vec![WordOrder::Identity; 3];
        let fam = generate_family(&spec).unwrap();
        let d = fam.dictionary(0, 1);
        for p in fam.corpus(Split::Train, 0, 1).unwrap().iter() {
            let mapped: Vec<String> = p.source.iter().map(|w| d.lookup(w).unwrap()[0].clone()).collect();
            assert_eq!(mapped, p.target);
        }
    }

    #[test]
    fn reverse_grammar_reverses() {
        let mut spec = small_spec(4);
        spec.orders = vec![WordOrder::Identity, WordOrder::Reverse, WordOrder::Identity];
        let fam = generate_family(&spec).unwrap();
        let d = fam.dictionary(0, 1);
        for p in fam.corpus(Split::Dev, 0, 1).unwrap().iter() {
            let mut mapped: Vec<String> = p.source.iter().map(|w| d.lookup(w).unwrap()[0].clone()).collect();
            mapped.reverse();
            assert_eq!(mapped, p.target);
        }
    }

    #[test]
    fn replay_oracle_over_every_split() {
        let fam = generate_family(&small_spec(5)).unwrap();
        for p in &fam.spec.pairs {
            for split in [Split::Train, Split::Dev, Split::Test] {
                for dir in [(p.a, p.b), (p.b, p.a)] {
                    for pair in fam.corpus(split, dir.0, dir.1).unwrap().iter() {
                        assert_eq!(fam.translate(&pair.source, dir.0, dir.1).unwrap(), pair.target);
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_with_disjoint_vocabularies_and_splits() {
        let a = generate_family(&small_spec(6)).unwrap();
        let b = generate_family(&small_spec(6)).unwrap();
        let c = generate_family(&small_spec(7)).unwrap();
        let train = |f: &SynthFamily| f.corpus(Split::Train, 0, 1).unwrap();
        assert_eq!(train(&a), train(&b));
        assert_ne!(train(&a), train(&c));
        let vocab = |f: &SynthFamily, l: usize| f.words[l].iter().cloned().collect::<HashSet<_>>();
        for x in 0..3 {
            assert_eq!(vocab(&a, x).len(), 20);
            for y in x + 1..3 {
                assert!(vocab(&a, x).is_disjoint(&vocab(&a, y)));
            }
        }
        // dictionaries are mutually inverse bijections
        let ab = a.dictionary(0, 1);
        assert_eq!(ab.inverse().entries().len(), ab.len());
        for (w, c) in ab.entries() {
            assert_eq!(a.dictionary(1, 0).lookup(&c[0]).unwrap()[0], *w);
        }
        // distinct across every pair and split of the family
        let mut all: Vec<Vec<String>> = Vec::new();
        for p in &a.spec.pairs {
            for s in [Split::Train, Split::Dev, Split::Test] {
                for pair in a.corpus(s, p.a, p.b).unwrap().iter() {
                    all.push(a.translate(&pair.source, p.a, 0).unwrap());
                }
            }
        }
        let uniq: HashSet<&Vec<String>> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let mut s = small_spec(1);
        s.vocab_per_lang = 2;
        s.min_len = 1;
        s.max_len = 2;
        assert!(matches!(generate_family(&s), Err(SynthError::SpecInfeasible(_))));
        let mut s = small_spec(1);
        s.num_languages = 9;
        assert!(matches!(s.validate(), Err(SynthError::InvalidSpec(_))));
        let mut s = small_spec(1);
        s.pairs[1].b = 1;
        s.pairs[1].a = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn taxonomy_labels() {
        let pool = [(0, 1), (0, 2)];
        assert_eq!(Taxonomy::classify(&pool, 1, 0), Taxonomy::SeenPair);
        assert_eq!(Taxonomy::classify(&pool, 1, 2), Taxonomy::ExoticPair);
        assert_eq!(Taxonomy::classify(&pool, 3, 2), Taxonomy::ExoticSource);
        assert_eq!(Taxonomy::classify(&pool, 0, 3), Taxonomy::ExoticTarget);
        assert_eq!(Taxonomy::classify(&pool, 3, 4), Taxonomy::ExoticFull);
        assert_eq!(Taxonomy::ExoticPair.label(), "Exotic Pair");
    }

    #[test]
    fn family_files_round_trip() {
        let fam = generate_family(&small_spec(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fam.write_to_dir(dir.path()).unwrap();
        let manifest = corpus::CorpusManifest::load(&dir.path().join("manifest.tsv")).unwrap();
        let pool = manifest.load_parallel().unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool[0], fam.corpus(Split::Train, 0, 1).unwrap());
        let lex = Lexicon::load_dir(&dir.path().join("dict")).unwrap();
        assert_eq!(lex.sets().count(), 3);
        assert_eq!(
            lex.set(&language_code(1)).unwrap().get(&language_code(2)).unwrap(),
            &fam.dictionary(1, 2)
        );
    }

    fn tiny_lab() -> Lab {
        let mut cfg = LabConfig::toy();
        cfg.model.model_dim = 16;
        cfg.model.ffn_dim = 32;
        cfg.pretrain.total_steps = 6;
        cfg.pretrain.warmup_steps = 2;
        cfg.pretrain.batch_tokens = 120;
        cfg.finetune.batch_tokens = 120;
        cfg.bleu_sentences = 3;
        Lab::new(generate_family(&small_spec(9)).unwrap(), cfg).unwrap()
    }

    #[test]
    fn identical_arms_have_zero_delta() {
        let lab = tiny_lab();
        let arms = [
            ArmSpec::finetuned("x", true, 1, 2, 4),
            ArmSpec::finetuned("y", true, 1, 2, 4),
            ArmSpec::direct("d", 1, 2, 4),
        ];
        let r = run_comparison(&lab, &arms, &[1, 2]).unwrap();
        for m in Metric::ALL {
            if m != Metric::Bleu || r.mean("x", m).is_finite() {
                assert!(r.delta("x", "y", m).iter().all(|d| *d == 0.0), "{m:?}");
            }
        }
        assert_eq!(r.results.len(), 6);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 6 * 4);
        assert!(tsv.lines().all(|l| l.split('\t').count() == 4));
        assert!(r.to_table().contains("Exotic Pair"));
        // reproducible
        let again = run_comparison(&lab, &arms, &[1, 2]).unwrap();
        assert_eq!(again.to_tsv(), tsv);
    }

    #[test]
    fn zero_step_arm_evaluates_the_checkpoint() {
        let lab = tiny_lab();
        let r = run_comparison(&lab, &[ArmSpec::finetuned("noft", true, 0, 2, 0)], &[3]).unwrap();
        let ck = lab.pretrained(true, 3).unwrap();
        let direct = lab.evaluate(&ck.params, 0, 2).unwrap();
        assert_eq!(r.results[0].metrics.dev_loss, direct.dev_loss);
    }

    #[test]
    fn volume_curve_full_size_matches_plain_finetune() {
        let lab = tiny_lab();
        let v = volume_curve(&lab, 1, 2, &[0, 10, usize::MAX], 3, &[1]).unwrap();
        assert_eq!(v.rows.iter().map(|r| r.size).collect::<Vec<_>>(), vec![0, 10, 60]);
        let plain = run_comparison(&lab, &[ArmSpec::finetuned("ft", true, 1, 2, 3)], &[1]).unwrap();
        assert_eq!(v.rows[2].pretrained, plain.results[0].metrics);
        assert!(v.gap(10, 1).is_some());
        assert!(v.to_table().lines().count() == 4);
    }

    #[test]
    fn experiment_spec_parsing() {
        let s = ExperimentSpec::parse(
            "# demo\nlanguages=3\nvocab=30\npairs=la-lb:500,la-lc:100,lb-lc:400\npool=la-lb,la-lc\ndesign=volume\nsizes=10,full\nseeds=4,5\nfinetune_steps=50\n",
        )
        .unwrap();
        assert_eq!(s.seeds, vec![4, 5]);
        assert_eq!(s.family.vocab_per_lang, 30);
        assert_eq!(s.lab.finetune.total_steps, 50);
        assert!(s.family.pairs[0].in_pool && !s.family.pairs[2].in_pool);
        assert_eq!(
            s.design,
            Design::Volume {
                src: 1,
                tgt: 2,
                sizes: vec![10, usize::MAX]
            }
        );
        let main = ExperimentSpec::parse("pool=la-lb,la-lc\n").unwrap();
        assert_eq!(main.design, Design::Main { targets: vec![(0, 2), (1, 2)] });
        assert!(matches!(ExperimentSpec::parse("bogus=1"), Err(SynthError::MalformedSpec { line: 1, .. })));
        assert!(matches!(ExperimentSpec::parse("vocab"), Err(SynthError::MalformedSpec { .. })));
    }
}
