use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use mrasp_core::analysis;
use mrasp_core::corpus::{self, CorpusManifest, LanguageCode, ParallelCorpus};
use mrasp_core::model::ModelConfig;
use mrasp_core::ras::{AugmentMode, Lexicon, RasConfig, RasEngine};
use mrasp_core::subword::{self, BpeLearnConfig, BpeModel, TextSide, Vocabulary};
use mrasp_core::synthlab::{self, ExperimentSpec};
use mrasp_core::trainer::{self, Checkpoint, Search, TrainConfig, TrainContext, TrainError, TrainOutcome, Tokenizer};
use rayon::prelude::*;

use crate::args::*;
use crate::settings::Settings;
use crate::CliError;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn parse_pair(s: &str) -> Result<(LanguageCode, LanguageCode), CliError> {
    let bad = || CliError::Usage(format!("--pair must look like src-tgt, got {s:?}"));
    let (a, b) = s.split_once('-').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn load_pair(st: &Settings, args: &PairArgs) -> Result<ParallelCorpus, CliError> {
    let (a, b) = parse_pair(&st.require("pair", args.pair.clone())?)?;
    let src = st.require_path("src", args.src.clone())?;
    let tgt = st.require_path("tgt", args.tgt.clone())?;
    Ok(corpus::load_parallel_corpus(&src, &tgt, a, b)?)
}

fn load_tokenizer(st: &Settings, args: &TokenizerArgs) -> Result<Tokenizer, CliError> {
    let bpe = BpeModel::load(&st.require_path("merges", args.merges.clone())?)?;
    let vocab = Vocabulary::load(&st.require_path("vocab", args.vocab.clone())?)?;
    Ok(Tokenizer::new(bpe, vocab))
}

fn load_checkpoint(st: &Settings, path: Option<PathBuf>, tok: &Tokenizer) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load_for(&st.require_path("checkpoint", path)?, tok.vocab())?)
}

/// Every side of the manifest: parallel entries plus monolingual text.
fn manifest_sides(st: &Settings, manifest: Option<PathBuf>, mono_limit: Option<usize>) -> Result<Vec<TextSide>, CliError> {
    let m = CorpusManifest::load(&st.require_path("manifest", manifest)?)?;
    let limit = st.opt("mono_limit", mono_limit)?;
    let mut sides: Vec<TextSide> = m.load_parallel()?.iter().flat_map(TextSide::from_parallel).collect();
    sides.extend(m.load_monolingual(limit)?.iter().map(TextSide::from_monolingual));
    Ok(sides)
}

pub fn learn_bpe(st: &Settings, a: LearnBpe) -> Result<(), CliError> {
    let sides = manifest_sides(st, a.manifest, a.mono_limit)?;
    let cfg = BpeLearnConfig {
        num_merges: st.get("num_merges", a.num_merges, 1000)?,
        min_frequency: st.get("min_frequency", a.min_frequency, BpeLearnConfig::new(0).min_frequency)?,
    };
    let out = st.require_path("out", a.out)?;
    st.finish()?;
    let policy = subword::compute_oversampling_weights(&subword::language_sizes(&sides))?;
    let bpe = subword::learn_bpe(&sides, &cfg, &policy)?;
    log::info!("learned {} merges", bpe.len());
    bpe.save(&out)?;
    Ok(())
}

pub fn apply_bpe(st: &Settings, a: ApplyBpe) -> Result<(), CliError> {
    let bpe = BpeModel::load(&st.require_path("merges", a.merges)?)?;
    let input = st.path("input", a.input)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    let text = match &input {
        Some(p) => read_text(p)?,
        None => {
            let mut s = String::new();
            io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| CliError::io(Path::new("<stdin>"), e))?;
            s
        }
    };
    let mut result = String::with_capacity(text.len() * 2);
    for line in text.lines() {
        result.push_str(&bpe.apply(&corpus::tokenize_words(line)).join(" "));
        result.push('\n');
    }
    write_output(out.as_deref(), &result)
}

pub fn build_vocab(st: &Settings, a: BuildVocab) -> Result<(), CliError> {
    let sides = manifest_sides(st, a.manifest, a.mono_limit)?;
    let bpe = BpeModel::load(&st.require_path("merges", a.merges)?)?;
    let min_count = st.get("min_count", a.min_count, subword::DEFAULT_MIN_COUNT)?;
    let out = st.require_path("out", a.out)?;
    st.finish()?;
    let segmented: Vec<Vec<String>> = sides
        .iter()
        .flat_map(|s| s.sentences.iter().map(|sent| bpe.apply(sent)))
        .collect();
    let mut langs: Vec<LanguageCode> = sides.iter().map(|s| s.lang.clone()).collect();
    langs.sort();
    langs.dedup();
    let vocab = subword::build_vocabulary(segmented.iter().map(Vec::as_slice), min_count, &langs)?;
    log::info!("vocabulary of {} entries", vocab.len());
    vocab.save(&out)?;
    Ok(())
}

/// RAS settings, or `None` when no dictionary directory was given.
fn ras_settings(st: &Settings, a: &RasArgs, seed: u64) -> Result<Option<(Lexicon, RasConfig)>, CliError> {
    let defaults = RasConfig::default();
    let dict = st.path("dict", a.dict.clone())?;
    let cfg = RasConfig {
        substitution_prob: st.get("prob", a.prob, defaults.substitution_prob)?,
        top_k_words: st.get("top_k", a.top_k, defaults.top_k_words)?,
        substitute_target_side: st.flag("target_side", a.target_side)?,
        seed,
        ..defaults
    };
    match dict {
        Some(dir) => Ok(Some((Lexicon::load_dir(&dir)?, cfg))),
        None => Ok(None),
    }
}

pub fn ras_augment(st: &Settings, a: RasAugment) -> Result<(), CliError> {
    let seed = st.require("seed", a.seed)?;
    let corpus = load_pair(st, &a.pair)?;
    let (lexicon, mut cfg) =
        ras_settings(st, &a.ras, seed)?.ok_or_else(|| CliError::Usage("ras-augment: --dict is required".into()))?;
    if st.flag("replace_in_place", a.replace_in_place)? {
        cfg.mode = AugmentMode::ReplaceInPlace;
    }
    let prefix = st.require_path("out", a.out)?;
    st.finish()?;
    let engine = RasEngine::new(&lexicon, cfg.clone())?;
    let (mut eligible, mut substituted) = (0usize, 0usize);
    let mut pairs = Vec::with_capacity(corpus.len() * 2);
    for (i, pair) in corpus.iter().enumerate() {
        let o = engine.substitute_indexed(&pair, i as u64);
        eligible += o.eligible;
        substituted += o.substituted;
        if cfg.mode == AugmentMode::Double {
            pairs.push(pair);
        }
        pairs.push(o.pair);
    }
    let path_for = |lang: &LanguageCode| PathBuf::from(format!("{}.{lang}.ras", prefix.display()));
    let (s, t) = corpus.direction();
    corpus::write_sides(pairs.into_iter(), &path_for(&s), &path_for(&t))?;
    let rate = if eligible == 0 { 0.0 } else { substituted as f64 / eligible as f64 };
    print!("{}", st.header());
    println!("eligible\t{eligible}\nsubstituted\t{substituted}\nrate\t{rate}");
    Ok(())
}

fn schedule(st: &Settings, a: &ScheduleArgs, base: TrainConfig) -> Result<(TrainConfig, PathBuf), CliError> {
    let cfg = TrainConfig {
        seed: st.require("seed", a.seed)?,
        total_steps: st.get("steps", a.steps, base.total_steps)?,
        warmup_steps: st.get("warmup", a.warmup, base.warmup_steps)?,
        peak_lr: st.get("lr", a.lr, base.peak_lr)?,
        dropout: st.get("dropout", a.dropout, base.dropout)?,
        batch_tokens: st.get("batch_tokens", a.batch_tokens, base.batch_tokens)?,
        clip_norm: st.opt("clip_norm", a.clip_norm)?,
        checkpoint_every: st.get("checkpoint_every", a.checkpoint_every, base.checkpoint_every)?,
        ..base
    };
    Ok((cfg, st.require_path("out", a.out.clone())?))
}

/// On divergence the last good state is kept next to the other outputs.
fn keep_last_good(out: &Path, result: Result<TrainOutcome, TrainError>) -> Result<TrainOutcome, CliError> {
    match result {
        Err(e @ (TrainError::NaNLoss { .. } | TrainError::NaNUpdate { .. })) => {
            if let TrainError::NaNLoss { last_good, .. } | TrainError::NaNUpdate { last_good, .. } = &e {
                let path = out.join("checkpoint_last_good.mrasp");
                last_good.save(&path)?;
                log::warn!("saved the last good state to {}", path.display());
            }
            Err(e.into())
        }
        other => Ok(other?),
    }
}

fn finish_training(st: &Settings, out: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    let last = outcome.log.last();
    let mut report = st.header();
    let _ = writeln!(report, "steps\t{}", outcome.checkpoint.step);
    let _ = writeln!(report, "final_loss\t{}", last.map_or(f64::NAN, |l| l.loss));
    fs::write(out.join("config.txt"), st.header()).map_err(|e| CliError::io(out, e))?;
    print!("{report}");
    Ok(())
}

pub fn pretrain(st: &Settings, a: Pretrain) -> Result<(), CliError> {
    let tok = load_tokenizer(st, &a.tokenizer)?;
    let pool = corpus::build_training_pool(&CorpusManifest::load(&st.require_path("manifest", a.manifest)?)?)?;
    let (mut cfg, out) = schedule(st, &a.schedule, TrainConfig::desk())?;
    let ras = ras_settings(st, &a.ras, cfg.seed)?;
    st.note("ras", ras.is_some());
    let base = ModelConfig::desk(tok.vocab().len());
    let layers = st.get("layers", a.layers, base.enc_layers)?;
    let model = ModelConfig {
        enc_layers: layers,
        dec_layers: layers,
        model_dim: st.get("model_dim", a.model_dim, base.model_dim)?,
        heads: st.get("heads", a.heads, base.heads)?,
        ffn_dim: st.get("ffn_dim", a.ffn_dim, base.ffn_dim)?,
        max_positions: st.get("max_positions", a.max_positions, base.max_positions)?,
        label_smoothing: st.get("label_smoothing", a.label_smoothing, base.label_smoothing)?,
        dropout: cfg.dropout,
        ..base
    };
    st.finish()?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let lexicon = ras.map(|(lex, rc)| {
        cfg.ras = Some(rc);
        lex
    });
    let ctx = TrainContext {
        lexicon: lexicon.as_ref(),
        out_dir: Some(&out),
        ..TrainContext::new(&tok)
    };
    let outcome = keep_last_good(&out, trainer::pretrain(&pool, &ctx, &cfg, &model))?;
    finish_training(st, &out, &outcome)
}

pub fn finetune(st: &Settings, a: Finetune) -> Result<(), CliError> {
    let tok = load_tokenizer(st, &a.tokenizer)?;
    let ckpt = load_checkpoint(st, a.checkpoint, &tok)?;
    let corpus = load_pair(st, &a.pair)?;
    let (cfg, out) = schedule(st, &a.schedule, TrainConfig::finetune_desk())?;
    st.finish()?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let ctx = TrainContext {
        out_dir: Some(&out),
        ..TrainContext::new(&tok)
    };
    let outcome = keep_last_good(&out, trainer::finetune(&ckpt, &corpus, &ctx, &cfg))?;
    finish_training(st, &out, &outcome)
}

pub fn translate(st: &Settings, a: Translate) -> Result<(), CliError> {
    let tok = load_tokenizer(st, &a.tokenizer)?;
    let ckpt = load_checkpoint(st, a.checkpoint, &tok)?;
    let (src, tgt) = parse_pair(&st.require("pair", a.pair)?)?;
    let input = st.require_path("input", a.input)?;
    let search = if st.flag("greedy", a.greedy)? {
        Search::Greedy
    } else {
        Search::Beam(st.get("beam", a.beam, 4)?)
    };
    if search == Search::Beam(0) {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let max_len = st.get("max_len", a.max_len, 64)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    // hypotheses stay line-aligned with the input, so the settings go to the log
    for line in st.header().lines() {
        log::info!("{line}");
    }
    let text = read_text(&input)?;
    let lines: Vec<&str> = text.lines().collect();
    let hyps: Vec<String> = lines
        .par_iter()
        .map(|line| {
            let words = corpus::tokenize_words(line);
            if words.is_empty() {
                return Ok(String::new());
            }
            trainer::translate_words(&ckpt.params, &tok, &words, &src, &tgt, search, max_len).map(|w| w.join(" "))
        })
        .collect::<Result<_, _>>()?;
    let mut result = String::new();
    for h in hyps {
        result.push_str(&h);
        result.push('\n');
    }
    write_output(out.as_deref(), &result)
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    Ok(read_text(path)?.lines().map(corpus::tokenize_words).collect())
}

pub fn score_bleu(st: &Settings, a: ScoreBleu) -> Result<(), CliError> {
    let hyps = read_sentences(&st.require_path("hyp", a.hyp)?)?;
    let refs = read_sentences(&st.require_path("ref", a.reference)?)?;
    let max_n = st.get("max_n", a.max_n, 4)?;
    let smooth = st.flag("smooth", a.smooth)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    let b = analysis::bleu_detailed(&hyps, &refs, max_n, smooth)?;
    let mut s = st.header();
    let p: Vec<String> = b.precisions.iter().map(|x| format!("{x:.6}")).collect();
    let _ = writeln!(s, "BLEU\t{:.6}", b.score);
    let _ = writeln!(s, "precisions\t{}", p.join("\t"));
    let _ = writeln!(s, "brevity_penalty\t{:.6}", b.brevity_penalty);
    let _ = writeln!(s, "hyp_len\t{}\nref_len\t{}", b.hyp_len, b.ref_len);
    write_output(out.as_deref(), &s)
}

pub fn analyze_similarity(st: &Settings, a: AnalyzeSimilarity) -> Result<(), CliError> {
    let tok = load_tokenizer(st, &a.tokenizer)?;
    let ckpt = load_checkpoint(st, a.checkpoint, &tok)?;
    let lexicon = Lexicon::load_dir(&st.require_path("dict", a.dict)?)?;
    let top_k = st.get("top_k", a.top_k, 1000)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    let mut s = st.header();
    let mut averages = Vec::new();
    for dict in lexicon.sets().flat_map(|set| set.iter()) {
        let r = analysis::avg_aligned_cosine(&ckpt.params, &tok, dict, top_k)?;
        let _ = writeln!(s, "## {}-{}\t{} words", dict.src_lang, dict.tgt_lang, r.count());
        s.push_str(&r.to_text());
        averages.push(r.average);
    }
    let mean = averages.iter().sum::<f64>() / averages.len().max(1) as f64;
    let _ = writeln!(s, "MEAN\t{mean}");
    write_output(out.as_deref(), &s)
}

pub fn analyze_pca(st: &Settings, a: AnalyzePca) -> Result<(), CliError> {
    let tok = load_tokenizer(st, &a.tokenizer)?;
    let ckpt = load_checkpoint(st, a.checkpoint, &tok)?;
    let lexicon = Lexicon::load_dir(&st.require_path("dict", a.dict)?)?;
    let top_k = st.get("top_k", a.top_k, 50)?;
    let dims = st.get("dims", a.dims, 2)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    let mut seen = HashSet::new();
    let mut embeddings = Vec::new();
    for dict in lexicon.sets().flat_map(|set| set.iter()) {
        for (w, cands) in dict.entries().iter().take(top_k) {
            for (word, lang) in [(w, &dict.src_lang), (&cands[0], &dict.tgt_lang)] {
                if seen.insert((word.clone(), lang.clone())) {
                    embeddings.push(analysis::word_embedding(&ckpt.params, &tok, word, lang)?);
                }
            }
        }
    }
    let (_, report) = analysis::pca_report(&embeddings, dims)?;
    write_output(out.as_deref(), &(st.header() + &report))
}

fn read_spec(path: Option<PathBuf>) -> Result<(String, ExperimentSpec), CliError> {
    let text = match path {
        Some(p) => read_text(&p)?,
        None => String::new(),
    };
    let spec = ExperimentSpec::parse(&text)?;
    Ok((text, spec))
}

pub fn synth_generate(st: &Settings, a: SynthGenerate) -> Result<(), CliError> {
    let seed = st.require("seed", a.seed)?;
    let spec_path = st.path("spec", a.spec)?;
    let out = st.require_path("out", a.out)?;
    st.finish()?;
    let (_, mut spec) = read_spec(spec_path)?;
    spec.family.seed = seed;
    let family = synthlab::generate_family(&spec.family)?;
    family.write_to_dir(&out)?;
    let mut s = st.header();
    for p in &spec.family.pairs {
        let _ = writeln!(
            s,
            "{}-{}\ttrain={}\tdev={}\ttest={}\tpool={}",
            synthlab::language_code(p.a),
            synthlab::language_code(p.b),
            p.train,
            p.dev,
            p.test,
            p.in_pool
        );
    }
    write_output(None, &s)
}

pub fn experiment(st: &Settings, a: Experiment) -> Result<(), CliError> {
    let seed = st.require("seed", a.seed)?;
    let seeds = st.opt("seeds", a.seeds)?;
    let spec_path = st.require_path("spec", a.spec)?;
    let out = st.path("out", a.out)?;
    st.finish()?;
    let (text, mut spec) = read_spec(Some(spec_path))?;
    spec.family.seed = seed;
    if let Some(list) = seeds {
        spec.seeds = list
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--seeds must be comma-separated integers, got {list:?}")))?;
    }
    let mut s = st.header();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let _ = writeln!(s, "# spec: {line}");
    }
    s.push_str(&synthlab::run_experiment(&spec)?);
    write_output(out.as_deref(), &s)
}
