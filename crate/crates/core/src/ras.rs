//! Bilingual dictionaries and random aligned substitution (RAS).
//!
//! RAS rewrites a source sentence into a code-switched one: each word that
//! some dictionary covers is, with probability `substitution_prob`, replaced
//! by a translation into a randomly chosen other language.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::corpus::{is_language_token, LanguageCode, ParallelCorpus, SentencePair};
use crate::seeding;

#[derive(Debug, Error)]
pub enum RasError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: expected `source target`")]
    MalformedLine { path: PathBuf, line: usize },
    #[error("dictionary set is empty")]
    EmptySet,
    #[error("dictionary {found} does not share source language {expected}")]
    MixedSource { expected: String, found: String },
    #[error("dictionary file name {0:?} is not of the form src-tgt[.suffix].txt")]
    BadFileName(String),
    #[error("substitution probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Word-level translation table; entry and candidate order follow the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualDictionary {
    pub src_lang: LanguageCode,
    pub tgt_lang: LanguageCode,
    entries: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
}

impl BilingualDictionary {
    pub fn new(src_lang: LanguageCode, tgt_lang: LanguageCode) -> Self {
        BilingualDictionary {
            src_lang,
            tgt_lang,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a candidate; repeated candidates for a word are ignored.
    pub fn insert(&mut self, word: &str, candidate: &str) {
        match self.index.get(word) {
            Some(&i) => {
                let cands = &mut self.entries[i].1;
                if !cands.iter().any(|c| c == candidate) {
                    cands.push(candidate.to_string());
                }
            }
            None => {
                self.index.insert(word.to_string(), self.entries.len());
                self.entries
                    .push((word.to_string(), vec![candidate.to_string()]));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<String>)] {
        &self.entries
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.index.get(word).map(|&i| self.entries[i].1.as_slice())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Dictionary in the opposite direction, entries in first-seen order.
    pub fn inverse(&self) -> BilingualDictionary {
        let mut inv = BilingualDictionary::new(self.tgt_lang.clone(), self.src_lang.clone());
        for (w, cands) in &self.entries {
            for c in cands {
                inv.insert(c, w);
            }
        }
        inv
    }

    /// MUSE text form: one `source target` pair per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (w, cands) in &self.entries {
            for c in cands {
                s.push_str(w);
                s.push(' ');
                s.push_str(c);
                s.push('\n');
            }
        }
        s
    }
}

pub fn parse_muse_dictionary(
    text: &str,
    path: &Path,
    src: LanguageCode,
    tgt: LanguageCode,
) -> Result<BilingualDictionary, RasError> {
    let mut dict = BilingualDictionary::new(src, tgt);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(RasError::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
        dict.insert(fields[0], fields[1]);
    }
    Ok(dict)
}

pub fn load_muse_dictionary(
    path: &Path,
    src: LanguageCode,
    tgt: LanguageCode,
) -> Result<BilingualDictionary, RasError> {
    let text = fs::read_to_string(path).map_err(|source| RasError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_muse_dictionary(&text, path, src, tgt)
}

/// Keeps the first `k` source words in file order.
pub fn restrict_to_top_k(dict: &BilingualDictionary, k: usize) -> BilingualDictionary {
    if k >= dict.len() {
        return dict.clone();
    }
    let mut out = BilingualDictionary::new(dict.src_lang.clone(), dict.tgt_lang.clone());
    for (w, cands) in &dict.entries[..k] {
        out.index.insert(w.clone(), out.entries.len());
        out.entries.push((w.clone(), cands.clone()));
    }
    out
}

/// A uniformly random candidate translation, or `None` for unknown words.
pub fn translate_word<'d, R: Rng + ?Sized>(
    dict: &'d BilingualDictionary,
    word: &str,
    rng: &mut R,
) -> Option<&'d str> {
    let cands = dict.lookup(word)?;
    Some(&cands[rng.gen_range(0..cands.len())])
}

/// Dictionaries sharing one source language, keyed by target language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DictionarySet {
    src_lang: LanguageCode,
    dicts: BTreeMap<LanguageCode, BilingualDictionary>,
}

impl DictionarySet {
    pub fn new(dicts: Vec<BilingualDictionary>) -> Result<Self, RasError> {
        let src_lang = dicts.first().ok_or(RasError::EmptySet)?.src_lang.clone();
        let mut map = BTreeMap::new();
        for d in dicts {
            if d.src_lang != src_lang {
                return Err(RasError::MixedSource {
                    expected: src_lang.to_string(),
                    found: format!("{}-{}", d.src_lang, d.tgt_lang),
                });
            }
            map.insert(d.tgt_lang.clone(), d);
        }
        Ok(DictionarySet {
            src_lang,
            dicts: map,
        })
    }

    pub fn src_lang(&self) -> &LanguageCode {
        &self.src_lang
    }

    pub fn get(&self, tgt: &LanguageCode) -> Option<&BilingualDictionary> {
        self.dicts.get(tgt)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BilingualDictionary> {
        self.dicts.values()
    }

    pub fn restricted(&self, k: usize) -> DictionarySet {
        DictionarySet {
            src_lang: self.src_lang.clone(),
            dicts: self
                .dicts
                .iter()
                .map(|(l, d)| (l.clone(), restrict_to_top_k(d, k)))
                .collect(),
        }
    }

    /// Dictionaries in this set that cover `word`.
    fn covering<'a>(&'a self, word: &'a str) -> impl Iterator<Item = &'a BilingualDictionary> + 'a {
        self.dicts.values().filter(move |d| d.contains(word))
    }
}

/// All dictionary sets available for substitution, keyed by source language.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    sets: BTreeMap<LanguageCode, DictionarySet>,
}

impl Lexicon {
    /// Groups dictionaries by source language.
    pub fn new(dicts: Vec<BilingualDictionary>) -> Result<Self, RasError> {
        let mut grouped: BTreeMap<LanguageCode, Vec<BilingualDictionary>> = BTreeMap::new();
        for d in dicts {
            grouped.entry(d.src_lang.clone()).or_default().push(d);
        }
        let sets = grouped
            .into_iter()
            .map(|(l, ds)| DictionarySet::new(ds).map(|s| (l, s)))
            .collect::<Result<_, _>>()?;
        Ok(Lexicon { sets })
    }

    pub fn set(&self, src: &LanguageCode) -> Option<&DictionarySet> {
        self.sets.get(src)
    }

    pub fn sets(&self) -> impl Iterator<Item = &DictionarySet> {
        self.sets.values()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn restricted(&self, k: usize) -> Lexicon {
        Lexicon {
            sets: self
                .sets
                .iter()
                .map(|(l, s)| (l.clone(), s.restricted(k)))
                .collect(),
        }
    }

    /// Loads every `src-tgt[.anything].txt` file in a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, RasError> {
        let io_err = |source| RasError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io_err)?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "txt"));
        paths.sort();
        let mut dicts = Vec::new();
        for p in paths {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            let stem = name.split('.').next().unwrap_or_default();
            let (s, t) = stem
                .split_once('-')
                .ok_or_else(|| RasError::BadFileName(name.clone()))?;
            let (s, t) = match (LanguageCode::new(s), LanguageCode::new(t)) {
                (Ok(s), Ok(t)) => (s, t),
                _ => return Err(RasError::BadFileName(name)),
            };
            dicts.push(load_muse_dictionary(&p, s, t)?);
        }
        Lexicon::new(dicts)
    }
}

impl From<DictionarySet> for Lexicon {
    fn from(set: DictionarySet) -> Self {
        Lexicon {
            sets: [(set.src_lang.clone(), set)].into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Emit the original pair followed by its substituted variant.
    Double,
    /// Emit only the substituted variant.
    ReplaceInPlace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasConfig {
    pub substitution_prob: f64,
    pub top_k_words: usize,
    pub substitute_target_side: bool,
    pub lowercase_lookup: bool,
    pub mode: AugmentMode,
    pub seed: u64,
}

impl Default for RasConfig {
    fn default() -> Self {
        RasConfig {
            substitution_prob: 0.3,
            top_k_words: 1000,
            substitute_target_side: false,
            lowercase_lookup: true,
            mode: AugmentMode::Double,
            seed: 0,
        }
    }
}

impl RasConfig {
    pub fn validate(&self) -> Result<(), RasError> {
        if !(0.0..=1.0).contains(&self.substitution_prob) {
            return Err(RasError::BadProbability(self.substitution_prob));
        }
        Ok(())
    }
}

/// Result of one substitution pass with its counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasOutcome {
    pub pair: SentencePair,
    /// Words covered by at least one dictionary.
    pub eligible: usize,
    pub substituted: usize,
}

fn substitute_side<R: Rng + ?Sized>(
    words: &mut [String],
    set: &DictionarySet,
    cfg: &RasConfig,
    rng: &mut R,
) -> (usize, usize) {
    let (mut eligible, mut substituted) = (0, 0);
    for word in words.iter_mut() {
        if is_language_token(word) {
            continue;
        }
        let key = if cfg.lowercase_lookup {
            word.to_lowercase()
        } else {
            word.clone()
        };
        let covering: Vec<&BilingualDictionary> = set.covering(&key).collect();
        if covering.is_empty() {
            continue;
        }
        eligible += 1;
        if cfg.substitution_prob <= 0.0 || rng.gen::<f64>() >= cfg.substitution_prob {
            continue;
        }
        let dict = covering[rng.gen_range(0..covering.len())];
        if let Some(t) = translate_word(dict, &key, rng) {
            *word = t.to_string();
            substituted += 1;
        }
    }
    (eligible, substituted)
}

/// Code-switches the source side (and the target side when configured).
///
/// The lexicon should already be restricted to `cfg.top_k_words`; see
/// [`RasEngine`] for a wrapper that does this once.
pub fn ras_substitute_counted<R: Rng + ?Sized>(
    pair: &SentencePair,
    lexicon: &Lexicon,
    cfg: &RasConfig,
    rng: &mut R,
) -> RasOutcome {
    let mut out = pair.clone();
    let (mut eligible, mut substituted) = (0, 0);
    if let Some(set) = lexicon.set(&pair.src_lang) {
        let (e, s) = substitute_side(&mut out.source, set, cfg, rng);
        eligible += e;
        substituted += s;
    }
    if cfg.substitute_target_side {
        if let Some(set) = lexicon.set(&pair.tgt_lang) {
            let (e, s) = substitute_side(&mut out.target, set, cfg, rng);
            eligible += e;
            substituted += s;
        }
    }
    RasOutcome {
        pair: out,
        eligible,
        substituted,
    }
}

pub fn ras_substitute<R: Rng + ?Sized>(
    pair: &SentencePair,
    lexicon: &Lexicon,
    cfg: &RasConfig,
    rng: &mut R,
) -> SentencePair {
    ras_substitute_counted(pair, lexicon, cfg, rng).pair
}

/// A lexicon restricted to the configured top-k words, plus its config.
#[derive(Debug, Clone)]
pub struct RasEngine {
    lexicon: Lexicon,
    cfg: RasConfig,
}

impl RasEngine {
    pub fn new(lexicon: &Lexicon, cfg: RasConfig) -> Result<Self, RasError> {
        cfg.validate()?;
        Ok(RasEngine {
            lexicon: lexicon.restricted(cfg.top_k_words),
            cfg,
        })
    }

    pub fn config(&self) -> &RasConfig {
        &self.cfg
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    /// Substitutes pair number `index` of a stream, using the stream's
    /// index-derived generator.
    pub fn substitute_indexed(&self, pair: &SentencePair, index: u64) -> RasOutcome {
        let mut rng = seeding::rng(self.cfg.seed, seeding::stream::RAS, index);
        ras_substitute_counted(pair, &self.lexicon, &self.cfg, &mut rng)
    }

    /// Pairs emitted for input pair `index`, per the augmentation mode.
    pub fn expand(&self, pair: SentencePair, index: u64) -> Vec<SentencePair> {
        let variant = self.substitute_indexed(&pair, index).pair;
        match self.cfg.mode {
            AugmentMode::Double => vec![pair, variant],
            AugmentMode::ReplaceInPlace => vec![variant],
        }
    }

    pub fn augment_stream<'a>(
        &'a self,
        corpus: &'a ParallelCorpus,
    ) -> impl Iterator<Item = SentencePair> + 'a {
        (0..corpus.len()).flat_map(move |i| self.expand(corpus.pair(i), i as u64))
    }
}

/// Original and substituted pairs for every input pair, deterministic in
/// `cfg.seed`.
pub fn augment_stream<'a>(
    corpus: &'a ParallelCorpus,
    lexicon: &Lexicon,
    cfg: &RasConfig,
) -> Result<impl Iterator<Item = SentencePair> + 'a, RasError> {
    let engine = RasEngine::new(lexicon, cfg.clone())?;
    Ok((0..corpus.len()).flat_map(move |i| engine.expand(corpus.pair(i), i as u64)))
}
