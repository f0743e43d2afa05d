//! Joint BPE with per-language oversampling, and the shared vocabulary.
//!
//! Subwords use the `@@` continuation convention: every non-final piece of
//! a word carries the suffix `@@`, so `lower` may become `low@@ er`.
//! Language indicator tokens pass through unsplit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{is_language_token, LanguageCode, MonolingualText, ParallelCorpus};

pub const MARKER: &str = "@@";
pub const MERGES_HEADER: &str = "#mrasp-bpe v1";

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Default vocabulary threshold: keep tokens occurring more than 20 times.
pub const DEFAULT_MIN_COUNT: u64 = 21;

/// Fixed-point scale for oversampling weights (three decimal places).
const WEIGHT_SCALE: u64 = 1000;

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("no language sizes given")]
    EmptySizes,
    #[error("language {0} has size 0")]
    ZeroSize(LanguageCode),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(u32),
    #[error("merge file line {line}: {reason}")]
    MalformedMerges { line: usize, reason: String },
    #[error("vocabulary file line {line}: {reason}")]
    MalformedVocab { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SubwordError + '_ {
    move |source| SubwordError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-language oversampling weights, `max_size / size`.
#[derive(Debug, Clone, PartialEq)]
pub struct OversamplingPolicy {
    pub weights: BTreeMap<LanguageCode, f64>,
}

impl OversamplingPolicy {
    /// Every language weighted 1.
    pub fn uniform() -> Self {
        OversamplingPolicy {
            weights: BTreeMap::new(),
        }
    }

    pub fn weight(&self, lang: &LanguageCode) -> f64 {
        self.weights.get(lang).copied().unwrap_or(1.0)
    }

    /// Weight in fixed point, rounded to three decimals.
    fn scaled(&self, lang: &LanguageCode) -> u64 {
        (self.weight(lang) * WEIGHT_SCALE as f64).round() as u64
    }
}

pub fn compute_oversampling_weights(
    sizes: &BTreeMap<LanguageCode, u64>,
) -> Result<OversamplingPolicy, SubwordError> {
    if sizes.is_empty() {
        return Err(SubwordError::EmptySizes);
    }
    if let Some((lang, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(SubwordError::ZeroSize(lang.clone()));
    }
    let max = *sizes.values().max().unwrap() as f64;
    let weights = sizes
        .iter()
        .map(|(l, &n)| (l.clone(), max / n as f64))
        .collect();
    Ok(OversamplingPolicy { weights })
}

/// One language's worth of text for BPE learning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSide {
    pub lang: LanguageCode,
    pub sentences: Vec<Vec<String>>,
}

impl TextSide {
    /// Both sides of a parallel corpus.
    pub fn from_parallel(corpus: &ParallelCorpus) -> [TextSide; 2] {
        let (mut src, mut tgt) = (Vec::with_capacity(corpus.len()), Vec::with_capacity(corpus.len()));
        for p in corpus.iter() {
            src.push(p.source);
            tgt.push(p.target);
        }
        [
            TextSide {
                lang: corpus.src_lang().clone(),
                sentences: src,
            },
            TextSide {
                lang: corpus.tgt_lang().clone(),
                sentences: tgt,
            },
        ]
    }

    pub fn from_monolingual(text: &MonolingualText) -> TextSide {
        TextSide {
            lang: text.lang.clone(),
            sentences: text.sentences.clone(),
        }
    }
}

/// Sentence counts per language, as used for oversampling.
pub fn language_sizes(sides: &[TextSide]) -> BTreeMap<LanguageCode, u64> {
    let mut sizes = BTreeMap::new();
    for s in sides {
        *sizes.entry(s.lang.clone()).or_insert(0) += s.sentences.len() as u64;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Splits a word into character symbols, all but the last carrying `@@`.
pub fn initial_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 < n {
                format!("{c}{MARKER}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// The symbol produced by merging `left` (which carries `@@`) with `right`.
pub fn merged_symbol(left: &str, right: &str) -> String {
    let stem = left.strip_suffix(MARKER).unwrap_or(left);
    format!("{stem}{right}")
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged_symbol(left, right));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut kept = Vec::with_capacity(merges.len());
        for m in merges {
            if !ranks.contains_key(&m) {
                ranks.insert(m.clone(), kept.len());
                kept.push(m);
            }
        }
        BpeModel {
            merges: kept,
            ranks,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// Segments one word by repeatedly applying the highest-priority merge.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        if is_language_token(word) {
            return vec![word.to_string()];
        }
        let mut symbols = initial_symbols(word);
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.rank(&w[0], &w[1]))
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank].clone();
            merge_in_place(&mut symbols, &l, &r);
        }
        symbols
    }

    pub fn apply(&self, words: &[String]) -> Vec<String> {
        words.iter().flat_map(|w| self.apply_word(w)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MERGES_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SubwordError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MERGES_HEADER => {}
            _ => {
                return Err(SubwordError::MalformedMerges {
                    line: 1,
                    reason: format!("missing header {MERGES_HEADER:?}"),
                })
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 2 || fields.iter().any(|f| f.is_empty()) {
                return Err(SubwordError::MalformedMerges {
                    line: i + 1,
                    reason: "expected `left right`".into(),
                });
            }
            merges.push((fields[0].to_string(), fields[1].to_string()));
        }
        Ok(BpeModel::new(merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        BpeModel::parse(&text)
    }
}

/// Options for [`learn_bpe`].
#[derive(Debug, Clone, PartialEq)]
pub struct BpeLearnConfig {
    pub num_merges: usize,
    /// Learning stops early once the best pair's (weighted) count drops
    /// below this.
    pub min_frequency: u64,
}

impl BpeLearnConfig {
    pub fn new(num_merges: usize) -> Self {
        BpeLearnConfig {
            num_merges,
            min_frequency: 2,
        }
    }
}

type Pair = (String, String);

/// Learns merges over weighted word counts.
///
/// Counts are fixed-point (`weight * 1000` per occurrence) so ranking is
/// exact integer arithmetic. Ties go to the lexicographically smallest
/// `(left, right)`.
pub fn learn_bpe(
    sides: &[TextSide],
    config: &BpeLearnConfig,
    policy: &OversamplingPolicy,
) -> Result<BpeModel, SubwordError> {
    let mut word_counts: HashMap<&str, u64> = HashMap::new();
    for side in sides {
        let w = policy.scaled(&side.lang);
        for sent in &side.sentences {
            for word in sent.iter().filter(|w| !is_language_token(w)) {
                *word_counts.entry(word.as_str()).or_insert(0) += w;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let mut words: Vec<(&str, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();
    let mut symbols: Vec<Vec<String>> = words.iter().map(|(w, _)| initial_symbols(w)).collect();
    let counts: Vec<u64> = words.iter().map(|&(_, c)| c).collect();

    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, syms) in symbols.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0].clone(), p[1].clone());
            *pair_counts.entry(key.clone()).or_insert(0) += counts[wi];
            where_.entry(key).or_default().insert(wi);
        }
    }

    let threshold = config.min_frequency.saturating_mul(WEIGHT_SCALE);
    let mut merges = Vec::with_capacity(config.num_merges);
    while merges.len() < config.num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .min_by(|(pa, ca), (pb, cb)| cb.cmp(ca).then_with(|| pa.cmp(pb)));
        let Some((pair, &count)) = best else { break };
        if count < threshold {
            break;
        }
        let pair = pair.clone();
        let mut affected: Vec<usize> = where_
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let c = counts[wi];
            for p in symbols[wi].windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(v) = pair_counts.get_mut(&key) {
                    *v -= c;
                }
            }
            merge_in_place(&mut symbols[wi], &pair.0, &pair.1);
            for p in symbols[wi].windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_insert(0) += c;
                where_.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
        merges.push(pair);
    }
    Ok(BpeModel::new(merges))
}

/// Shared token table with reserved specials at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let ids = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i as u32))
            .collect();
        let (tokens, counts) = entries.into_iter().unzip();
        Vocabulary { tokens, counts, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn language_id(&self, lang: &LanguageCode) -> Option<u32> {
        self.id(&lang.token())
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>, SubwordError> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(SubwordError::UnknownId(id))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            s.push_str(&format!("{t}\t{c}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SubwordError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: &str| SubwordError::MalformedVocab {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (tok, count) = line.split_once('\t').ok_or_else(|| bad("expected `token TAB count`"))?;
            let count: u64 = count.parse().map_err(|_| bad("count is not an integer"))?;
            if tok.is_empty() || !seen.insert(tok.to_string()) {
                return Err(bad("empty or duplicate token"));
            }
            entries.push((tok.to_string(), count));
        }
        for (id, sp) in SPECIALS.iter().enumerate() {
            if entries.get(id).map(|(t, _)| t.as_str()) != Some(sp) {
                return Err(SubwordError::MalformedVocab {
                    line: id + 1,
                    reason: format!("expected reserved token {sp}"),
                });
            }
        }
        Ok(Vocabulary::from_entries(entries))
    }

    /// SHA-256 of the vocabulary file contents, lowercase hex.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(self.to_text().as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Vocabulary::parse(&text)
    }
}

/// Builds the vocabulary from BPE-segmented sentences.
///
/// Tokens with `count >= min_count` are kept; indicator tokens (those seen
/// in the data plus `languages`) are always kept. Ids after the specials go
/// by descending count, ties broken lexicographically.
pub fn build_vocabulary<'a>(
    sentences: impl IntoIterator<Item = &'a [String]>,
    min_count: u64,
    languages: &[LanguageCode],
) -> Result<Vocabulary, SubwordError> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut any = false;
    for sent in sentences {
        for tok in sent {
            any = true;
            *counts.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(SubwordError::EmptyCorpus);
    }
    let forced: Vec<String> = languages.iter().map(LanguageCode::token).collect();
    let mut kept: Vec<(String, u64)> = counts
        .iter()
        .filter(|(t, &c)| !SPECIALS.contains(t) && (c >= min_count || is_language_token(t)))
        .map(|(t, &c)| (t.to_string(), c))
        .collect();
    for tok in forced {
        if !counts.contains_key(tok.as_str()) {
            kept.push((tok, 0));
        }
    }
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    let mut entries: Vec<(String, u64)> = SPECIALS.iter().map(|s| (s.to_string(), 0)).collect();
    entries.extend(kept);
    Ok(Vocabulary::from_entries(entries))
}

/// Joins subwords back into words, undoing the `@@` markers.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut continuing = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !continuing {
            out.push(' ');
        }
        match t.strip_suffix(MARKER) {
            Some(stem) => {
                out.push_str(stem);
                continuing = true;
            }
            None => {
                out.push_str(t);
                continuing = false;
            }
        }
    }
    out
}
