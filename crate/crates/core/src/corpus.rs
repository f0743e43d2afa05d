//! Parallel corpora, language indicator tokens and the directed training pool.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::seeding;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language code {0:?} (expected 2-3 lowercase ASCII letters)")]
    InvalidLanguage(String),
    #[error("{src} has {src_lines} lines but {tgt} has {tgt_lines}")]
    LineCountMismatch {
        src: PathBuf,
        tgt: PathBuf,
        src_lines: usize,
        tgt_lines: usize,
    },
    #[error("{path}:{line}: invalid UTF-8")]
    InvalidUtf8 { path: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("sentence pair has an empty side")]
    EmptySide,
    #[error("sentence contains an interior newline")]
    InteriorNewline,
    #[error("source already starts with language token {0}")]
    AlreadyTagged(String),
    #[error("pair direction {found} does not match corpus direction {expected}")]
    DirectionMismatch { expected: String, found: String },
    #[error("manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error("manifest line {line}: duplicate entry")]
    DuplicateEntry { line: usize },
    #[error("manifest line {line}: file {path} does not exist")]
    MissingFile { line: usize, path: PathBuf },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A language identifier such as `en` or `fra`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self, CorpusError> {
        // `pad` and `unk` would collide with the reserved vocabulary tokens
        let ok = (2..=3).contains(&code.len())
            && code.bytes().all(|b| b.is_ascii_lowercase())
            && !matches!(code, "pad" | "unk");
        if ok {
            Ok(LanguageCode(code.to_string()))
        } else {
            Err(CorpusError::InvalidLanguage(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The indicator token, e.g. `<en>`.
    pub fn token(&self) -> String {
        format!("<{}>", self.0)
    }

    /// Parses an indicator token back into its language.
    pub fn from_token(token: &str) -> Option<Self> {
        let inner = token.strip_prefix('<')?.strip_suffix('>')?;
        LanguageCode::new(inner).ok()
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageCode {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LanguageCode::new(s)
    }
}

/// True for tokens of the form `<xx>` / `<xxx>`.
pub fn is_language_token(token: &str) -> bool {
    LanguageCode::from_token(token).is_some()
}

/// Splits a line into words: NFC normalization, then maximal runs of
/// non-whitespace.
pub fn tokenize_words(line: &str) -> Vec<String> {
    let normalized: String = line.nfc().collect();
    normalized.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub src_lang: LanguageCode,
    pub tgt_lang: LanguageCode,
}

impl SentencePair {
    pub fn new(
        source: Vec<String>,
        target: Vec<String>,
        src_lang: LanguageCode,
        tgt_lang: LanguageCode,
    ) -> Result<Self, CorpusError> {
        if source.is_empty() || target.is_empty() {
            return Err(CorpusError::EmptySide);
        }
        if source.iter().chain(&target).any(|w| w.contains('\n')) {
            return Err(CorpusError::InteriorNewline);
        }
        Ok(SentencePair {
            source,
            target,
            src_lang,
            tgt_lang,
        })
    }

    /// Builds a pair from two raw lines.
    pub fn from_lines(
        source: &str,
        target: &str,
        src_lang: LanguageCode,
        tgt_lang: LanguageCode,
    ) -> Result<Self, CorpusError> {
        SentencePair::new(tokenize_words(source), tokenize_words(target), src_lang, tgt_lang)
    }

    pub fn swapped(self) -> SentencePair {
        SentencePair {
            source: self.target,
            target: self.source,
            src_lang: self.tgt_lang,
            tgt_lang: self.src_lang,
        }
    }

    pub fn is_tagged(&self) -> bool {
        self.source.first().is_some_and(|w| is_language_token(w))
    }

    pub fn source_line(&self) -> String {
        self.source.join(" ")
    }

    pub fn target_line(&self) -> String {
        self.target.join(" ")
    }
}

/// Prepends `<src_lang>` to the source and `<tgt_lang>` to the target.
pub fn inject_language_tokens(pair: SentencePair) -> Result<SentencePair, CorpusError> {
    if let Some(first) = pair.source.first().filter(|w| is_language_token(w)) {
        return Err(CorpusError::AlreadyTagged(first.clone()));
    }
    let SentencePair {
        mut source,
        mut target,
        src_lang,
        tgt_lang,
    } = pair;
    source.insert(0, src_lang.token());
    target.insert(0, tgt_lang.token());
    Ok(SentencePair {
        source,
        target,
        src_lang,
        tgt_lang,
    })
}

type RawPair = (Vec<String>, Vec<String>);

/// An immutable parallel corpus.
///
/// Storage is shared: the reversed and tagged variants produced by
/// [`ParallelCorpus::reversed`] and [`ParallelCorpus::tagged`] are views
/// over the same sentences, and pairs are materialized on access.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    data: Arc<Vec<RawPair>>,
    // languages of the stored orientation
    lang_a: LanguageCode,
    lang_b: LanguageCode,
    reversed: bool,
    tagged: bool,
    weight: f64,
}

impl ParallelCorpus {
    pub fn empty(src_lang: LanguageCode, tgt_lang: LanguageCode) -> Self {
        ParallelCorpus {
            data: Arc::new(Vec::new()),
            lang_a: src_lang,
            lang_b: tgt_lang,
            reversed: false,
            tagged: false,
            weight: 1.0,
        }
    }

    pub fn from_pairs(
        src_lang: LanguageCode,
        tgt_lang: LanguageCode,
        pairs: Vec<SentencePair>,
    ) -> Result<Self, CorpusError> {
        let mut data = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.src_lang != src_lang || p.tgt_lang != tgt_lang {
                return Err(CorpusError::DirectionMismatch {
                    expected: format!("{src_lang}-{tgt_lang}"),
                    found: format!("{}-{}", p.src_lang, p.tgt_lang),
                });
            }
            data.push((p.source, p.target));
        }
        Ok(ParallelCorpus {
            data: Arc::new(data),
            lang_a: src_lang,
            lang_b: tgt_lang,
            reversed: false,
            tagged: false,
            weight: 1.0,
        })
    }

    pub fn src_lang(&self) -> &LanguageCode {
        if self.reversed {
            &self.lang_b
        } else {
            &self.lang_a
        }
    }

    pub fn tgt_lang(&self) -> &LanguageCode {
        if self.reversed {
            &self.lang_a
        } else {
            &self.lang_b
        }
    }

    pub fn direction(&self) -> (LanguageCode, LanguageCode) {
        (self.src_lang().clone(), self.tgt_lang().clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when sources carry an indicator token, either through a tagged
    /// view or materialized in the stored sentences.
    pub fn is_tagged(&self) -> bool {
        self.tagged || (!self.is_empty() && self.pair(0).is_tagged())
    }

    /// Relative sampling weight attached by the manifest (default 1).
    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// Materializes pair `i` in the corpus direction.
    pub fn pair(&self, i: usize) -> SentencePair {
        let (a, b) = &self.data[i];
        let (mut source, mut target) = if self.reversed {
            (b.clone(), a.clone())
        } else {
            (a.clone(), b.clone())
        };
        if self.tagged {
            source.insert(0, self.src_lang().token());
            target.insert(0, self.tgt_lang().token());
        }
        SentencePair {
            source,
            target,
            src_lang: self.src_lang().clone(),
            tgt_lang: self.tgt_lang().clone(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SentencePair> + '_ {
        (0..self.len()).map(move |i| self.pair(i))
    }

    /// View of the opposite direction, sharing storage.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus {
            reversed: !self.reversed,
            ..self.clone()
        }
    }

    /// View with language indicator tokens injected on both sides.
    pub fn tagged(&self) -> Result<ParallelCorpus, CorpusError> {
        if self.tagged {
            return Err(CorpusError::AlreadyTagged(self.src_lang().token()));
        }
        let src_side_tagged = |(a, b): &RawPair| {
            let side = if self.reversed { b } else { a };
            side.first().filter(|w| is_language_token(w)).cloned()
        };
        if let Some(tok) = self.data.iter().find_map(src_side_tagged) {
            return Err(CorpusError::AlreadyTagged(tok));
        }
        Ok(ParallelCorpus {
            tagged: true,
            ..self.clone()
        })
    }

    /// New corpus holding the given pairs, in the given index order.
    pub fn select(&self, indices: &[usize]) -> ParallelCorpus {
        let data = indices.iter().map(|&i| self.data[i].clone()).collect();
        ParallelCorpus {
            data: Arc::new(data),
            ..self.clone()
        }
    }

    /// Concatenates same-direction corpora. The merged weight preserves the
    /// total sampling mass `sum(len * weight)`.
    pub fn concat(parts: &[ParallelCorpus]) -> Option<ParallelCorpus> {
        let first = parts.first()?;
        let direction = first.direction();
        let mut pairs = Vec::new();
        let mut mass = 0.0;
        for p in parts {
            debug_assert_eq!(p.direction(), direction);
            mass += p.len() as f64 * p.weight;
            pairs.extend(p.iter().map(|sp| (sp.source, sp.target)));
        }
        let n = pairs.len();
        Some(ParallelCorpus {
            data: Arc::new(pairs),
            lang_a: direction.0,
            lang_b: direction.1,
            reversed: false,
            tagged: false,
            weight: if n == 0 { first.weight } else { mass / n as f64 },
        })
    }
}

impl PartialEq for ParallelCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.direction() == other.direction()
            && self.len() == other.len()
            && self.iter().eq(other.iter())
    }
}

/// Lines that were dropped while loading, by 1-based line number.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub retained: usize,
    pub dropped_blank: Vec<usize>,
    pub dropped_one_sided: Vec<usize>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    let mut segments: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if segments.last().is_some_and(|s| s.is_empty()) {
        segments.pop();
    }
    segments
        .into_iter()
        .enumerate()
        .map(|(i, seg)| {
            let seg = seg.strip_suffix(b"\r").unwrap_or(seg);
            String::from_utf8(seg.to_vec()).map_err(|_| CorpusError::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })
        })
        .collect()
}

pub fn load_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    src: LanguageCode,
    tgt: LanguageCode,
) -> Result<ParallelCorpus, CorpusError> {
    load_parallel_corpus_with_report(src_path, tgt_path, src, tgt).map(|(c, _)| c)
}

/// Loads a two-file corpus; line `i` of each file forms pair `i`.
pub fn load_parallel_corpus_with_report(
    src_path: &Path,
    tgt_path: &Path,
    src: LanguageCode,
    tgt: LanguageCode,
) -> Result<(ParallelCorpus, LoadReport), CorpusError> {
    let (src_lines, tgt_lines) = rayon::join(|| read_lines(src_path), || read_lines(tgt_path));
    let (src_lines, tgt_lines) = (src_lines?, tgt_lines?);
    if src_lines.len() != tgt_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            src: src_path.to_path_buf(),
            tgt: tgt_path.to_path_buf(),
            src_lines: src_lines.len(),
            tgt_lines: tgt_lines.len(),
        });
    }
    let mut report = LoadReport::default();
    let mut data = Vec::with_capacity(src_lines.len());
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let (sw, tw) = (tokenize_words(s), tokenize_words(t));
        match (sw.is_empty(), tw.is_empty()) {
            (false, false) => data.push((sw, tw)),
            (true, true) => {
                log::info!("{}: dropping blank line {}", src_path.display(), i + 1);
                report.dropped_blank.push(i + 1);
            }
            _ => {
                log::warn!("{}: dropping one-sided blank line {}", src_path.display(), i + 1);
                report.dropped_one_sided.push(i + 1);
            }
        }
    }
    report.retained = data.len();
    log::info!(
        "loaded {} {src}-{tgt} pairs from {}",
        report.retained,
        src_path.display()
    );
    let corpus = ParallelCorpus {
        data: Arc::new(data),
        lang_a: src,
        lang_b: tgt,
        reversed: false,
        tagged: false,
        weight: 1.0,
    };
    Ok((corpus, report))
}

/// Writes the corpus in the two-file format (one sentence per line, LF).
pub fn write_parallel_corpus(
    corpus: &ParallelCorpus,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<(), CorpusError> {
    write_sides(corpus.iter(), src_path, tgt_path)
}

/// Writes any pair stream in the two-file format.
pub fn write_sides(
    pairs: impl Iterator<Item = SentencePair>,
    src_path: &Path,
    tgt_path: &Path,
) -> Result<(), CorpusError> {
    let open = |p: &Path| {
        fs::File::create(p)
            .map(BufWriter::new)
            .map_err(|e| CorpusError::io(p, e))
    };
    let (mut s, mut t) = (open(src_path)?, open(tgt_path)?);
    for pair in pairs {
        writeln!(s, "{}", pair.source_line()).map_err(|e| CorpusError::io(src_path, e))?;
        writeln!(t, "{}", pair.target_line()).map_err(|e| CorpusError::io(tgt_path, e))?;
    }
    s.flush().map_err(|e| CorpusError::io(src_path, e))?;
    t.flush().map_err(|e| CorpusError::io(tgt_path, e))
}

/// Uniform sample without replacement of `min(n, len)` pairs, kept in
/// original order.
pub fn subsample(corpus: &ParallelCorpus, n: usize, seed: u64) -> ParallelCorpus {
    if n >= corpus.len() {
        return corpus.clone();
    }
    let mut rng = seeding::rng(seed, seeding::stream::SUBSAMPLE, 0);
    let mut picked = index::sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    corpus.select(&picked)
}

/// Monolingual supplement text (one side only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonolingualText {
    pub lang: LanguageCode,
    pub sentences: Vec<Vec<String>>,
}

pub fn load_monolingual(
    path: &Path,
    lang: LanguageCode,
    limit: Option<usize>,
) -> Result<MonolingualText, CorpusError> {
    let mut sentences: Vec<Vec<String>> = read_lines(path)?
        .iter()
        .map(|l| tokenize_words(l))
        .filter(|w| !w.is_empty())
        .collect();
    if let Some(limit) = limit {
        sentences.truncate(limit);
    }
    Ok(MonolingualText { lang, sentences })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub src_lang: LanguageCode,
    pub tgt_lang: LanguageCode,
    pub src_path: PathBuf,
    /// `None` marks a monolingual supplement entry.
    pub tgt_path: Option<PathBuf>,
    pub weight: f64,
}

impl ManifestEntry {
    pub fn is_monolingual(&self) -> bool {
        self.tgt_path.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Parses manifest text. Relative paths resolve against `base_dir`.
    ///
    /// Line format: `src_lang TAB tgt_lang TAB src_path TAB tgt_path TAB weight`,
    /// with `tgt_path` empty or `-` for monolingual entries.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |reason: &str| CorpusError::MalformedManifest {
                line: line_no,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(malformed("expected 5 tab-separated fields"));
            }
            let src_lang = LanguageCode::new(fields[0]).map_err(|e| malformed(&e.to_string()))?;
            let tgt_lang = LanguageCode::new(fields[1]).map_err(|e| malformed(&e.to_string()))?;
            if fields[2].is_empty() {
                return Err(malformed("empty source path"));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_relative() {
                    base_dir.join(p)
                } else {
                    p
                }
            };
            let src_path = resolve(fields[2]);
            let tgt_path = match fields[3] {
                "" | "-" => None,
                p => Some(resolve(p)),
            };
            let weight: f64 = fields[4]
                .trim()
                .parse()
                .map_err(|_| malformed("weight is not a number"))?;
            if !(weight.is_finite() && weight > 0.0) {
                return Err(malformed("weight must be positive"));
            }
            let key = (
                src_lang.clone(),
                tgt_lang.clone(),
                src_path.clone(),
                tgt_path.clone(),
            );
            if !seen.insert(key) {
                return Err(CorpusError::DuplicateEntry { line: line_no });
            }
            for p in std::iter::once(&src_path).chain(tgt_path.as_ref()) {
                if !p.exists() {
                    return Err(CorpusError::MissingFile {
                        line: line_no,
                        path: p.clone(),
                    });
                }
            }
            entries.push(ManifestEntry {
                src_lang,
                tgt_lang,
                src_path,
                tgt_path,
                weight,
            });
        }
        Ok(CorpusManifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        CorpusManifest::parse(&text, base)
    }

    pub fn parallel_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_monolingual())
    }

    pub fn monolingual_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_monolingual())
    }

    /// Loads every parallel entry (concurrently), undirected and untagged.
    pub fn load_parallel(&self) -> Result<Vec<ParallelCorpus>, CorpusError> {
        let entries: Vec<&ManifestEntry> = self.parallel_entries().collect();
        entries
            .par_iter()
            .map(|e| {
                let tgt = e.tgt_path.as_deref().expect("parallel entry");
                load_parallel_corpus(&e.src_path, tgt, e.src_lang.clone(), e.tgt_lang.clone())
                    .map(|c| c.with_weight(e.weight))
            })
            .collect()
    }

    /// Loads monolingual supplements, truncated to `limit` sentences per
    /// language.
    pub fn load_monolingual(&self, limit: Option<usize>) -> Result<Vec<MonolingualText>, CorpusError> {
        let mut used: BTreeMap<LanguageCode, usize> = BTreeMap::new();
        let mut out = Vec::new();
        for e in self.monolingual_entries() {
            let already = used.get(&e.src_lang).copied().unwrap_or(0);
            let remaining = limit.map(|l| l.saturating_sub(already));
            if remaining == Some(0) {
                continue;
            }
            let text = load_monolingual(&e.src_path, e.src_lang.clone(), remaining)?;
            *used.entry(e.src_lang.clone()).or_default() += text.sentences.len();
            out.push(text);
        }
        Ok(out)
    }
}

/// Expands every parallel manifest entry into both directions, each tagged
/// with language indicator tokens.
pub fn build_training_pool(manifest: &CorpusManifest) -> Result<Vec<ParallelCorpus>, CorpusError> {
    directed_pool(&manifest.load_parallel()?)
}

/// Both directions of each undirected corpus, tagged.
pub fn directed_pool(undirected: &[ParallelCorpus]) -> Result<Vec<ParallelCorpus>, CorpusError> {
    let mut pool = Vec::with_capacity(undirected.len() * 2);
    for c in undirected {
        pool.push(c.tagged()?);
        pool.push(c.reversed().tagged()?);
    }
    Ok(pool)
}

/// Merges corpora that share a direction, keeping first-seen order.
pub fn merge_by_direction(pool: &[ParallelCorpus]) -> Vec<ParallelCorpus> {
    let mut groups: Vec<((LanguageCode, LanguageCode), Vec<ParallelCorpus>)> = Vec::new();
    for c in pool {
        let dir = c.direction();
        match groups.iter_mut().find(|(d, _)| *d == dir) {
            Some((_, g)) => g.push(c.clone()),
            None => groups.push((dir, vec![c.clone()])),
        }
    }
    groups
        .into_iter()
        .map(|(_, g)| {
            if g.len() == 1 {
                g.into_iter().next().unwrap()
            } else {
                ParallelCorpus::concat(&g).unwrap()
            }
        })
        .collect()
}
