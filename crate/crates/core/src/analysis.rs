//! Embedding-space measurements and BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::LanguageCode;
use crate::model::ModelParameters;
use crate::ras::{restrict_to_top_k, BilingualDictionary};
use crate::trainer::Tokenizer;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("empty word")]
    EmptyWord,
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("vectors of different dimension ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("no dictionary pair has two nonzero embeddings")]
    NoAlignablePairs,
    #[error("need at least {need} vectors, got {got}")]
    TooFewVectors { need: usize, got: usize },
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("no sentences to score")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordEmbedding {
    pub word: String,
    pub language: LanguageCode,
    pub vector: Vec<f64>,
}

/// Sum of the embedding rows of the word's subwords (unknown pieces
/// contribute the `<unk>` row).
pub fn word_embedding(
    params: &ModelParameters,
    tokenizer: &Tokenizer,
    word: &str,
    lang: &LanguageCode,
) -> Result<WordEmbedding, AnalysisError> {
    if word.is_empty() {
        return Err(AnalysisError::EmptyWord);
    }
    let mut vector = vec![0.0; params.config.model_dim];
    for id in tokenizer.encode_words(&[word]) {
        for (v, e) in vector.iter_mut().zip(params.embedding_row(id)) {
            *v += e;
        }
    }
    Ok(WordEmbedding {
        word: word.to_string(),
        language: lang.clone(),
        vector,
    })
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AnalysisError> {
    if u.len() != v.len() {
        return Err(AnalysisError::DimensionMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub pair: (LanguageCode, LanguageCode),
    /// `(source word, target word, cosine)` in dictionary order.
    pub words: Vec<(String, String, f64)>,
    pub average: f64,
}

impl SimilarityReport {
    pub fn count(&self) -> usize {
        self.words.len()
    }

    /// `src TAB tgt TAB cosine` lines, then `AVERAGE TAB value`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (a, b, c) in &self.words {
            let _ = writeln!(s, "{a}\t{b}\t{c}");
        }
        let _ = writeln!(s, "AVERAGE\t{}", self.average);
        s
    }
}

/// Mean cosine between each dictionary word and its first candidate, over
/// the first `top_k` entries. Pairs where either side embeds to zero are
/// skipped.
pub fn avg_aligned_cosine(
    params: &ModelParameters,
    tokenizer: &Tokenizer,
    dict: &BilingualDictionary,
    top_k: usize,
) -> Result<SimilarityReport, AnalysisError> {
    let dict = restrict_to_top_k(dict, top_k);
    let mut words = Vec::new();
    for (w, cands) in dict.entries() {
        let Some(c) = cands.first() else { continue };
        let eu = word_embedding(params, tokenizer, w, &dict.src_lang)?;
        let ev = word_embedding(params, tokenizer, c, &dict.tgt_lang)?;
        match cosine(&eu.vector, &ev.vector) {
            Ok(cos) => words.push((w.clone(), c.clone(), cos)),
            Err(AnalysisError::ZeroVector) => continue,
            Err(e) => return Err(e),
        }
    }
    if words.is_empty() {
        return Err(AnalysisError::NoAlignablePairs);
    }
    let average = words.iter().map(|w| w.2).sum::<f64>() / words.len() as f64;
    Ok(SimilarityReport {
        pair: (dict.src_lang.clone(), dict.tgt_lang.clone()),
        words,
        average,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// Projected coordinates, one row per input vector.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (non-increasing).
    pub explained_variance: Vec<f64>,
    /// Trace of the covariance.
    pub total_variance: f64,
    /// Set when the data has rank below the requested dimensions; the
    /// trailing components then carry zero variance.
    pub degenerate: bool,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major
/// `n x n`). Returns eigenvalues and eigenvectors (as columns of the second
/// matrix, row-major).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Projects mean-centered vectors onto their top `dims` principal
/// components. Each component is signed so that its largest-magnitude
/// coordinate is positive.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize) -> Result<PcaProjection, AnalysisError> {
    if vectors.len() < dims + 1 {
        return Err(AnalysisError::TooFewVectors {
            need: dims + 1,
            got: vectors.len(),
        });
    }
    let d = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != d) {
        return Err(AnalysisError::DimensionMismatch(d, bad.len()));
    }
    if dims > d {
        return Err(AnalysisError::DimensionMismatch(dims, d));
    }
    let n = vectors.len();
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (vals, vecs) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let mut components = Vec::with_capacity(dims);
    let mut explained_variance = Vec::with_capacity(dims);
    for &k in order.iter().take(dims) {
        let mut c: Vec<f64> = (0..d).map(|i| vecs[i * d + k]).collect();
        let lead = c
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, &x)| if x.abs() > best.1.abs() + 1e-12 { (i, x) } else { best })
            .0;
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
        explained_variance.push(vals[k].max(0.0));
    }
    let tol = 1e-10 * total_variance.max(1e-300);
    let degenerate = total_variance == 0.0 || explained_variance.iter().any(|&ev| ev <= tol);
    if degenerate {
        for ev in explained_variance.iter_mut().filter(|ev| **ev <= tol) {
            *ev = 0.0;
        }
        log::warn!("PCA input has rank below {dims}");
    }
    let coords = centered
        .iter()
        .map(|row| components.iter().map(|c| row.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect();
    Ok(PcaProjection {
        coords,
        components,
        explained_variance,
        total_variance,
        degenerate,
    })
}

/// Plot-ready PCA output: a comment header with explained variances, then
/// `word TAB lang TAB x TAB y ...` per point.
pub fn pca_report(embeddings: &[WordEmbedding], dims: usize) -> Result<(PcaProjection, String), AnalysisError> {
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let proj = pca_project(&vectors, dims)?;
    let ev: Vec<String> = proj.explained_variance.iter().map(f64::to_string).collect();
    let mut s = format!("# explained_variance\t{}\n", ev.join("\t"));
    if proj.degenerate {
        s.push_str("# degenerate\n");
    }
    for (e, c) in embeddings.iter().zip(&proj.coords) {
        let cs: Vec<String> = c.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{}\t{}\t{}", e.word, e.language, cs.join("\t"));
    }
    Ok((proj, s))
}

/// Corpus BLEU with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU over whitespace tokens. Without `smooth`, any zero
/// precision gives 0; with it, orders two and up use add-one counts.
pub fn bleu_detailed<S: AsRef<str>>(
    hyps: &[Vec<S>],
    refs: &[Vec<S>],
    max_n: usize,
    smooth: bool,
) -> Result<BleuScore, AnalysisError> {
    if hyps.len() != refs.len() {
        return Err(AnalysisError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() || max_n == 0 {
        return Err(AnalysisError::EmptyInput);
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            if smooth && i > 0 {
                (matched[i] + 1) as f64 / (total[i] + 1) as f64
            } else if total[i] == 0 {
                0.0
            } else {
                matched[i] as f64 / total[i] as f64
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<f64, AnalysisError> {
    bleu_detailed(hyps, refs, max_n, false).map(|b| b.score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParameters};
    use crate::subword::{BpeModel, Vocabulary};
    use nalgebra::{DMatrix, SymmetricEigen};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn lang(s: &str) -> LanguageCode {
        LanguageCode::new(s).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// Vocabulary: specials, then a b c x y z a@@ (ids 4..=10).
    fn toy() -> (Tokenizer, ModelParameters) {
        let mut text = String::from("<pad>\t0\n<s>\t0\n</s>\t0\n<unk>\t0\n");
        for t in ["a", "b", "c", "x", "y", "z", "a@@"] {
            text.push_str(&format!("{t}\t5\n"));
        }
        let vocab = Vocabulary::parse(&text).unwrap();
        let tok = Tokenizer::new(BpeModel::new(vec![]), vocab);
        let cfg = ModelConfig {
            model_dim: 2,
            heads: 1,
            ..ModelConfig::tiny(11)
        };
        let mut p = ModelParameters::zeros(&cfg).unwrap();
        let rows: [[f64; 2]; 11] = [
            [0.0, 0.0],
            [0.0, 0.0],
            [0.0, 0.0],
            [0.5, 0.5],
            [1.0, 0.0],
            [0.0, 2.0],
            [3.0, 4.0],
            [1.0, 1.0],
            [0.0, -1.0],
            [0.0, 0.0],
            [0.25, -0.75],
        ];
        p.set_tensor("embed", &rows.concat()).unwrap();
        (tok, p)
    }

    fn dict(pairs: &[(&str, &str)]) -> BilingualDictionary {
        let mut d = BilingualDictionary::new(lang("la"), lang("lb"));
        for (a, b) in pairs {
            d.insert(a, b);
        }
        d
    }

    #[test]
    fn embedding_of_single_and_split_words() {
        let (tok, p) = toy();
        assert_eq!(word_embedding(&p, &tok, "b", &lang("la")).unwrap().vector, vec![0.0, 2.0]);
        // "ab" -> a@@ + b
        let e = word_embedding(&p, &tok, "ab", &lang("la")).unwrap();
        assert!((e.vector[0] - 0.25).abs() < 1e-12 && (e.vector[1] - 1.25).abs() < 1e-12);
        // unknown pieces add the <unk> row
        assert_eq!(word_embedding(&p, &tok, "q", &lang("la")).unwrap().vector, vec![0.5, 0.5]);
        assert_eq!(word_embedding(&p, &tok, "", &lang("la")), Err(AnalysisError::EmptyWord));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[3.0, 1.0], &[3.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.707_106_78).abs() < 1e-8);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(AnalysisError::ZeroVector));
        assert!(matches!(cosine(&[1.0], &[1.0, 1.0]), Err(AnalysisError::DimensionMismatch(..))));
    }

    #[test]
    fn aligned_cosine_hand_computed() {
        let (tok, p) = toy();
        // a=(1,0) x=(1,1); b=(0,2) y=(0,-1); c=(3,4) x=(1,1); z is zero and skipped
        let d = dict(&[("a", "x"), ("b", "y"), ("c", "x"), ("a", "z"), ("b", "z")]);
        let r = avg_aligned_cosine(&p, &tok, &d, 1000).unwrap();
        let want = [0.5f64.sqrt(), -1.0, 7.0 / (5.0 * 2f64.sqrt())];
        assert_eq!(r.count(), 3);
        for (got, w) in r.words.iter().zip(want) {
            assert!((got.2 - w).abs() < 1e-12);
        }
        assert!((r.average - want.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(r.to_text().ends_with(&format!("AVERAGE\t{}\n", r.average)));
        assert!(r.to_text().starts_with("a\tx\t0.70710678"));
        // restriction to the first entry
        assert_eq!(avg_aligned_cosine(&p, &tok, &d, 1).unwrap().count(), 1);
    }

    #[test]
    fn aligned_cosine_edge_cases() {
        let (tok, mut p) = toy();
        let empty = dict(&[]);
        assert_eq!(avg_aligned_cosine(&p, &tok, &empty, 1000), Err(AnalysisError::NoAlignablePairs));
        // identical rows for every aligned pair
        let e = p.tensor("embed").unwrap().to_vec();
        let mut e2 = e.clone();
        e2[7 * 2..8 * 2].copy_from_slice(&e[4 * 2..5 * 2]);
        e2[8 * 2..9 * 2].copy_from_slice(&e[5 * 2..6 * 2]);
        p.set_tensor("embed", &e2).unwrap();
        let r = avg_aligned_cosine(&p, &tok, &dict(&[("a", "x"), ("b", "y")]), 10).unwrap();
        assert!((r.average - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn aligned_cosine_is_rotation_invariant(angle in 0.0f64..6.28, seed in 0u64..1000) {
            let (tok, mut p) = toy();
            let mut rng = crate::seeding::rng(seed, 1, 0);
            let e: Vec<f64> = (0..22).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.set_tensor("embed", &e).unwrap();
            let d = dict(&[("a", "x"), ("b", "y"), ("c", "z"), ("ab", "x")]);
            let before = avg_aligned_cosine(&p, &tok, &d, 1000).unwrap().average;
            let (s, c) = angle.sin_cos();
            let rotated: Vec<f64> = e.chunks(2).flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1]]).collect();
            p.set_tensor("embed", &rotated).unwrap();
            let after = avg_aligned_cosine(&p, &tok, &d, 1000).unwrap().average;
            prop_assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn pca_of_a_line() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = pca_project(&pts, 2).unwrap();
        let s5 = 5f64.sqrt();
        assert!((p.components[0][0] - 1.0 / s5).abs() < 1e-10);
        assert!((p.components[0][1] - 2.0 / s5).abs() < 1e-10);
        assert_eq!(p.explained_variance[1], 0.0);
        assert!(p.degenerate);
        assert!((p.explained_variance[0] - p.total_variance).abs() < 1e-10);
    }

    #[test]
    fn pca_of_identical_points() {
        let pts = vec![vec![1.0, 2.0, 3.0]; 4];
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.explained_variance, vec![0.0, 0.0]);
        assert!(p.coords.iter().flatten().all(|&x| x == 0.0));
        assert!(matches!(pca_project(&pts[..2], 2), Err(AnalysisError::TooFewVectors { .. })));
    }

    #[test]
    fn pca_matches_dense_eigensolver() {
        let mut rng = crate::seeding::rng(3, 1, 1);
        let pts: Vec<Vec<f64>> = (0..10).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let p = pca_project(&pts, 2).unwrap();
        // oracle: covariance via nalgebra, then its symmetric eigensolver
        let m = DMatrix::from_fn(10, 5, |i, j| pts[i][j]);
        let mean = m.row_mean();
        let centered = DMatrix::from_fn(10, 5, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / 9.0;
        let eig = SymmetricEigen::new(cov.clone());
        let mut idx: Vec<usize> = (0..5).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for k in 0..2 {
            assert!((p.explained_variance[k] - eig.eigenvalues[idx[k]]).abs() < 1e-8);
            let col = eig.eigenvectors.column(idx[k]);
            let lead = (0..5).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap();
            let sign = col[lead].signum();
            for i in 0..5 {
                assert!((p.components[k][i] - sign * col[i]).abs() < 1e-8);
            }
        }
        assert!((p.total_variance - cov.trace()).abs() < 1e-10);
        assert!(!p.degenerate);
    }

    proptest! {
        #[test]
        fn pca_invariants(seed in 0u64..10_000, n in 4usize..15, d in 2usize..7) {
            let mut rng = crate::seeding::rng(seed, 2, 0);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let p = pca_project(&pts, 2).unwrap();
            prop_assert!(p.explained_variance[0] >= p.explained_variance[1]);
            prop_assert!(p.explained_variance.iter().sum::<f64>() <= p.total_variance * (1.0 + 1e-12));
            let dot: f64 = p.components[0].iter().zip(&p.components[1]).map(|(a, b)| a * b).sum();
            prop_assert!(dot.abs() < 1e-8);
            for c in &p.components {
                prop_assert!((norm(c) - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pca_report_format() {
        let embs: Vec<WordEmbedding> = (0..4)
            .map(|i| WordEmbedding {
                word: format!("w{i}"),
                language: lang("la"),
                vector: vec![i as f64, (i * i) as f64, 1.0],
            })
            .collect();
        let (_, text) = pca_report(&embs, 2).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# explained_variance\t"));
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("w0\tla\t"));
        assert_eq!(lines[1].split('\t').count(), 4);
    }

    #[test]
    fn bleu_examples() {
        let h = vec![toks("the cat sat on the mat")];
        assert!((bleu(&h, &h, 4).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bleu(&[toks("dog runs")], &[toks("the cat sat")], 4).unwrap(), 0.0);
        let b = bleu_detailed(&[toks("a a a")], &[toks("a a")], 1, false).unwrap();
        assert!((b.score - 2.0 / 3.0).abs() < 1e-6);
        assert_eq!(b.brevity_penalty, 1.0);
        assert!(matches!(bleu(&h, &[], 4), Err(AnalysisError::LengthMismatch { .. })));
        let empty: Vec<Vec<String>> = vec![];
        assert_eq!(bleu(&empty, &empty, 4), Err(AnalysisError::EmptyInput));
    }

    #[test]
    fn bleu_brevity_and_smoothing() {
        // c=2 < r=4: BP = e^(1-2)
        let b = bleu_detailed(&[toks("a b")], &[toks("a b c d")], 1, false).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.score - (-1.0f64).exp()).abs() < 1e-15);
        // no bigram match: 0 unless smoothed
        let h = [toks("a b c")];
        let r = [toks("a c b")];
        assert_eq!(bleu(&h, &r, 2).unwrap(), 0.0);
        let s = bleu_detailed(&h, &r, 2, true).unwrap();
        assert!((s.precisions[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.score - (1.0f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bleu_is_order_invariant_and_one_iff_equal(
            sents in proptest::collection::vec(proptest::collection::vec(0u8..5, 4..8), 1..6),
            flip in 0usize..6,
        ) {
            let refs: Vec<Vec<String>> = sents.iter().map(|s| s.iter().map(|t| format!("t{t}")).collect()).collect();
            let mut hyps = refs.clone();
            prop_assert_eq!(bleu(&hyps, &refs, 4).unwrap(), 1.0);
            let i = flip % hyps.len();
            hyps[i][0] = "other".into();
            let s = bleu(&hyps, &refs, 4).unwrap();
            prop_assert!(s < 1.0);
            let (mut hr, mut rr) = (hyps.clone(), refs.clone());
            hr.reverse();
            rr.reverse();
            prop_assert!((bleu(&hr, &rr, 4).unwrap() - s).abs() < 1e-12);
        }
    }
}
