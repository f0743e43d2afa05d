//! Greedy and beam-search decoding.

use super::transformer::{encode, next_token_logprobs};
use super::{ModelError, ModelParameters};

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Generated tokens per hypothesis, the final `</s>` included. At the
    /// last step only `</s>` may be chosen.
    pub max_len: usize,
    pub eos_id: u32,
    /// Rank finished hypotheses by score per token instead of raw score.
    pub length_norm: bool,
}

impl DecodeConfig {
    pub fn new(beam: usize, max_len: usize, eos_id: u32) -> Self {
        DecodeConfig {
            beam,
            max_len,
            eos_id,
            length_norm: false,
        }
    }
}

/// A decoded continuation. `ids` excludes the prefix and ends in `</s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f64,
}

impl Hypothesis {
    /// Tokens without the trailing `</s>`.
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((_, rest)) => rest,
            None => &self.ids,
        }
    }

    fn rank_score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.score / self.ids.len().max(1) as f64
        } else {
            self.score
        }
    }
}

fn step_budget(params: &ModelParameters, prefix: &[u32], cfg: &DecodeConfig) -> Result<usize, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(ModelError::InvalidConfig("beam and max_len must be positive".into()));
    }
    if cfg.eos_id as usize >= params.config.vocab_size {
        return Err(ModelError::IdOutOfRange {
            id: cfg.eos_id,
            vocab_size: params.config.vocab_size,
        });
    }
    // the decoder input never exceeds the position table
    let room = params.config.max_positions.saturating_sub(prefix.len()) + 1;
    Ok(cfg.max_len.min(room))
}

/// Beam search from `prefix` (normally `[<tgt_lang>]`). Returns up to
/// `beam` finished hypotheses, best first.
///
/// Candidates are ranked by score, ties broken by hypothesis position then
/// token id, so results are fully deterministic.
pub fn beam_search_decode(
    params: &ModelParameters,
    src: &[u32],
    prefix: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    let steps = step_budget(params, prefix, cfg)?;
    let enc = encode(params, src)?;
    let mut alive = vec![Hypothesis {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..steps {
        let inputs: Vec<Vec<u32>> = alive
            .iter()
            .map(|h| prefix.iter().chain(&h.ids).copied().collect())
            .collect();
        let logprobs = next_token_logprobs(params, &enc, &inputs)?;
        let last = step + 1 == steps;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (hi, (h, lp)) in alive.iter().zip(&logprobs).enumerate() {
            if last {
                cands.push((h.score + lp[cfg.eos_id as usize], hi, cfg.eos_id));
            } else {
                cands.extend(lp.iter().enumerate().map(|(t, &l)| (h.score + l, hi, t as u32)));
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(cfg.beam);
        for &(score, hi, tok) in cands.iter().take(cfg.beam) {
            let mut ids = alive[hi].ids.clone();
            ids.push(tok);
            let h = Hypothesis { ids, score };
            if tok == cfg.eos_id {
                finished.push(h);
            } else {
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        // scores only fall, so nothing alive can overtake the best finished
        if !cfg.length_norm {
            let best_fin = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_fin >= alive[0].score {
                break;
            }
        }
    }
    finished.sort_by(|a, b| {
        b.rank_score(cfg.length_norm)
            .total_cmp(&a.rank_score(cfg.length_norm))
            .then_with(|| a.ids.cmp(&b.ids))
    });
    finished.truncate(cfg.beam);
    Ok(finished)
}

/// Arg-max decoding, lowest id on ties. Matches `beam = 1`.
pub fn greedy_decode(
    params: &ModelParameters,
    src: &[u32],
    prefix: &[u32],
    max_len: usize,
    eos_id: u32,
) -> Result<Hypothesis, ModelError> {
    let steps = step_budget(params, prefix, &DecodeConfig::new(1, max_len, eos_id))?;
    let enc = encode(params, src)?;
    let mut input = prefix.to_vec();
    let mut hyp = Hypothesis {
        ids: Vec::new(),
        score: 0.0,
    };
    for step in 0..steps {
        let lp = next_token_logprobs(params, &enc, std::slice::from_ref(&input))?.remove(0);
        let tok = if step + 1 == steps {
            eos_id
        } else {
            lp.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .unwrap_or(eos_id)
        };
        hyp.ids.push(tok);
        hyp.score += lp[tok as usize];
        if tok == eos_id {
            break;
        }
        input.push(tok);
    }
    Ok(hyp)
}
