//! Caption generation: greedy and beam search.
//!
//! Both strategies walk the same next-token distribution; the search
//! cores are generic over a `prefix -> log-probabilities` function so
//! hand-built distributions can exercise them without a model.
//! Tie-breaks are deterministic: lowest id for greedy, lexicographic
//! id order for beam.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{decode_forward, encode_memory, ModelConfig};
use crate::tensor::{Parameters, Tape, Tensor};
use crate::text::{BOS, EOS};

/// One beam-search candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Token prefix starting at BOS.
    pub ids: Vec<u32>,
    /// Sum of next-token log probabilities; non-increasing as the
    /// hypothesis grows.
    pub log_prob: f64,
    /// Set once the last id is EOS or the length bound is hit.
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score: log_prob / n^alpha over the n
    /// generated tokens (BOS excluded).
    pub fn score(&self, alpha: f64) -> f64 {
        let generated = (self.ids.len() - 1).max(1) as f64;
        self.log_prob / generated.powf(alpha)
    }
}

/// Runs the image encoder once and captures its output as a plain
/// tensor for reuse across decode steps.
pub fn encode_to_tensor(
    params: &Parameters,
    cfg: &ModelConfig,
    img: &crate::data::ImageTensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mem = encode_memory(&mut tape, params, cfg, img)?;
    Tensor::new(tape.shape(mem).to_vec(), tape.value(mem).to_vec())
}

/// Log-probabilities of the next token after `prefix`.
pub fn next_log_probs(
    params: &Parameters,
    cfg: &ModelConfig,
    memory: &Tensor,
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mem = tape.leaf(memory)?;
    let logits = decode_forward(&mut tape, params, cfg, mem, prefix)?;
    let v = cfg.vocab_size;
    let last = &tape.value(logits)[(prefix.len() - 1) * v..];
    Ok(log_softmax(last))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// Greedy search over any next-token distribution: starting at BOS,
/// append the argmax (ties to the lowest id) until EOS or `max_len`
/// total tokens.
pub fn greedy_with(
    next: &mut dyn FnMut(&[u32]) -> Result<Vec<f64>>,
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "decode length bound must be at least 2, got {max_len}"
        )));
    }
    let mut ids = vec![BOS];
    while ids.len() < max_len {
        let lp = next(&ids)?;
        let mut best = 0usize;
        for (tok, &p) in lp.iter().enumerate() {
            if p > lp[best] {
                best = tok;
            }
        }
        ids.push(best as u32);
        if best as u32 == EOS {
            break;
        }
    }
    Ok(ids)
}

/// Beam search over any next-token distribution.
///
/// Keeps the `beam` best candidates per step by raw log probability
/// (ties to the lexicographically smaller sequence); candidates finish
/// on EOS or at `max_len` tokens, and the winner maximizes the
/// length-normalized score. `beam` of 1 reduces to greedy search; a
/// beam of at least vocab^max_len makes the search exhaustive.
pub fn beam_with(
    next: &mut dyn FnMut(&[u32]) -> Result<Vec<f64>>,
    vocab: usize,
    max_len: usize,
    beam: usize,
    alpha: f64,
) -> Result<Vec<u32>> {
    if beam == 0 {
        return Err(Error::InvalidArgument(
            "beam width must be at least 1".into(),
        ));
    }
    if max_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "decode length bound must be at least 2, got {max_len}"
        )));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "length-normalization exponent must be finite and >= 0, got {alpha}"
        )));
    }
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    while !live.is_empty() {
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for hyp in &live {
            let lp = next(&hyp.ids)?;
            if lp.len() != vocab {
                return Err(Error::InvalidArgument(format!(
                    "distribution returned {} entries for vocab {vocab}",
                    lp.len()
                )));
            }
            for tok in 0..vocab as u32 {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                let finished = tok == EOS || ids.len() == max_len;
                candidates.push(Hypothesis {
                    ids,
                    log_prob: hyp.log_prob + lp[tok as usize],
                    finished,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(beam);
        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    let best = finished
        .into_iter()
        .max_by(|a, b| {
            a.score(alpha)
                .partial_cmp(&b.score(alpha))
                .unwrap_or(Ordering::Equal)
                .then_with(|| b.ids.cmp(&a.ids))
        })
        .expect("beam search always finishes at least one hypothesis");
    Ok(best.ids)
}

/// Greedy caption for an encoded image.
pub fn greedy_decode(params: &Parameters, cfg: &ModelConfig, memory: &Tensor) -> Result<Vec<u32>> {
    greedy_with(
        &mut |prefix: &[u32]| next_log_probs(params, cfg, memory, prefix),
        cfg.max_caption_len,
    )
}

/// Beam-searched caption for an encoded image.
pub fn beam_decode(
    params: &Parameters,
    cfg: &ModelConfig,
    memory: &Tensor,
    beam: usize,
    alpha: f64,
) -> Result<Vec<u32>> {
    beam_with(
        &mut |prefix: &[u32]| next_log_probs(params, cfg, memory, prefix),
        cfg.vocab_size,
        cfg.max_caption_len,
        beam,
        alpha,
    )
}
