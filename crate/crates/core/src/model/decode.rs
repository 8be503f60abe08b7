//! Greedy and beam decoding over any step-wise scorer.

use serde::{Deserialize, Serialize};

use super::forward::{Encoded, Forward};
use crate::dataset::EOS;
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionHypothesis {
    /// Generated ids, BOS excluded; ends with EOS iff `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    /// Log-probability per generated token.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Anything that can extend a prefix by one token.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;

    /// Log-probabilities over the vocabulary for the token following
    /// `prev` (`None` at the first step), plus the successor state.
    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Self::State, Vec<f64>)>;

    fn eos(&self) -> usize {
        EOS
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Feeds back the highest-probability token (lowest id on ties) until EOS or
/// `max_len` generated tokens.
pub fn greedy<S: StepScorer>(scorer: &S, max_len: usize) -> Result<CaptionHypothesis> {
    let mut state = scorer.initial();
    let mut hyp = CaptionHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let (next, logp) = scorer.step(&state, hyp.tokens.last().copied())?;
        let tok = argmax(&logp);
        hyp.tokens.push(tok);
        hyp.log_prob += logp[tok];
        state = next;
        if tok == scorer.eos() {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search. Each step keeps the `beam` best extensions; those ending in
/// EOS retire to the finished pool and take a slot of that step's quota.
/// The result is the best finished or surviving hypothesis, by
/// per-token log-probability when `length_normalize` is set and by raw
/// log-probability otherwise.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<CaptionHypothesis> {
    if beam < 1 {
        return Err(Error::Config(format!(
            "beam width must be at least 1, got {beam}"
        )));
    }
    let empty = CaptionHypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut alive = vec![(empty, scorer.initial())];
    let mut finished: Vec<CaptionHypothesis> = Vec::new();

    for _ in 0..max_len {
        if alive.is_empty() {
            break;
        }
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut successors = Vec::with_capacity(alive.len());
        for (a, (hyp, state)) in alive.iter().enumerate() {
            let (next, logp) = scorer.step(state, hyp.tokens.last().copied())?;
            candidates.extend(
                logp.iter()
                    .enumerate()
                    .map(|(tok, lp)| (hyp.log_prob + lp, a, tok)),
            );
            successors.push(next);
        }
        // Stable: equal scores keep (hypothesis, token id) order.
        candidates.sort_by(|x, y| y.0.total_cmp(&x.0));

        let mut next_alive = Vec::with_capacity(beam);
        for &(score, a, tok) in candidates.iter().take(beam) {
            let mut tokens = alive[a].0.tokens.clone();
            tokens.push(tok);
            let done = tok == scorer.eos();
            let hyp = CaptionHypothesis {
                tokens,
                log_prob: score,
                finished: done,
            };
            if done {
                finished.push(hyp);
            } else {
                next_alive.push((hyp, successors[a].clone()));
            }
        }
        alive = next_alive;
    }

    let key = |h: &CaptionHypothesis| {
        if length_normalize {
            h.normalized_score()
        } else {
            h.log_prob
        }
    };
    finished
        .into_iter()
        .chain(alive.into_iter().map(|(h, _)| h))
        .fold(None::<CaptionHypothesis>, |best, h| match best {
            Some(b) if key(&b) >= key(&h) => Some(b),
            _ => Some(h),
        })
        .ok_or_else(|| Error::Contract("beam search with max_len 0 produced nothing".into()))
}

/// Adapts an encoded record to [`StepScorer`]; the decoder state lives on
/// the forward pass's graph.
pub struct ModelScorer<'a, 'g, 'm> {
    pub forward: &'a Forward<'g, 'm>,
    pub encoded: Encoded<'g>,
}

impl<'g> StepScorer for ModelScorer<'_, 'g, '_> {
    type State = (Var<'g>, Var<'g>);

    fn initial(&self) -> Self::State {
        (self.encoded.h0, self.encoded.c0)
    }

    fn step(&self, state: &Self::State, prev: Option<usize>) -> Result<(Self::State, Vec<f64>)> {
        let (h, c) = *state;
        let enc = &self.encoded;
        let (context, _) = self
            .forward
            .attention_context(h, enc.fused.memory, enc.memory_keys)?;
        let step = self.forward.decoder_step(prev, h, c, context)?;
        let scores = step.scores.to_vec();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        Ok(((step.h, step.c), scores.iter().map(|s| s - lse).collect()))
    }
}
