//! Test-time inference: greedy decoding, beam search with N-best pruning by
//! a log-probability margin, and ensemble decoding by posterior averaging.
//!
//! Every entry point takes a slice of models: a single model is just an
//! ensemble of one. Members must share vocab size and decode cap; per step
//! the ensemble posterior is the arithmetic mean of the member softmax
//! outputs, and scores are log-probabilities under that averaged posterior.

use crate::error::{Error, Result};
use crate::model::{argmax_lowest, Features, Model, StepState};
use crate::tensor::softmax_fwd;
use crate::vocab::{TokenId, EOS};

/// Beam-search settings.
#[derive(Debug, Clone, Copy)]
pub struct BeamConfig {
    /// Beam width N.
    pub width: usize,
    /// Log-probability margin: a partial hypothesis whose score trails the
    /// best partial by strictly more than this is discarded. Exactly at the
    /// margin it is kept.
    pub prune_margin: f64,
    /// Decode-length cap T.
    pub max_len: usize,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 1 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.prune_margin > 0.0) {
            return Err(Error::Config("prune margin must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// A finished decode with its score.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Cumulative log-probability of the sequence.
    pub logprob: f64,
    pub token_logprobs: Vec<f64>,
}

impl Decoded {
    pub fn mean_token_logprob(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            0.0
        } else {
            self.logprob / self.token_logprobs.len() as f64
        }
    }
}

fn check_members(models: &[&Model]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Usage("no models given".into()))?;
    for m in &models[1..] {
        if m.cfg.vocab_size != first.cfg.vocab_size {
            return Err(Error::Usage(format!(
                "ensemble members disagree on vocab size ({} vs {})",
                m.cfg.vocab_size, first.cfg.vocab_size
            )));
        }
        if m.cfg.max_len != first.cfg.max_len {
            return Err(Error::Usage(format!(
                "ensemble members disagree on max length ({} vs {})",
                m.cfg.max_len, first.cfg.max_len
            )));
        }
    }
    Ok(())
}

fn begin_all(models: &[&Model], features: &Features) -> Result<Vec<StepState>> {
    models.iter().map(|m| m.begin(features)).collect()
}

/// Advance every member one step and average their posteriors.
/// `prev` is the previously emitted token; `None` means the first step,
/// where each member consumes its own architecture's first input.
fn step_all(
    models: &[&Model],
    states: &[StepState],
    prev: Option<TokenId>,
    features: &Features,
) -> Result<(Vec<f64>, Vec<StepState>)> {
    let vocab = models[0].cfg.vocab_size;
    let mut mean = vec![0.0; vocab];
    let mut next = Vec::with_capacity(models.len());
    for (m, st) in models.iter().zip(states.iter()) {
        let input = match prev {
            Some(tok) => crate::model::StepInput::Token(tok),
            None => m.first_input(features),
        };
        let (logits, new_state) = m.step(st, input, features)?;
        let post = softmax_fwd(&logits);
        for (acc, &p) in mean.iter_mut().zip(post.data()) {
            *acc += p;
        }
        next.push(new_state);
    }
    let k = models.len() as f64;
    for v in mean.iter_mut() {
        *v /= k;
    }
    Ok((mean, next))
}

/// Deterministic argmax decode: stops at EOS or at the models' decode cap.
/// Ties break to the lowest token id.
pub fn greedy_decode(models: &[&Model], features: &Features) -> Result<Decoded> {
    check_members(models)?;
    let max_len = models[0].cfg.max_len;
    let mut states = begin_all(models, features)?;
    let mut out = Decoded { tokens: Vec::new(), logprob: 0.0, token_logprobs: Vec::new() };
    for t in 0..max_len {
        let prev = if t == 0 { None } else { Some(out.tokens[t - 1]) };
        let (posterior, next) = step_all(models, &states, prev, features)?;
        let tok = argmax_lowest(&posterior);
        let lp = posterior[tok as usize].ln();
        out.tokens.push(tok);
        out.token_logprobs.push(lp);
        out.logprob += lp;
        states = next;
        if tok == EOS {
            break;
        }
    }
    Ok(out)
}

struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
    token_logprobs: Vec<f64>,
    states: Vec<StepState>,
}

/// Number of leading entries to keep from scores sorted descending, pruning
/// anything strictly more than `margin` below the best.
fn margin_cut(scores: &[f64], margin: f64) -> usize {
    if scores.is_empty() {
        return 0;
    }
    let best = scores[0];
    scores.iter().take_while(|&&s| best - s <= margin).count()
}

/// N-best beam search. Partial hypotheses compete by cumulative
/// log-probability; hypotheses emitting EOS (or alive when the length cap is
/// hit) move to the finished pool and compete by total log-probability.
/// Returns at most `width` finished sequences, best first.
pub fn beam_search(models: &[&Model], features: &Features, cfg: &BeamConfig) -> Result<Vec<Decoded>> {
    check_members(models)?;
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        token_logprobs: Vec::new(),
        states: begin_all(models, features)?,
    }];
    let mut finished: Vec<Decoded> = Vec::new();

    for t in 0..cfg.max_len {
        // Expand every live hypothesis over the whole vocabulary.
        let mut stepped: Vec<(Vec<f64>, Vec<StepState>)> = Vec::with_capacity(live.len());
        for hyp in &live {
            let prev = if t == 0 { None } else { Some(*hyp.tokens.last().unwrap()) };
            stepped.push(step_all(models, &hyp.states, prev, features)?);
        }
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            for (tok, &p) in stepped[parent].0.iter().enumerate() {
                candidates.push((parent, tok as TokenId, hyp.logprob + p.ln()));
            }
        }
        // N-best by score; deterministic tie-breaking by token id then parent.
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| a.1.cmp(&b.1)).then_with(|| a.0.cmp(&b.0))
        });
        candidates.truncate(cfg.width);
        let scores: Vec<f64> = candidates.iter().map(|c| c.2).collect();
        candidates.truncate(margin_cut(&scores, cfg.prune_margin));

        let mut next_live = Vec::with_capacity(candidates.len());
        for (parent, tok, score) in candidates {
            let hyp = &live[parent];
            let mut tokens = hyp.tokens.clone();
            tokens.push(tok);
            let mut token_logprobs = hyp.token_logprobs.clone();
            token_logprobs.push(score - hyp.logprob);
            if tok == EOS {
                finished.push(Decoded { tokens, logprob: score, token_logprobs });
            } else {
                next_live.push(Hypothesis {
                    tokens,
                    logprob: score,
                    token_logprobs,
                    states: stepped[parent].1.clone(),
                });
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }
    // Anything still alive at the cap counts as complete, without EOS.
    for hyp in live {
        finished.push(Decoded {
            tokens: hyp.tokens,
            logprob: hyp.logprob,
            token_logprobs: hyp.token_logprobs,
        });
    }
    finished.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)));
    finished.truncate(cfg.width);
    Ok(finished)
}

/// Arithmetic mean of member posteriors; exposed for diagnostics and tests.
pub fn average_posteriors(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty(), "no posteriors to average");
    let n = rows[0].len();
    let mut mean = vec![0.0; n];
    for row in rows {
        assert_eq!(row.len(), n, "posterior length mismatch");
        for (acc, &p) in mean.iter_mut().zip(row) {
            *acc += p;
        }
    }
    for v in mean.iter_mut() {
        *v /= rows.len() as f64;
    }
    mean
}
