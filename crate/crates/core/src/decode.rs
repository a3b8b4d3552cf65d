//! Greedy and beam-search decoding over any next-token distribution.

use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Model};
use crate::params::ParamStore;
use crate::tape::{AttnMask, Tape};
use crate::tensor::Tensor;
use crate::text::{PAD, START};

/// Next-token log-probabilities given the tokens produced so far.
pub trait StepScorer {
    /// `prefix` excludes the start token. Entries equal to `-inf` are never
    /// chosen.
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Bounds on the number of generated tokens, END excluded.
    pub min_len: usize,
    pub max_len: usize,
    pub end: u32,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities including the closing END.
    pub log_prob: f64,
}

impl Hypothesis {
    /// Mean log-probability per emitted token (END counted).
    pub fn normalized(&self) -> f64 {
        self.log_prob / (self.tokens.len() + 1) as f64
    }
}

fn end_score(lp: &[f64], end: u32) -> Result<f64> {
    lp.get(end as usize)
        .copied()
        .ok_or_else(|| Error::Contract(format!("end token {end} outside a distribution of {}", lp.len())))
}

fn argmax_allowed(lp: &[f64], skip: Option<u32>) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (t, &v) in lp.iter().enumerate() {
        let t = t as u32;
        if Some(t) == skip || v == f64::NEG_INFINITY || v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
}

/// Argmax decoding, lowest id on ties.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    loop {
        let lp = scorer.log_probs(&tokens)?;
        if tokens.len() == cfg.max_len {
            log_prob += end_score(&lp, cfg.end)?;
            return Ok(Hypothesis { tokens, log_prob });
        }
        let skip = (tokens.len() < cfg.min_len).then_some(cfg.end);
        let t = argmax_allowed(&lp, skip).ok_or_else(|| Error::Contract("no token has finite probability".into()))?;
        log_prob += lp[t as usize];
        if t == cfg.end {
            return Ok(Hypothesis { tokens, log_prob });
        }
        tokens.push(t);
    }
}

/// Beam search returning the finished hypothesis with the best
/// length-normalized log-probability. A beam of one is greedy decoding.
///
/// Every live hypothesis is also scored as finished (with END appended)
/// once it reaches `min_len`; the `beam` best non-END expansions stay
/// live. Search ends when no live hypothesis can still beat the best
/// finished one: appending tokens never raises the cumulative
/// log-probability, so a live score `s` is bounded by `s / (max_len + 1)`.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &mut S, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    if cfg.beam == 1 {
        return greedy(scorer, cfg);
    }
    let bound = |h: &Hypothesis| h.log_prob / (cfg.max_len + 1) as f64;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut best: Option<Hypothesis> = None;
    while !live.is_empty() {
        let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let lp = scorer.log_probs(&hyp.tokens)?;
            if hyp.tokens.len() >= cfg.min_len {
                let done = Hypothesis {
                    tokens: hyp.tokens.clone(),
                    log_prob: hyp.log_prob + end_score(&lp, cfg.end)?,
                };
                if best.as_ref().is_none_or(|b| done.normalized() > b.normalized()) {
                    best = Some(done);
                }
            }
            if hyp.tokens.len() == cfg.max_len {
                continue;
            }
            for (t, &v) in lp.iter().enumerate() {
                let t = t as u32;
                if t != cfg.end && v != f64::NEG_INFINITY && !v.is_nan() {
                    candidates.push((hyp.log_prob + v, h, t));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        live = candidates
            .iter()
            .take(cfg.beam)
            .map(|&(log_prob, h, t)| {
                let mut tokens = live[h].tokens.clone();
                tokens.push(t);
                Hypothesis { tokens, log_prob }
            })
            .filter(|h| best.as_ref().is_none_or(|b| bound(h) > b.normalized()))
            .collect();
    }
    best.ok_or_else(|| Error::Contract("beam search finished no hypothesis".into()))
}

/// Scores summary prefixes with a trained decoder over a fixed encoding.
pub struct ModelScorer<'a> {
    model: &'a Model,
    store: &'a ParamStore<f32>,
    memory: Tensor<f32>,
    mask: AttnMask,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore<f32>, tape: &Tape<f32>, enc: &EncoderOutput) -> Result<Self> {
        Ok(ModelScorer {
            model,
            store,
            memory: tape.to_tensor(enc.hidden)?,
            mask: enc.mask(),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(START);
        ids.extend_from_slice(prefix);
        let mut tape = Tape::new();
        let memory = tape.constant(&self.memory);
        let states = self
            .model
            .decoder_states(&mut tape, self.store, memory, &self.mask, &ids)?;
        let last = tape.slice_rows(states, ids.len() - 1, 1)?;
        let logits = self.model.vocab_logits(&mut tape, self.store, last)?;
        let mut lp = log_softmax(tape.value(logits));
        lp[PAD as usize] = f64::NEG_INFINITY;
        lp[START as usize] = f64::NEG_INFINITY;
        Ok(lp)
    }
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = mx + logits.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}
