//! Per-(pair, sentence) evidence scorer.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::diffmath::{lse, sigmoid, xavier_uniform, Prng, Tape, Tensor, Var};
use crate::error::Result;
use crate::params::param_group;

/// Default selection threshold on evidence probabilities.
pub const DEFAULT_EVI_THRESHOLD: f64 = 0.5;

param_group! {
    EviHeadParams {
        w_v => "w_v",
        b_v => "b_v",
    }
}

impl EviHeadParams {
    pub fn init(d: usize, rng: &mut Prng) -> Self {
        EviHeadParams { w_v: xavier_uniform(rng, &[d, d], d, d), b_v: Tensor::zeros(&[1]) }
    }
}

/// Evidence probabilities for one pair and the sentences selected from them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidencePrediction {
    pub probs: Vec<f64>,
    pub selected: BTreeSet<usize>,
}

impl EvidencePrediction {
    pub fn new(probs: Vec<f64>, threshold: f64) -> Self {
        let selected = predict_evidence(&probs, threshold);
        EvidencePrediction { probs, selected }
    }
}

/// Coordinatewise logsumexp over the rows of `h` in `span`.
pub fn sentence_embedding(span: Range<usize>, h: &Tensor) -> Vec<f64> {
    let d = h.dims2().1;
    (0..d).map(|j| lse(span.clone().map(|r| h.get2(r, j)))).collect()
}

/// `σ(sᵀ W_v c + b_v)`.
pub fn evidence_prob(s: &[f64], c: &[f64], p: &EviHeadParams) -> f64 {
    let mut x = p.b_v.data()[0];
    for (i, si) in s.iter().enumerate() {
        let wc: f64 = p.w_v.row(i).iter().zip(c).map(|(a, b)| a * b).sum();
        x += si * wc;
    }
    sigmoid(x)
}

fn bce(y: f64, p: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Summed BCE over sentences of every pair that has at least one positive
/// relation and non-empty gold evidence. Items are
/// `(probs, gold evidence, pair is positive)`.
pub fn evi_loss<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a BTreeSet<usize>, bool)>) -> f64 {
    pairs
        .into_iter()
        .filter(|(_, gold, positive)| *positive && !gold.is_empty())
        .map(|(probs, gold, _)| {
            probs
                .iter()
                .enumerate()
                .map(|(n, &p)| bce(if gold.contains(&n) { 1.0 } else { 0.0 }, p))
                .sum::<f64>()
        })
        .sum()
}

pub fn predict_evidence(probs: &[f64], threshold: f64) -> BTreeSet<usize> {
    probs.iter().enumerate().filter(|(_, &p)| p >= threshold).map(|(n, _)| n).collect()
}

/// Sentence embeddings `[N, d]` on the tape.
pub fn sentences_tape(tape: &mut Tape, h: Var, spans: &[Range<usize>]) -> Result<Var> {
    let mut rows = Vec::with_capacity(spans.len());
    for span in spans {
        let s = tape.slice(h, 0, span.start, span.end)?;
        rows.push(tape.logsumexp(s, 0)?);
    }
    tape.stack(&rows)
}

/// Evidence logits `[Q, N]` for context rows `c: [Q, d]` and sentences `s: [N, d]`.
pub fn logits_tape(tape: &mut Tape, p: &EviHeadParams<Var>, c: Var, s: Var) -> Result<Var> {
    let wt = tape.transpose(p.w_v)?;
    let cw = tape.matmul(c, wt)?;
    let st = tape.transpose(s)?;
    let y = tape.matmul(cw, st)?;
    tape.add(y, p.b_v)
}
