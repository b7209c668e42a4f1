//! Context-aware bilinear relation classifier with a learned threshold
//! class and the adaptive-thresholding loss.

use std::collections::BTreeSet;

use crate::diffmath::{lse, xavier_uniform, Prng, Tape, Tensor, Var};
use crate::error::Result;
use crate::params::param_group;

param_group! {
    /// `w_r` holds one `d × d` form per class; the last class is the threshold.
    RelHeadParams {
        w_h => "w_h",
        w_t => "w_t",
        w_ch => "w_ch",
        w_ct => "w_ct",
        w_r => "w_r",
        b_r => "b_r",
    }
}

impl RelHeadParams {
    pub fn init(d: usize, n_relations: usize, rng: &mut Prng) -> Self {
        let c = n_relations + 1;
        RelHeadParams {
            w_h: xavier_uniform(rng, &[d, d], d, d),
            w_t: xavier_uniform(rng, &[d, d], d, d),
            w_ch: xavier_uniform(rng, &[d, d], d, d),
            w_ct: xavier_uniform(rng, &[d, d], d, d),
            w_r: xavier_uniform(rng, &[c, d, d], d, d),
            b_r: Tensor::zeros(&[c]),
        }
    }

    pub fn n_relations(&self) -> usize {
        self.b_r.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.w_h.shape()[0]
    }
}

/// Class logits (threshold last) and threshold-relative scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl PairScores {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let th = *logits.last().expect("at least the threshold class");
        let scores = logits[..logits.len() - 1].iter().map(|y| y - th).collect();
        PairScores { logits, scores }
    }
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0]).map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `z_h = tanh(W_h e_h + W_ch c)`, `z_t = tanh(W_t e_t + W_ct c)`.
pub fn pair_repr(e_h: &[f64], e_t: &[f64], c: &[f64], p: &RelHeadParams) -> (Vec<f64>, Vec<f64>) {
    let side = |w: &Tensor, wc: &Tensor, e: &[f64]| -> Vec<f64> {
        matvec(w, e).iter().zip(matvec(wc, c)).map(|(a, b)| (a + b).tanh()).collect()
    };
    (side(&p.w_h, &p.w_ch, e_h), side(&p.w_t, &p.w_ct, e_t))
}

/// `y_c = z_hᵀ W_c z_t + b_c` for every class.
pub fn relation_logits(z_h: &[f64], z_t: &[f64], p: &RelHeadParams) -> PairScores {
    let d = z_h.len();
    let n_classes = p.b_r.len();
    let w = p.w_r.data();
    let logits = (0..n_classes)
        .map(|c| {
            let form = &w[c * d * d..(c + 1) * d * d];
            let mut y = p.b_r.data()[c];
            for i in 0..d {
                let row: f64 = form[i * d..(i + 1) * d].iter().zip(z_t).map(|(a, b)| a * b).sum();
                y += z_h[i] * row;
            }
            y
        })
        .collect();
    PairScores::from_logits(logits)
}

/// Adaptive-thresholding loss for one pair; `logits` ends with the threshold
/// class and `positives` indexes relations.
pub fn atl_loss(logits: &[f64], positives: &BTreeSet<usize>) -> f64 {
    let th = logits.len() - 1;
    let y_th = logits[th];
    let z_pos = lse(positives.iter().map(|&r| logits[r]).chain([y_th]));
    let term1: f64 = positives.iter().map(|&r| z_pos - logits[r]).sum();
    let z_neg = lse((0..th).filter(|r| !positives.contains(r)).map(|r| logits[r]).chain([y_th]));
    term1 + z_neg - y_th
}

/// Relations scoring strictly above the threshold; empty means no relation.
pub fn predict(scores: &[f64]) -> Vec<usize> {
    scores.iter().enumerate().filter(|(_, &s)| s > 0.0).map(|(r, _)| r).collect()
}

/// Class logits `[P, |R|+1]` for stacked head, tail and context rows.
pub fn logits_tape(tape: &mut Tape, p: &RelHeadParams<Var>, e_h: Var, e_t: Var, c: Var) -> Result<Var> {
    let side = |tape: &mut Tape, w: Var, wc: Var, e: Var| -> Result<Var> {
        let wt = tape.transpose(w)?;
        let a = tape.matmul(e, wt)?;
        let wct = tape.transpose(wc)?;
        let b = tape.matmul(c, wct)?;
        let s = tape.add(a, b)?;
        tape.tanh(s)
    };
    let z_h = side(tape, p.w_h, p.w_ch, e_h)?;
    let z_t = side(tape, p.w_t, p.w_ct, e_t)?;
    let y = tape.bilinear(z_h, p.w_r, z_t)?;
    tape.add(y, p.b_r)
}

/// Summed adaptive-thresholding loss over the rows of `logits`.
pub fn atl_loss_tape(tape: &mut Tape, logits: Var, positives: &[BTreeSet<usize>]) -> Result<Var> {
    let (n_pairs, n_classes) = tape.value(logits).dims2();
    let th = n_classes - 1;
    let mut pos_mask = vec![false; n_pairs * n_classes];
    let mut neg_mask = vec![true; n_pairs * n_classes];
    let mut pos_counts = Vec::with_capacity(n_pairs);
    for (i, set) in positives.iter().enumerate() {
        let row = i * n_classes;
        pos_mask[row + th] = true;
        for &r in set {
            pos_mask[row + r] = true;
            neg_mask[row + r] = false;
        }
        pos_counts.push(set.len() as f64);
    }
    let picked: Vec<f64> = pos_mask
        .iter()
        .enumerate()
        .map(|(k, &m)| if m && k % n_classes != th { 1.0 } else { 0.0 })
        .collect();
    // term1 = Σ_p |P_p| · lse_pos(p) − Σ_{r∈P_p} y_pr
    let z_pos = tape.masked_logsumexp_rows(logits, &pos_mask)?;
    let counts = tape.constant(Tensor::vector(pos_counts));
    let weighted = tape.mul(z_pos, counts)?;
    let a = tape.sum(weighted)?;
    let pick = tape.constant(Tensor::new(vec![n_pairs, n_classes], picked)?);
    let chosen = tape.mul(logits, pick)?;
    let b = tape.sum(chosen)?;
    // term2 = Σ_p lse_neg(p) − y_p,TH
    let z_neg = tape.masked_logsumexp_rows(logits, &neg_mask)?;
    let c = tape.sum(z_neg)?;
    let y_th = tape.slice(logits, 1, th, n_classes)?;
    let d = tape.sum(y_th)?;
    let t1 = tape.sub(a, b)?;
    let t2 = tape.sub(c, d)?;
    tape.add(t1, t2)
}
