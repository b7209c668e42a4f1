//! Joint relation + evidence training: AdamW with warmup/decay, gradient
//! clipping, per-epoch dev evaluation and early stopping.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MarkedSequence};
use crate::diffmath::{prng, Tape, Tensor, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{gold_facts, re_f1, Fact};
use crate::model::{doc_loss, Model, ModelParams, ParamGroup};
use crate::rel_head::predict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub warmup_fraction: f64,
    pub batch_docs: usize,
    pub max_epochs: usize,
    /// Weight on the evidence loss: `L = L_RE + λ·L_Evi`.
    pub evi_loss_weight: f64,
    pub seed: u64,
    /// Train without the evidence loss.
    pub no_joint: bool,
    /// Epochs without dev F1 improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 5e-5,
            lr_heads: 1e-4,
            warmup_fraction: 0.06,
            batch_docs: 4,
            max_epochs: 30,
            evi_loss_weight: 0.1,
            seed: 0,
            no_joint: false,
            patience: 5,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings for an encoder trained from scratch on small corpora.
    pub fn desk() -> Self {
        TrainConfig { lr_encoder: 1e-3, lr_heads: 2e-3, batch_docs: 2, weight_decay: 0.1, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!("warmup_fraction must lie in (0, 1), got {}", self.warmup_fraction)));
        }
        if !(self.evi_loss_weight.is_finite() && self.evi_loss_weight >= 0.0) {
            return Err(Error::Config(format!("evi_loss_weight must be non-negative, got {}", self.evi_loss_weight)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_docs == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_docs, max_epochs and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Number of warmup updates out of `total`, leaving at least one decay step.
pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).ceil() as usize).clamp(1, total.saturating_sub(1).max(1))
}

/// Learning rate of update `step` (1-based): linear rise to `peak` at
/// `warmup`, then linear decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update. `grads[i] = None` leaves parameter `i` untouched;
    /// weight decay applies to matrices only (`decay[i]`).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>], lrs: &[f64], decay: &[bool]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr = lrs[i];
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                *w -= lr * (update + wd * *w);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= k));
    }
    norm
}

/// Loss handles for a batch.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub re: Var,
    pub evi: Option<Var>,
}

/// `L = L_RE + λ·L_Evi` summed over `docs`; without `joint` the evidence
/// term is never built. `None` when no document has a candidate pair.
pub fn joint_loss(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    p: &ModelParams<Var>,
    docs: &[(&Document, &MarkedSequence)],
    lambda: f64,
    joint: bool,
) -> Result<Option<JointLoss>> {
    let mut re: Option<Var> = None;
    let mut evi: Option<Var> = None;
    let add = |tape: &mut Tape, acc: &mut Option<Var>, x: Var| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, x)?,
            None => x,
        });
        Ok(())
    };
    for (doc, seq) in docs {
        if let Some(l) = doc_loss(tape, cfg, p, doc, seq, joint)? {
            add(tape, &mut re, l.re)?;
            if let Some(e) = l.evi {
                add(tape, &mut evi, e)?;
            }
        }
    }
    let Some(re) = re else { return Ok(None) };
    let total = match evi {
        Some(e) => {
            let w = tape.scale(e, lambda)?;
            tape.add(re, w)?
        }
        None => re,
    };
    Ok(Some(JointLoss { total, re, evi }))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub loss_re: f64,
    pub loss_evi: f64,
    pub dev_f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_dev_f1: f64,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Micro F1 of document-only predictions.
pub fn dev_f1(model: &Model, docs: &[Document]) -> Result<f64> {
    let mut pred = BTreeSet::new();
    for (i, d) in docs.iter().enumerate() {
        let s = model.score_doc(d, false)?;
        for (&(head, tail), sc) in s.pairs.iter().zip(&s.scores) {
            pred.extend(predict(&sc.scores).into_iter().map(|relation| Fact { doc: i, head, tail, relation }));
        }
    }
    Ok(re_f1(&pred, &gold_facts(docs)).f1)
}

fn diverged(step: usize, docs: &[&Document], message: String) -> Error {
    Error::Diverged { step, docs: docs.iter().map(|d| d.doc_id.clone()).collect(), message }
}

/// Trains `model` in place of a copy and returns the best-dev-F1 snapshot.
/// Evidence targets come from the facts of `train_docs` (gold or silver).
pub fn train(
    mut model: Model,
    train_docs: &[Document],
    dev_docs: &[Document],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_docs.is_empty() || dev_docs.is_empty() {
        return Err(Error::Config("training needs non-empty train and dev splits".into()));
    }
    let joint = !cfg.no_joint;
    if joint && !train_docs.iter().any(|d| d.facts.iter().any(|f| !f.evidence.is_empty())) {
        return Err(Error::Config(
            "training corpus has no evidence annotations; supply silver evidence or disable the evidence loss".into(),
        ));
    }
    let seqs: Vec<MarkedSequence> = train_docs.iter().map(|d| model.mark(d)).collect::<Result<_>>()?;
    for d in dev_docs {
        model.mark(d)?;
    }
    model.no_joint = cfg.no_joint;

    let named: Vec<(String, Tensor)> = model.params.flatten().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let sizes: Vec<usize> = named.iter().map(|(_, t)| t.len()).collect();
    let decay: Vec<bool> = named.iter().map(|(_, t)| t.rank() >= 2).collect();
    let peaks: Vec<f64> = named
        .iter()
        .map(|(n, _)| match ModelParams::<Tensor>::group_of(n) {
            ParamGroup::Encoder => cfg.lr_encoder,
            ParamGroup::Heads => cfg.lr_heads,
        })
        .collect();
    let mut flat: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
    let mut opt = AdamW::new(&sizes, cfg.weight_decay);

    let per_epoch = train_docs.len().div_ceil(cfg.batch_docs);
    let total = per_epoch * cfg.max_epochs;
    let warmup = warmup_steps(total, cfg.warmup_fraction);
    let mut rng = prng(cfg.seed);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();

    let mut step = 0;
    let mut log = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_re, mut sum_evi) = (0.0, 0.0);
        let mut lr_last = 0.0;
        for batch in order.chunks(cfg.batch_docs) {
            step += 1;
            let docs: Vec<&Document> = batch.iter().map(|&i| &train_docs[i]).collect();
            let pairs: Vec<(&Document, &MarkedSequence)> = batch.iter().map(|&i| (&train_docs[i], &seqs[i])).collect();
            let mut tape = Tape::new();
            let mut k = 0;
            let vars = model.params.map(&mut |_, _| {
                k += 1;
                tape.leaf(flat[k - 1].clone())
            });
            let loss = match joint_loss(&mut tape, &model.config, &vars, &pairs, cfg.evi_loss_weight, joint) {
                Ok(Some(l)) => l,
                Ok(None) => continue,
                Err(Error::NonFinite { op }) => return Err(diverged(step, &docs, format!("non-finite value in {op}"))),
                Err(e) => return Err(e),
            };
            let re = tape.value(loss.re).item();
            let evi = loss.evi.map_or(0.0, |e| tape.value(e).item());
            let grads = tape.backward(loss.total).map_err(|e| diverged(step, &docs, e.to_string()))?;
            let mut g: Vec<Option<Vec<f64>>> = vars
                .flatten()
                .into_iter()
                .map(|(_, &v)| grads.get_slice(v).filter(|s| s.iter().any(|&x| x != 0.0)).map(<[f64]>::to_vec))
                .collect();
            let norm = clip_grad_norm(&mut g, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(diverged(step, &docs, format!("gradient norm {norm}")));
            }
            let lr_scale = lr_at(step, total, warmup, 1.0);
            let lrs: Vec<f64> = peaks.iter().map(|p| p * lr_scale).collect();
            opt.step(&mut flat, &g, &lrs, &decay);
            sum_re += re;
            sum_evi += evi;
            lr_last = lr_scale * cfg.lr_encoder;
        }
        let mut it = flat.iter();
        model.params = model.params.map(&mut |_, _| it.next().expect("parameter count").clone());
        let f1 = dev_f1(&model, dev_docs)?;
        let entry = EpochLog {
            epoch,
            step,
            loss_re: sum_re / per_epoch as f64,
            loss_evi: sum_evi / per_epoch as f64,
            dev_f1: f1,
            lr: lr_last,
        };
        log::info!(
            "epoch {epoch}: loss_re {:.4} loss_evi {:.4} dev_f1 {:.4}",
            entry.loss_re,
            entry.loss_evi,
            entry.dev_f1
        );
        on_epoch(&entry);
        log.push(entry);
        if f1 > best.0 {
            best = (f1, epoch, model.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_dev_f1, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome { model, log, best_dev_f1, best_epoch, steps: step })
}
