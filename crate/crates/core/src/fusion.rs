//! Evidence-fused inference: pseudo documents built from evidence
//! sentences, score blending through a single threshold, and its tuning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::corpus::{Document, Entity, Mention, RelationFact, Sentence};
use crate::diffmath::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::evi_head::predict_evidence;
use crate::model::Model;
use crate::rel_head::predict;
use crate::rules::{silver_labels, CorefProvider, PairScope};

/// Search interval for the blending threshold.
pub const TAU_BOUNDS: (f64, f64) = (-20.0, 20.0);

/// A pair's evidence sentences, kept in document order, as a document.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDocument {
    pub head: usize,
    pub tail: usize,
    pub kept: Vec<usize>,
    pub doc: Document,
    /// Ids of `head` and `tail` inside `doc`.
    pub new_head: usize,
    pub new_tail: usize,
}

/// Restricts `doc` to `evidence`. Fails with [`Error::Fallback`] when the
/// evidence is empty or drops every mention of the head or tail.
pub fn build_pseudo(doc: &Document, head: usize, tail: usize, evidence: &BTreeSet<usize>) -> Result<PseudoDocument> {
    if evidence.is_empty() {
        return Err(Error::Fallback(format!("{}: pair ({head}, {tail}) has no evidence", doc.doc_id)));
    }
    if let Some(&bad) = evidence.iter().find(|&&s| s >= doc.sentences.len()) {
        return Err(Error::Config(format!("{}: evidence sentence {bad} out of range", doc.doc_id)));
    }
    let kept: Vec<usize> = evidence.iter().copied().collect();
    let sent_map: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let sentences = kept
        .iter()
        .enumerate()
        .map(|(new, &old)| Sentence { index: new, tokens: doc.sentences[old].tokens.clone() })
        .collect();

    let mut ent_map = BTreeMap::new();
    let mut entities: Vec<Entity> = Vec::new();
    for e in &doc.entities {
        let mentions: Vec<&Mention> = e.mentions.iter().filter(|m| sent_map.contains_key(&m.sent_id)).collect();
        if mentions.is_empty() {
            continue;
        }
        let id = entities.len();
        ent_map.insert(e.id, id);
        entities.push(Entity {
            id,
            mentions: mentions
                .into_iter()
                .map(|m| Mention { entity_id: id, sent_id: sent_map[&m.sent_id], ..m.clone() })
                .collect(),
        });
    }
    let (Some(&new_head), Some(&new_tail)) = (ent_map.get(&head), ent_map.get(&tail)) else {
        return Err(Error::Fallback(format!(
            "{}: evidence {kept:?} drops every mention of entity {}",
            doc.doc_id,
            if ent_map.contains_key(&head) { tail } else { head }
        )));
    };
    let facts = doc
        .facts
        .iter()
        .filter_map(|f| {
            Some(RelationFact {
                head: *ent_map.get(&f.head)?,
                tail: *ent_map.get(&f.tail)?,
                relation: f.relation,
                evidence: f.evidence.iter().filter_map(|s| sent_map.get(s).copied()).collect(),
            })
        })
        .collect();
    let pseudo = Document { doc_id: format!("{}#{head}-{tail}", doc.doc_id), sentences, entities, facts };
    Ok(PseudoDocument { head, tail, kept, doc: pseudo, new_head, new_tail })
}

/// `σ(s_o + s_e − τ)` and the decision `s_o + s_e > τ`.
pub fn fuse_scores(s_o: f64, s_e: f64, tau: f64) -> (f64, bool) {
    let x = s_o + s_e - tau;
    let decision = x > 0.0;
    let mut p = sigmoid(x);
    // For |x| below half an ulp of 1, σ(x) rounds to exactly 0.5; nudge so
    // that p > 0.5 still coincides with the decision.
    if decision && p <= 0.5 {
        p = 0.5 + f64::EPSILON / 2.0;
    }
    (p, decision)
}

/// Blending loss at `tau` over `(combined score, label)` instances.
pub fn blend_loss(instances: &[(f64, bool)], tau: f64) -> f64 {
    instances
        .iter()
        .map(|&(x, y)| {
            let z = x - tau;
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauFit {
    pub tau: f64,
    pub loss: f64,
    /// Labels were all identical, so `tau` sits on an interval boundary.
    pub degenerate: bool,
}

/// Minimizes [`blend_loss`] over [`TAU_BOUNDS`] by golden-section search.
pub fn tune_tau(instances: &[(f64, bool)]) -> Result<TauFit> {
    if instances.is_empty() {
        return Err(Error::Config("tau tuning needs at least one development instance".into()));
    }
    let (lo, hi) = TAU_BOUNDS;
    let n_pos = instances.iter().filter(|i| i.1).count();
    if n_pos == 0 || n_pos == instances.len() {
        let tau = if n_pos == 0 { hi } else { lo };
        log::warn!("all {} tuning labels identical; tau set to interval boundary {tau}", instances.len());
        return Ok(TauFit { tau, loss: blend_loss(instances, tau), degenerate: true });
    }
    let f = |t: f64| blend_loss(instances, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-9 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mut tau = (a + b) / 2.0;
    // The interval ends are candidates too when the optimum lies outside.
    for edge in [lo, hi] {
        if f(edge) < f(tau) {
            tau = edge;
        }
    }
    Ok(TauFit { tau, loss: f(tau), degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InferenceMode {
    Full,
    NoPseudo,
    NoOrigDoc,
    NoBlending,
    NoJoint,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 5] = [
        InferenceMode::Full,
        InferenceMode::NoPseudo,
        InferenceMode::NoOrigDoc,
        InferenceMode::NoBlending,
        InferenceMode::NoJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Full => "full",
            InferenceMode::NoPseudo => "nopseudo",
            InferenceMode::NoOrigDoc => "noorigdoc",
            InferenceMode::NoBlending => "noblending",
            InferenceMode::NoJoint => "nojoint",
        }
    }

    pub fn uses_pseudo(self) -> bool {
        self != InferenceMode::NoPseudo
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferenceMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected one of full, nopseudo, noorigdoc, noblending, nojoint")))
    }
}

/// Where pair evidence comes from at inference time.
pub enum EvidenceSource<'a> {
    /// The model's evidence head, selecting sentences at `threshold`.
    Model { threshold: f64 },
    Rules(&'a dyn CorefProvider),
}

/// Both score sources for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFusion {
    pub head: usize,
    pub tail: usize,
    pub evidence: BTreeSet<usize>,
    /// Threshold-relative scores on the original document.
    pub s_o: Vec<f64>,
    /// Scores on the pseudo document; `None` on fallback.
    pub s_e: Option<Vec<f64>>,
    /// Model evidence probabilities, when the model supplied evidence.
    pub evidence_probs: Option<Vec<f64>>,
}

/// Scores every candidate pair of `doc` on the original document and, when
/// `with_pseudo`, on its pseudo document.
pub fn score_document(
    model: &Model,
    doc: &Document,
    source: &EvidenceSource<'_>,
    with_pseudo: bool,
) -> Result<Vec<PairFusion>> {
    let with_model_evidence = matches!(source, EvidenceSource::Model { .. });
    let orig = model.score_doc(doc, with_model_evidence)?;
    let evidence: Vec<BTreeSet<usize>> = match source {
        EvidenceSource::Model { threshold } => orig
            .evidence
            .as_ref()
            .expect("requested evidence")
            .iter()
            .map(|p| predict_evidence(p, *threshold))
            .collect(),
        EvidenceSource::Rules(provider) => {
            let labels: BTreeMap<(usize, usize), BTreeSet<usize>> = silver_labels(doc, *provider, PairScope::All)
                .into_iter()
                .map(|l| ((l.head, l.tail), l.evidence))
                .collect();
            orig.pairs.iter().map(|p| labels[p].clone()).collect()
        }
    };

    // Pseudo documents depend only on the kept sentences, so pairs sharing
    // an evidence set share one forward pass.
    let mut groups: BTreeMap<&BTreeSet<usize>, Vec<usize>> = BTreeMap::new();
    if with_pseudo {
        for (i, ev) in evidence.iter().enumerate() {
            if !ev.is_empty() {
                groups.entry(ev).or_default().push(i);
            }
        }
    }
    let mut s_e: Vec<Option<Vec<f64>>> = vec![None; orig.pairs.len()];
    for (ev, members) in groups {
        let mut built = Vec::new();
        for &i in &members {
            let (h, t) = orig.pairs[i];
            match build_pseudo(doc, h, t, ev) {
                Ok(p) => built.push((i, p)),
                Err(Error::Fallback(msg)) => log::debug!("{msg}; using document scores only"),
                Err(e) => return Err(e),
            }
        }
        let Some((_, first)) = built.first() else { continue };
        let pseudo_doc = &first.doc;
        let pairs: Vec<(usize, usize)> = built.iter().map(|(_, p)| (p.new_head, p.new_tail)).collect();
        let scored = model.score_pairs(pseudo_doc, &pairs, false)?;
        for ((i, _), sc) in built.iter().zip(scored.scores) {
            s_e[*i] = Some(sc.scores);
        }
    }

    Ok(orig
        .pairs
        .iter()
        .enumerate()
        .map(|(i, &(head, tail))| PairFusion {
            head,
            tail,
            evidence: evidence[i].clone(),
            s_o: orig.scores[i].scores.clone(),
            s_e: s_e[i].take(),
            evidence_probs: orig.evidence.as_ref().map(|e| e[i].clone()),
        })
        .collect())
}

/// Relations predicted for one pair under `mode`, with a score each.
///
/// Full and NoJoint blend through `tau`; pairs without a pseudo score use
/// the original-document rule `S_O > 0` in every mode.
pub fn decide(pair: &PairFusion, mode: InferenceMode, tau: f64) -> Vec<(usize, f64)> {
    let Some(s_e) = pair.s_e.as_ref().filter(|_| mode.uses_pseudo()) else {
        return predict(&pair.s_o).into_iter().map(|r| (r, pair.s_o[r])).collect();
    };
    let n = pair.s_o.len();
    match mode {
        InferenceMode::Full | InferenceMode::NoJoint => (0..n)
            .filter_map(|r| {
                let (p, yes) = fuse_scores(pair.s_o[r], s_e[r], tau);
                yes.then_some((r, p))
            })
            .collect(),
        InferenceMode::NoOrigDoc => predict(s_e).into_iter().map(|r| (r, s_e[r])).collect(),
        InferenceMode::NoBlending => (0..n)
            .filter(|&r| pair.s_o[r] > 0.0 || s_e[r] > 0.0)
            .map(|r| (r, pair.s_o[r].max(s_e[r])))
            .collect(),
        InferenceMode::NoPseudo => unreachable!("handled above"),
    }
}

/// `(S_O + S_E, label)` for every relation of every non-fallback pair.
pub fn tau_instances(doc: &Document, pairs: &[PairFusion]) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for p in pairs {
        let Some(s_e) = &p.s_e else { continue };
        let gold = doc.positives(p.head, p.tail);
        out.extend(p.s_o.iter().zip(s_e).enumerate().map(|(r, (a, b))| (a + b, gold.contains(&r))));
    }
    out
}
