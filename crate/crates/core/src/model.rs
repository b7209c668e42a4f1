//! The joint relation/evidence model: parameters, batched document forward
//! pass, joint loss, scoring and checkpoint I/O.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{candidate_pairs, insert_markers, Document, MarkedSequence, RelationVocab, TokenVocab};
use crate::diffmath::{prng, sigmoid, Checkpoint, Tape, Tensor, Var};
use crate::encoder::{context_tape, encode_tape, entity_tape, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evi_head::{self, EviHeadParams};
use crate::rel_head::{self, PairScores, RelHeadParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub encoder: EncoderParams<T>,
    pub rel: RelHeadParams<T>,
    pub evi: EviHeadParams<T>,
}

/// Which optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Heads,
}

impl<T> ModelParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit("encoder.", f);
        self.rel.visit("rel_head.", f);
        self.evi.visit("evi_head.", f);
    }

    pub fn try_map<U, E>(&self, f: &mut dyn FnMut(String, &T) -> Result<U, E>) -> Result<ModelParams<U>, E> {
        Ok(ModelParams {
            encoder: self.encoder.try_map("encoder.", f)?,
            rel: self.rel.try_map("rel_head.", f)?,
            evi: self.evi.try_map("evi_head.", f)?,
        })
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(String, &T) -> U) -> ModelParams<U> {
        self.try_map::<U, std::convert::Infallible>(&mut |n, t| Ok(f(n, t)))
            .unwrap_or_else(|e| match e {})
    }

    /// Parameters in visiting order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else {
            ParamGroup::Heads
        }
    }
}

impl ModelParams {
    pub fn n_values(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.len()).sum()
    }

    /// Binds every parameter as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn constants(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }
}

/// Tape handles for one document's forward pass.
#[derive(Debug, Clone)]
pub struct DocGraph {
    pub h: Var,
    pub a: Var,
    pub pairs: Vec<(usize, usize)>,
    /// Pair context embeddings `[P, d]`.
    pub context: Var,
    /// Relation logits `[P, |R|+1]`.
    pub logits: Var,
}

/// Encodes `seq` and scores `pairs`; `None` when there are no pairs.
pub fn forward_doc(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    p: &ModelParams<Var>,
    seq: &MarkedSequence,
    pairs: &[(usize, usize)],
) -> Result<Option<DocGraph>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let (h, a) = encode_tape(tape, cfg, &p.encoder, &seq.tokens)?;
    let (ent, ent_attn) = entity_tape(tape, h, a, seq)?;
    let heads: Vec<usize> = pairs.iter().map(|x| x.0).collect();
    let tails: Vec<usize> = pairs.iter().map(|x| x.1).collect();
    let e_h = tape.embedding_gather(ent, &heads)?;
    let e_t = tape.embedding_gather(ent, &tails)?;
    let context = context_tape(tape, h, ent_attn, pairs)?;
    let logits = rel_head::logits_tape(tape, &p.rel, e_h, e_t, context)?;
    Ok(Some(DocGraph { h, a, pairs: pairs.to_vec(), context, logits }))
}

/// Per-document loss terms (sums over pairs / sentences).
#[derive(Debug, Clone, Copy)]
pub struct DocLoss {
    pub re: Var,
    pub evi: Option<Var>,
}

/// Relation loss over all candidate pairs and, when `joint`, evidence loss
/// over positive pairs with non-empty evidence in `doc`'s facts.
pub fn doc_loss(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    p: &ModelParams<Var>,
    doc: &Document,
    seq: &MarkedSequence,
    joint: bool,
) -> Result<Option<DocLoss>> {
    let pairs = candidate_pairs(doc);
    let Some(g) = forward_doc(tape, cfg, p, seq, &pairs)? else {
        return Ok(None);
    };
    let positives: Vec<BTreeSet<usize>> = pairs.iter().map(|&(h, t)| doc.positives(h, t)).collect();
    let re = rel_head::atl_loss_tape(tape, g.logits, &positives)?;
    if !joint {
        return Ok(Some(DocLoss { re, evi: None }));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let n_sent = seq.sent_spans.len();
    for (i, &(h, t)) in pairs.iter().enumerate() {
        if positives[i].is_empty() {
            continue;
        }
        let gold = doc.gold_evidence(h, t);
        if gold.is_empty() {
            continue;
        }
        rows.push(i);
        targets.extend((0..n_sent).map(|n| if gold.contains(&n) { 1.0 } else { 0.0 }));
    }
    if rows.is_empty() {
        return Ok(Some(DocLoss { re, evi: None }));
    }
    let c = tape.embedding_gather(g.context, &rows)?;
    let s = evi_head::sentences_tape(tape, g.h, &seq.sent_spans)?;
    let y = evi_head::logits_tape(tape, &p.evi, c, s)?;
    let evi = tape.bce_with_logits(y, &targets)?;
    Ok(Some(DocLoss { re, evi: Some(evi) }))
}

/// Scores for every candidate pair of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocScores {
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<PairScores>,
    /// Per-pair sentence probabilities, when requested.
    pub evidence: Option<Vec<Vec<f64>>>,
}

impl DocScores {
    pub fn empty() -> Self {
        DocScores { pairs: Vec::new(), scores: Vec::new(), evidence: None }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    encoder: EncoderConfig,
    tokens: Vec<String>,
    relations: Vec<String>,
    tau: Option<f64>,
    no_joint: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub tokens: TokenVocab,
    pub relations: RelationVocab,
    pub params: ModelParams,
    /// Blending threshold, once tuned.
    pub tau: Option<f64>,
    /// Trained without the evidence loss.
    pub no_joint: bool,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`; `vocab_size` is taken
    /// from `tokens`.
    pub fn new(mut config: EncoderConfig, tokens: TokenVocab, relations: RelationVocab) -> Result<Self> {
        config.vocab_size = tokens.len();
        config.validate()?;
        let mut rng = prng(config.seed);
        let encoder = EncoderParams::init(&config, &mut rng)?;
        let rel = RelHeadParams::init(config.d_model, relations.len(), &mut rng);
        let evi = EviHeadParams::init(config.d_model, &mut rng);
        Ok(Model {
            config,
            tokens,
            relations,
            params: ModelParams { encoder, rel, evi },
            tau: None,
            no_joint: false,
        })
    }

    pub fn mark(&self, doc: &Document) -> Result<MarkedSequence> {
        let seq = insert_markers(doc, &self.tokens);
        if seq.len() > self.config.max_len {
            return Err(Error::schema(
                &doc.doc_id,
                "sents",
                format!("marked length {} exceeds encoder max_len {}", seq.len(), self.config.max_len),
            ));
        }
        Ok(seq)
    }

    /// Relation scores for all candidate pairs, plus evidence probabilities
    /// when `with_evidence`.
    pub fn score_doc(&self, doc: &Document, with_evidence: bool) -> Result<DocScores> {
        let pairs = candidate_pairs(doc);
        self.score_pairs(doc, &pairs, with_evidence)
    }

    pub fn score_pairs(&self, doc: &Document, pairs: &[(usize, usize)], with_evidence: bool) -> Result<DocScores> {
        let seq = self.mark(doc)?;
        let mut tape = Tape::new();
        let p = self.params.constants(&mut tape);
        let Some(g) = forward_doc(&mut tape, &self.config, &p, &seq, pairs)? else {
            return Ok(DocScores::empty());
        };
        let logits = tape.value(g.logits);
        let scores = (0..pairs.len()).map(|i| PairScores::from_logits(logits.row(i).to_vec())).collect();
        let evidence = if with_evidence {
            let s = evi_head::sentences_tape(&mut tape, g.h, &seq.sent_spans)?;
            let y = evi_head::logits_tape(&mut tape, &p.evi, g.context, s)?;
            let y = tape.value(y);
            Some((0..pairs.len()).map(|i| y.row(i).iter().map(|&v| sigmoid(v)).collect()).collect())
        } else {
            None
        };
        Ok(DocScores { pairs: pairs.to_vec(), scores, evidence })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            encoder: self.config.clone(),
            tokens: self.tokens.as_list().to_vec(),
            relations: self.relations.names().to_vec(),
            tau: self.tau,
            no_joint: self.no_joint,
        };
        let tensors = self.params.flatten().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Ok(Checkpoint { meta: serde_json::to_value(meta)?, tensors })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ck.meta).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let tokens = TokenVocab::from_list(meta.tokens)?;
        let relations = RelationVocab::new(meta.relations)?;
        let template = Model::new(meta.encoder, tokens, relations)?;
        let mut stored: HashMap<String, Tensor> = ck.tensors.into_iter().collect();
        let params = template.params.try_map(&mut |name, t| {
            let v = stored.remove(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if v.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            Ok(v)
        })?;
        if let Some(extra) = stored.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Model { params, tau: meta.tau, no_joint: meta.no_joint, ..template })
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        self.to_checkpoint()?.write_to(w)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Model::from_checkpoint(Checkpoint::read_from(r)?)
    }
}
