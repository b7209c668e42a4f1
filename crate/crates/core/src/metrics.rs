//! Relation and evidence metrics: micro F1, Ign F1, intra/inter split,
//! evidence F1 in two pair scopes, and a per-category breakdown.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{Document, RelationVocab};
use crate::rules::{cooccur_rule, Category};

/// A relation fact keyed by document position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Fact {
    pub doc: usize,
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
}

/// `(doc, head, tail)`.
pub type PairKey = (usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(tp, predicted), ratio(tp, gold));
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf { precision: p, recall: r, f1, true_positives: tp, predicted, gold }
    }
}

pub fn gold_facts(docs: &[Document]) -> BTreeSet<Fact> {
    docs.iter()
        .enumerate()
        .flat_map(|(doc, d)| {
            d.facts.iter().map(move |f| Fact { doc, head: f.head, tail: f.tail, relation: f.relation })
        })
        .collect()
}

/// Exact-match micro F1.
pub fn re_f1(pred: &BTreeSet<Fact>, gold: &BTreeSet<Fact>) -> Prf {
    Prf::from_counts(pred.intersection(gold).count(), pred.len(), gold.len())
}

/// Name-level identity of a fact: sorted head names, sorted tail names, relation.
pub type NameKey = (Vec<String>, Vec<String>, String);

fn name_key(doc: &Document, head: usize, tail: usize, relation: &str) -> NameKey {
    let names = |e: usize| doc.entities[e].names().into_iter().collect::<Vec<_>>();
    (names(head), names(tail), relation.to_string())
}

/// Keys of every fact in a training corpus.
pub fn train_keys(docs: &[Document], relations: &RelationVocab) -> BTreeSet<NameKey> {
    docs.iter()
        .flat_map(|d| d.facts.iter().map(move |f| name_key(d, f.head, f.tail, relations.name(f.relation))))
        .collect()
}

/// Micro F1 after dropping facts whose name key appears in training.
pub fn ign_f1(
    pred: &BTreeSet<Fact>,
    gold: &BTreeSet<Fact>,
    docs: &[Document],
    relations: &RelationVocab,
    train: &BTreeSet<NameKey>,
) -> Prf {
    let keep = |f: &&Fact| !train.contains(&name_key(&docs[f.doc], f.head, f.tail, relations.name(f.relation)));
    let pred: BTreeSet<Fact> = pred.iter().filter(keep).copied().collect();
    let gold: BTreeSet<Fact> = gold.iter().filter(keep).copied().collect();
    if gold.is_empty() {
        log::warn!("every gold fact is shared with training; Ign F1 is 0");
    }
    re_f1(&pred, &gold)
}

/// Whether the pair's annotated mentions share some sentence.
pub fn is_intra(doc: &Document, head: usize, tail: usize) -> bool {
    !cooccur_rule(doc, head, tail).is_empty()
}

/// F1 on intra-sentence pairs and on inter-sentence pairs.
pub fn intra_inter_f1(pred: &BTreeSet<Fact>, gold: &BTreeSet<Fact>, docs: &[Document]) -> (Prf, Prf) {
    let split = |facts: &BTreeSet<Fact>| -> (BTreeSet<Fact>, BTreeSet<Fact>) {
        facts.iter().partition(|f| is_intra(&docs[f.doc], f.head, f.tail))
    };
    let (pi, pe) = split(pred);
    let (gi, ge) = split(gold);
    (re_f1(&pi, &gi), re_f1(&pe, &ge))
}

/// Micro F1 over `(doc, head, tail, sentence)` tuples of pairs in `scope`.
pub fn evi_f1(
    pred: &BTreeMap<PairKey, BTreeSet<usize>>,
    gold: &BTreeMap<PairKey, BTreeSet<usize>>,
    scope: &BTreeSet<PairKey>,
) -> Prf {
    let empty = BTreeSet::new();
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for key in scope {
        let p = pred.get(key).unwrap_or(&empty);
        let g = gold.get(key).unwrap_or(&empty);
        tp += p.intersection(g).count();
        np += p.len();
        ng += g.len();
    }
    Prf::from_counts(tp, np, ng)
}

/// Gold evidence of every positive pair.
pub fn gold_evidence(docs: &[Document]) -> BTreeMap<PairKey, BTreeSet<usize>> {
    let mut out: BTreeMap<PairKey, BTreeSet<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        for f in &d.facts {
            out.entry((i, f.head, f.tail)).or_default().extend(f.evidence.iter().copied());
        }
    }
    out
}

/// Micro F1 per category of the gold pair; categories without gold facts
/// are omitted.
pub fn breakdown(
    pred: &BTreeSet<Fact>,
    gold: &BTreeSet<Fact>,
    categories: &BTreeMap<PairKey, Category>,
) -> BTreeMap<Category, Prf> {
    let cat = |f: &Fact| categories.get(&(f.doc, f.head, f.tail)).copied().unwrap_or(Category::None);
    let mut out = BTreeMap::new();
    for c in Category::ALL {
        let g: BTreeSet<Fact> = gold.iter().filter(|f| cat(f) == c).copied().collect();
        if g.is_empty() {
            continue;
        }
        let p: BTreeSet<Fact> = pred.iter().filter(|f| cat(f) == c).copied().collect();
        out.insert(c, re_f1(&p, &g));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub f1: Prf,
    pub ign_f1: Option<Prf>,
    pub intra_f1: Prf,
    pub inter_f1: Prf,
    pub evi_f1: Option<Prf>,
    pub pos_evi_f1: Option<Prf>,
    pub categories: BTreeMap<Category, Prf>,
}

/// Everything a report needs besides the gold corpus.
#[derive(Debug, Clone, Default)]
pub struct Predictions {
    pub facts: BTreeSet<Fact>,
    /// Predicted evidence per pair; `None` when no evidence was produced.
    pub evidence: Option<BTreeMap<PairKey, BTreeSet<usize>>>,
}

pub fn evaluate(
    docs: &[Document],
    relations: &RelationVocab,
    pred: &Predictions,
    train: Option<&BTreeSet<NameKey>>,
    categories: &BTreeMap<PairKey, Category>,
) -> EvalReport {
    let gold = gold_facts(docs);
    let (intra_f1, inter_f1) = intra_inter_f1(&pred.facts, &gold, docs);
    let gold_ev = gold_evidence(docs);
    let (evi_f1, pos_evi_f1) = match &pred.evidence {
        Some(ev) => {
            let predicted_pairs: BTreeSet<PairKey> = pred.facts.iter().map(|f| (f.doc, f.head, f.tail)).collect();
            let gold_pairs: BTreeSet<PairKey> = gold_ev.keys().copied().collect();
            (Some(evi_f1(ev, &gold_ev, &predicted_pairs)), Some(evi_f1(ev, &gold_ev, &gold_pairs)))
        }
        None => (None, None),
    };
    EvalReport {
        f1: re_f1(&pred.facts, &gold),
        ign_f1: train.map(|t| ign_f1(&pred.facts, &gold, docs, relations, t)),
        intra_f1,
        inter_f1,
        evi_f1,
        pos_evi_f1,
        categories: breakdown(&pred.facts, &gold, categories),
    }
}

impl EvalReport {
    /// Aligned plain-text table, one metric per line.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, Prf)> = vec![("F1".into(), self.f1)];
        if let Some(p) = self.ign_f1 {
            rows.push(("Ign F1".into(), p));
        }
        rows.push(("Intra F1".into(), self.intra_f1));
        rows.push(("Inter F1".into(), self.inter_f1));
        if let Some(p) = self.evi_f1 {
            rows.push(("Evi F1".into(), p));
        }
        if let Some(p) = self.pos_evi_f1 {
            rows.push(("PosEvi F1".into(), p));
        }
        for (c, p) in &self.categories {
            rows.push((format!("F1 [{}]", c.label()), *p));
        }
        let mut out = format!("{:<16} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}\n", "metric", "precision", "recall", "f1", "tp", "pred", "gold");
        for (name, p) in rows {
            let _ = writeln!(
                out,
                "{:<16} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, p.precision, p.recall, p.f1, p.true_positives, p.predicted, p.gold
            );
        }
        out
    }
}
