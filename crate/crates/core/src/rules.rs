//! Heuristic silver evidence: co-occurrence, coreference and bridge rules,
//! applied in that order of precedence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{candidate_pairs, AliasLexicon, Document};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Cooccur,
    Coref,
    Bridge,
    None,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Cooccur, Category::Coref, Category::Bridge, Category::None];

    pub fn label(self) -> &'static str {
        match self {
            Category::Cooccur => "Co-occur",
            Category::Coref => "Coref",
            Category::Bridge => "Bridge",
            Category::None => "None",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sentences holding a coreferential mention of an entity. Results must
/// include every sentence with an annotated mention of it.
pub trait CorefProvider {
    fn sentences(&self, doc: &Document, entity: usize) -> BTreeSet<usize>;
}

/// Annotated mentions only.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityProvider;

impl CorefProvider for IdentityProvider {
    fn sentences(&self, doc: &Document, entity: usize) -> BTreeSet<usize> {
        doc.entities[entity].sentences()
    }
}

/// Annotated mentions plus sentences containing an alias of any of the
/// entity's names, matched case-insensitively as a contiguous token run.
#[derive(Debug, Clone, Default)]
pub struct LexiconProvider {
    aliases: BTreeMap<String, Vec<Vec<String>>>,
}

impl LexiconProvider {
    pub fn new(lexicon: &AliasLexicon) -> Self {
        let mut aliases: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for (name, list) in lexicon {
            let entry = aliases.entry(name.to_lowercase()).or_default();
            for alias in list {
                let toks: Vec<String> = alias.split_whitespace().map(str::to_lowercase).collect();
                if !toks.is_empty() && !entry.contains(&toks) {
                    entry.push(toks);
                }
            }
        }
        LexiconProvider { aliases }
    }
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

impl CorefProvider for LexiconProvider {
    fn sentences(&self, doc: &Document, entity: usize) -> BTreeSet<usize> {
        let ent = &doc.entities[entity];
        let mut out = ent.sentences();
        let alias_lists: Vec<&Vec<String>> = ent
            .names()
            .iter()
            .filter_map(|n| self.aliases.get(&n.to_lowercase()))
            .flatten()
            .collect();
        if alias_lists.is_empty() {
            return out;
        }
        for sent in &doc.sentences {
            let lower: Vec<String> = sent.tokens.iter().map(|t| t.to_lowercase()).collect();
            if alias_lists.iter().any(|a| contains_run(&lower, a)) {
                out.insert(sent.index);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SilverLabel {
    pub head: usize,
    pub tail: usize,
    pub category: Category,
    pub evidence: BTreeSet<usize>,
    pub bridge: Option<usize>,
}

/// Which pairs [`silver_labels`] covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairScope {
    /// Pairs with at least one gold relation.
    Positive,
    /// Every ordered pair of distinct entities.
    All,
}

fn intersect(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> BTreeSet<usize> {
    a.intersection(b).copied().collect()
}

/// Sentences with annotated mentions of both entities.
pub fn cooccur_rule(doc: &Document, h: usize, t: usize) -> BTreeSet<usize> {
    intersect(&doc.entities[h].sentences(), &doc.entities[t].sentences())
}

pub fn coref_rule(doc: &Document, h: usize, t: usize, provider: &dyn CorefProvider) -> BTreeSet<usize> {
    intersect(&provider.sentences(doc, h), &provider.sentences(doc, t))
}

/// The most frequently mentioned entity sharing a sentence with both ends,
/// and the sentences it shares with either.
pub fn bridge_rule(
    doc: &Document,
    h: usize,
    t: usize,
    provider: &dyn CorefProvider,
) -> Option<(usize, BTreeSet<usize>)> {
    let sets: Vec<BTreeSet<usize>> = (0..doc.entities.len()).map(|e| provider.sentences(doc, e)).collect();
    bridge_from_sets(doc, h, t, &sets)
}

fn bridge_from_sets(
    doc: &Document,
    h: usize,
    t: usize,
    sets: &[BTreeSet<usize>],
) -> Option<(usize, BTreeSet<usize>)> {
    let mut best: Option<(usize, BTreeSet<usize>)> = None;
    for b in (0..doc.entities.len()).filter(|&b| b != h && b != t) {
        let with_h = intersect(&sets[b], &sets[h]);
        let with_t = intersect(&sets[b], &sets[t]);
        if with_h.is_empty() || with_t.is_empty() {
            continue;
        }
        let freq = doc.entities[b].mentions.len();
        if best.as_ref().is_none_or(|(cur, _)| freq > doc.entities[*cur].mentions.len()) {
            best = Some((b, with_h.union(&with_t).copied().collect()));
        }
    }
    best
}

/// Labels pairs in `scope`, head-major order.
pub fn silver_labels(doc: &Document, provider: &dyn CorefProvider, scope: PairScope) -> Vec<SilverLabel> {
    let proper: Vec<BTreeSet<usize>> = doc.entities.iter().map(|e| e.sentences()).collect();
    let sets: Vec<BTreeSet<usize>> = (0..doc.entities.len()).map(|e| provider.sentences(doc, e)).collect();
    let pairs: Vec<(usize, usize)> = match scope {
        PairScope::All => candidate_pairs(doc),
        PairScope::Positive => doc.positive_pairs().into_keys().collect(),
    };
    pairs
        .into_iter()
        .map(|(h, t)| label_pair(doc, h, t, &proper, &sets))
        .collect()
}

fn label_pair(
    doc: &Document,
    h: usize,
    t: usize,
    proper: &[BTreeSet<usize>],
    sets: &[BTreeSet<usize>],
) -> SilverLabel {
    let label = |category, evidence, bridge| SilverLabel { head: h, tail: t, category, evidence, bridge };
    let co = intersect(&proper[h], &proper[t]);
    if !co.is_empty() {
        return label(Category::Cooccur, co, None);
    }
    let coref = intersect(&sets[h], &sets[t]);
    if !coref.is_empty() {
        return label(Category::Coref, coref, None);
    }
    match bridge_from_sets(doc, h, t, sets) {
        Some((b, ev)) => label(Category::Bridge, ev, Some(b)),
        None => label(Category::None, BTreeSet::new(), None),
    }
}

/// Copy of `doc` whose facts carry silver evidence in place of gold.
pub fn with_silver_evidence(doc: &Document, provider: &dyn CorefProvider) -> Document {
    let labels: BTreeMap<(usize, usize), BTreeSet<usize>> = silver_labels(doc, provider, PairScope::Positive)
        .into_iter()
        .map(|l| ((l.head, l.tail), l.evidence))
        .collect();
    let mut out = doc.clone();
    for f in &mut out.facts {
        f.evidence = labels.get(&(f.head, f.tail)).map(|e| e.iter().copied().collect()).unwrap_or_default();
    }
    out
}

/// Relation facts per category of their pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CategoryHistogram {
    pub counts: BTreeMap<Category, usize>,
    pub total: usize,
}

impl CategoryHistogram {
    pub fn fraction(&self, c: Category) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts.get(&c).copied().unwrap_or(0) as f64 / self.total as f64
        }
    }

    /// Share of facts reached by some rule.
    pub fn coverage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.fraction(Category::None)
        }
    }
}

pub fn category_histogram(docs: &[Document], provider: &dyn CorefProvider) -> CategoryHistogram {
    let mut hist = CategoryHistogram::default();
    for c in Category::ALL {
        hist.counts.insert(c, 0);
    }
    for doc in docs {
        let cats: BTreeMap<(usize, usize), Category> = silver_labels(doc, provider, PairScope::Positive)
            .into_iter()
            .map(|l| ((l.head, l.tail), l.category))
            .collect();
        for f in &doc.facts {
            *hist.counts.entry(cats[&(f.head, f.tail)]).or_default() += 1;
            hist.total += 1;
        }
    }
    hist
}

/// Category of every ordered pair, keyed `(head, tail)`.
pub fn pair_categories(doc: &Document, provider: &dyn CorefProvider) -> BTreeMap<(usize, usize), Category> {
    silver_labels(doc, provider, PairScope::All)
        .into_iter()
        .map(|l| ((l.head, l.tail), l.category))
        .collect()
}
