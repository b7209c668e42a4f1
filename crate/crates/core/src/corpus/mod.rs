//! Annotated documents, DocRED-layout JSON I/O, marker insertion and the
//! synthetic corpus generator.

mod json;
mod markers;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use json::{
    parse_corpus, parse_corpus_with, read_alias_lexicon, write_corpus, write_corpus_annotated, DocAnnotations,
    PairEvidence, PairPrediction,
};
pub use markers::{insert_markers, MarkedSequence};
pub use synth::{synth_corpus, CategoryMix, SynthConfig, SynthCorpus, Template};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub index: usize,
    pub tokens: Vec<String>,
}

/// One proper-noun occurrence of an entity; `start..end` indexes tokens of
/// sentence `sent_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity_id: usize,
    pub sent_id: usize,
    pub start: usize,
    pub end: usize,
    pub name: String,
    pub etype: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub mentions: Vec<Mention>,
}

impl Entity {
    /// Sentences holding at least one annotated mention.
    pub fn sentences(&self) -> BTreeSet<usize> {
        self.mentions.iter().map(|m| m.sent_id).collect()
    }

    /// Distinct mention surface forms.
    pub fn names(&self) -> BTreeSet<String> {
        self.mentions.iter().map(|m| m.name.clone()).collect()
    }
}

/// A labelled relation between two entities with its evidence sentences,
/// kept in annotation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationFact {
    pub head: usize,
    pub tail: usize,
    pub relation: usize,
    pub evidence: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Sentence>,
    pub entities: Vec<Entity>,
    pub facts: Vec<RelationFact>,
}

impl Document {
    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn n_mentions(&self) -> usize {
        self.entities.iter().map(|e| e.mentions.len()).sum()
    }

    /// Length of the token sequence once markers are inserted.
    pub fn marked_len(&self) -> usize {
        self.n_tokens() + 2 * self.n_mentions()
    }

    /// Relations labelled for the ordered pair `(h, t)`.
    pub fn positives(&self, h: usize, t: usize) -> BTreeSet<usize> {
        self.facts
            .iter()
            .filter(|f| f.head == h && f.tail == t)
            .map(|f| f.relation)
            .collect()
    }

    /// Union of the evidence of every fact on `(h, t)`.
    pub fn gold_evidence(&self, h: usize, t: usize) -> BTreeSet<usize> {
        self.facts
            .iter()
            .filter(|f| f.head == h && f.tail == t)
            .flat_map(|f| f.evidence.iter().copied())
            .collect()
    }

    /// Positive pairs mapped to their relation sets.
    pub fn positive_pairs(&self) -> BTreeMap<(usize, usize), BTreeSet<usize>> {
        let mut out: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for f in &self.facts {
            out.entry((f.head, f.tail)).or_default().insert(f.relation);
        }
        out
    }

    /// Checks every structural invariant; `n_relations` bounds fact labels.
    pub fn validate(&self, n_relations: usize) -> Result<()> {
        let id = &self.doc_id;
        if self.sentences.is_empty() {
            return Err(Error::schema(id, "sents", "document has no sentences"));
        }
        for (i, s) in self.sentences.iter().enumerate() {
            if s.index != i {
                return Err(Error::schema(id, format!("sents[{i}]"), format!("index {} is not contiguous", s.index)));
            }
            if s.tokens.is_empty() {
                return Err(Error::schema(id, format!("sents[{i}]"), "empty sentence"));
            }
        }
        for (ei, e) in self.entities.iter().enumerate() {
            if e.id != ei {
                return Err(Error::schema(id, format!("vertexSet[{ei}]"), format!("entity id {} out of order", e.id)));
            }
            if e.mentions.is_empty() {
                return Err(Error::schema(id, format!("vertexSet[{ei}]"), "entity has no mentions"));
            }
            for (mi, m) in e.mentions.iter().enumerate() {
                let field = format!("vertexSet[{ei}][{mi}]");
                if m.entity_id != ei {
                    return Err(Error::schema(id, field, format!("mention carries entity id {}", m.entity_id)));
                }
                let Some(sent) = self.sentences.get(m.sent_id) else {
                    return Err(Error::schema(id, field + ".sent_id", format!("unknown sentence id {}", m.sent_id)));
                };
                if m.start >= m.end || m.end > sent.tokens.len() {
                    return Err(Error::schema(
                        id,
                        field + ".pos",
                        format!(
                            "entity {ei}: offsets [{}, {}) out of range for sentence {} of length {}",
                            m.start,
                            m.end,
                            m.sent_id,
                            sent.tokens.len()
                        ),
                    ));
                }
            }
        }
        for (fi, f) in self.facts.iter().enumerate() {
            let field = format!("labels[{fi}]");
            if f.head >= self.entities.len() || f.tail >= self.entities.len() {
                return Err(Error::schema(id, field, format!("entity index out of range ({}, {})", f.head, f.tail)));
            }
            if f.head == f.tail {
                return Err(Error::schema(id, field, "head equals tail"));
            }
            if f.relation >= n_relations {
                return Err(Error::schema(id, field + ".r", format!("relation {} out of range", f.relation)));
            }
            if let Some(&bad) = f.evidence.iter().find(|&&s| s >= self.sentences.len()) {
                return Err(Error::schema(id, field + ".evidence", format!("unknown sentence id {bad}")));
            }
        }
        Ok(())
    }
}

/// The relation label set; NA is implicit and never a member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    names: Vec<String>,
}

impl RelationVocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("relation vocabulary is empty".into()));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::Config("duplicate relation names".into()));
        }
        Ok(RelationVocab { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MARKER: usize = 2;
pub const MARKER_TOKEN: &str = "*";

/// Word-level token ids. Ids 0..3 are reserved for padding, unknown words
/// and the mention marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec!["[PAD]".to_string(), "[UNK]".to_string(), "[MARKER]".to_string()];
        let uniq: BTreeSet<String> = words.into_iter().collect();
        tokens.extend(uniq);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TokenVocab { tokens, index }
    }

    /// Every word of every sentence in `docs`.
    pub fn build(docs: &[Document]) -> Self {
        TokenVocab::from_tokens(
            docs.iter()
                .flat_map(|d| d.sentences.iter().flat_map(|s| s.tokens.iter().cloned())),
        )
    }

    /// Restores a vocabulary from its full token list (reserved ids included).
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::Checkpoint("token list lacks reserved ids".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(TokenVocab { tokens, index })
    }

    pub fn as_list(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) if i > MARKER => i,
            _ => UNK,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Entity surface name mapped to alternative (coreferent) surface strings.
pub type AliasLexicon = BTreeMap<String, Vec<String>>;

/// Every ordered pair of distinct entities, head-major.
pub fn candidate_pairs(doc: &Document) -> Vec<(usize, usize)> {
    let e = doc.entities.len();
    let mut out = Vec::with_capacity(e.saturating_sub(1) * e);
    for h in 0..e {
        for t in 0..e {
            if h != t {
                out.push((h, t));
            }
        }
    }
    out
}

/// Rejects documents whose marked sequence exceeds `max_len`.
pub fn check_max_len(docs: &[Document], max_len: usize) -> Result<()> {
    for d in docs {
        let len = d.marked_len();
        if len > max_len {
            return Err(Error::schema(
                &d.doc_id,
                "sents",
                format!("marked length {len} exceeds encoder max_len {max_len}"),
            ));
        }
    }
    Ok(())
}

/// Half-open token range of each sentence in marked coordinates.
pub type SentSpans = Vec<Range<usize>>;
