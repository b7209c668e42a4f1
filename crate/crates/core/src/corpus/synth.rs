//! Deterministic template corpora for desk-scale training.
//!
//! Each document is a shuffle of a few independent slots. A slot either
//! plants one relation fact through a template or adds a distractor
//! sentence about unrelated entities:
//!
//! * intra:   `* H * r_k * T * .`
//! * coref:   `* H * is the kindX .` … `the kindX r_k * T * .`
//! * bridge:  `* H * a_k * B * .` … `* B * b_k * T * .`
//!
//! Slot sentences keep their relative order; slots interleave at random.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AliasLexicon, Document, Entity, Mention, RelationFact, RelationVocab, Sentence};
use crate::diffmath::{prng, Prng};
use crate::error::{Error, Result};

const N_KINDS: usize = 6;
const N_FILLERS: usize = 6;
const MIN_NAMES: usize = 24;
const FIXED_WORDS: usize = 3; // "the", "is", "."

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMix {
    pub intra: f64,
    pub coref: f64,
    pub bridge: f64,
    pub distractor: f64,
}

impl CategoryMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.intra, self.coref, self.bridge, self.distractor];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("category mix weights must be non-negative".into()));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("category mix sums to {total}, expected 1")));
        }
        Ok(())
    }
}

impl Default for CategoryMix {
    fn default() -> Self {
        CategoryMix { intra: 0.4, coref: 0.2, bridge: 0.2, distractor: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub vocab_size: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub mix: CategoryMix,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_docs: 300, vocab_size: 80, n_relations: 4, seed: 0, mix: CategoryMix::default() }
    }
}

impl SynthConfig {
    /// Word types the templates need besides entity names.
    pub fn reserved_words(n_relations: usize) -> usize {
        FIXED_WORDS + 3 * n_relations + N_KINDS + N_FILLERS
    }
}

/// The template that planted a fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    Intra,
    Coref,
    Bridge,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub docs: Vec<Document>,
    pub relations: RelationVocab,
    pub lexicon: AliasLexicon,
    /// Template of each fact, parallel to `docs[i].facts`.
    pub templates: Vec<Vec<Template>>,
}

#[derive(Clone, Copy)]
enum Slot {
    Fact(Template, usize),
    Distractor,
}

struct Words {
    names: Vec<String>,
}

fn name_word(i: usize) -> String {
    format!("Ent{i}")
}

fn kind_word(k: usize) -> String {
    format!("kind{k}")
}

fn filler(rng: &mut Prng) -> String {
    format!("w{}", rng.gen_range(0..N_FILLERS))
}

fn alias_of(name_idx: usize) -> String {
    format!("the {}", kind_word(name_idx % N_KINDS))
}

/// A sentence under construction: tokens plus `(slot entity, start, end)`.
#[derive(Default)]
struct Draft {
    tokens: Vec<String>,
    mentions: Vec<(usize, usize, usize)>,
}

impl Draft {
    fn word(&mut self, w: impl Into<String>) -> &mut Self {
        self.tokens.push(w.into());
        self
    }

    fn maybe_filler(&mut self, rng: &mut Prng, p: f64) -> &mut Self {
        if rng.gen_bool(p) {
            let w = filler(rng);
            self.tokens.push(w);
        }
        self
    }

    fn entity(&mut self, slot_entity: usize, name: &str) -> &mut Self {
        let start = self.tokens.len();
        self.tokens.push(name.to_string());
        self.mentions.push((slot_entity, start, start + 1));
        self
    }
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.mix.validate()?;
    if cfg.n_relations == 0 {
        return Err(Error::Config("n_relations must be at least 1".into()));
    }
    let reserved = SynthConfig::reserved_words(cfg.n_relations);
    if cfg.vocab_size < reserved + MIN_NAMES {
        return Err(Error::Config(format!(
            "vocab_size {} too small: templates need {} reserved words plus {} entity names",
            cfg.vocab_size, reserved, MIN_NAMES
        )));
    }
    let words = Words { names: (0..cfg.vocab_size - reserved).map(name_word).collect() };
    let relations = RelationVocab::new((0..cfg.n_relations).map(|k| format!("R{k}")).collect())?;

    let mut rng = prng(cfg.seed);
    let mut lexicon = AliasLexicon::new();
    let mut docs = Vec::with_capacity(cfg.n_docs);
    let mut templates = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let (doc, tpl) = synth_doc(&mut rng, cfg, &words, &mut lexicon, format!("synth-{}-{i:04}", cfg.seed))?;
        docs.push(doc);
        templates.push(tpl);
    }
    Ok(SynthCorpus { docs, relations, lexicon, templates })
}

fn pick_slot(rng: &mut Prng, mix: &CategoryMix, n_relations: usize) -> Slot {
    let u: f64 = rng.gen();
    let k = rng.gen_range(0..n_relations);
    if u < mix.intra {
        Slot::Fact(Template::Intra, k)
    } else if u < mix.intra + mix.coref {
        Slot::Fact(Template::Coref, k)
    } else if u < mix.intra + mix.coref + mix.bridge {
        Slot::Fact(Template::Bridge, k)
    } else {
        Slot::Distractor
    }
}

fn synth_doc(
    rng: &mut Prng,
    cfg: &SynthConfig,
    words: &Words,
    lexicon: &mut AliasLexicon,
    title: String,
) -> Result<(Document, Vec<Template>)> {
    let n_slots = rng.gen_range(2..=4);
    let slots: Vec<Slot> = (0..n_slots).map(|_| pick_slot(rng, &cfg.mix, cfg.n_relations)).collect();

    // Name assignment: coref heads take distinct kinds; every other entity
    // avoids those kinds so an alias matches only its own entity.
    let n_coref = slots.iter().filter(|s| matches!(s, Slot::Fact(Template::Coref, _))).count();
    let mut pool: Vec<usize> = (0..words.names.len()).collect();
    pool.shuffle(rng);
    let mut coref_kinds = BTreeSet::new();
    let mut coref_names = Vec::new();
    for &n in &pool {
        if coref_names.len() == n_coref {
            break;
        }
        if coref_kinds.insert(n % N_KINDS) {
            coref_names.push(n);
        }
    }
    let others: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|n| !coref_kinds.contains(&(n % N_KINDS)) && !coref_names.contains(n))
        .collect();
    let mut other_names = others.into_iter();
    let mut coref_iter = coref_names.into_iter();

    // Name index of every entity, in creation order.
    let mut entity_names: Vec<usize> = Vec::new();
    fn push(names: &mut Vec<usize>, name: usize) -> usize {
        names.push(name);
        names.len() - 1
    }
    let mut next_other = || other_names.next().ok_or_else(|| Error::Config("ran out of entity names".into()));

    // Per slot: its sentences (with entity ids) and an optional fact.
    let mut slot_sents: Vec<Vec<Draft>> = Vec::with_capacity(slots.len());
    let mut slot_facts: Vec<Option<(usize, usize, usize, Template)>> = Vec::with_capacity(slots.len());
    for slot in &slots {
        match *slot {
            Slot::Fact(Template::Intra, k) => {
                let (h, t) = (push(&mut entity_names, next_other()?), push(&mut entity_names, next_other()?));
                let mut s = Draft::default();
                s.maybe_filler(rng, 0.3)
                    .entity(h, &words.names[entity_names[h]])
                    .maybe_filler(rng, 0.3)
                    .word(format!("r{k}"))
                    .entity(t, &words.names[entity_names[t]])
                    .maybe_filler(rng, 0.3)
                    .word(".");
                slot_sents.push(vec![s]);
                slot_facts.push(Some((h, t, k, Template::Intra)));
            }
            Slot::Fact(Template::Coref, k) => {
                let hn = coref_iter.next().ok_or_else(|| Error::Config("ran out of alias kinds".into()))?;
                let (h, t) = (push(&mut entity_names, hn), push(&mut entity_names, next_other()?));
                let alias = alias_of(hn);
                let aliases = lexicon.entry(words.names[hn].clone()).or_default();
                if !aliases.contains(&alias) {
                    aliases.push(alias.clone());
                }
                let mut s1 = Draft::default();
                s1.maybe_filler(rng, 0.3).entity(h, &words.names[hn]).word("is");
                for w in alias.split(' ') {
                    s1.word(w);
                }
                s1.word(".");
                let mut s2 = Draft::default();
                for w in alias.split(' ') {
                    s2.word(w);
                }
                s2.maybe_filler(rng, 0.3)
                    .word(format!("r{k}"))
                    .entity(t, &words.names[entity_names[t]])
                    .word(".");
                slot_sents.push(vec![s1, s2]);
                slot_facts.push(Some((h, t, k, Template::Coref)));
            }
            Slot::Fact(Template::Bridge, k) => {
                let h = push(&mut entity_names, next_other()?);
                let b = push(&mut entity_names, next_other()?);
                let t = push(&mut entity_names, next_other()?);
                let mut s1 = Draft::default();
                s1.maybe_filler(rng, 0.3)
                    .entity(h, &words.names[entity_names[h]])
                    .word(format!("a{k}"))
                    .entity(b, &words.names[entity_names[b]])
                    .word(".");
                let mut s2 = Draft::default();
                s2.entity(b, &words.names[entity_names[b]])
                    .word(format!("b{k}"))
                    .entity(t, &words.names[entity_names[t]])
                    .maybe_filler(rng, 0.3)
                    .word(".");
                slot_sents.push(vec![s1, s2]);
                slot_facts.push(Some((h, t, k, Template::Bridge)));
            }
            Slot::Distractor => {
                let mut s = Draft::default();
                let a = push(&mut entity_names, next_other()?);
                s.word(filler(rng)).entity(a, &words.names[entity_names[a]]).word(filler(rng));
                if rng.gen_bool(0.7) {
                    let b = push(&mut entity_names, next_other()?);
                    s.word(filler(rng)).entity(b, &words.names[entity_names[b]]);
                }
                s.word(".");
                slot_sents.push(vec![s]);
                slot_facts.push(None);
            }
        }
    }

    // Interleave slots, preserving each slot's internal sentence order.
    let mut remaining: Vec<usize> = slot_sents.iter().map(Vec::len).collect();
    let mut cursor = vec![0usize; slot_sents.len()];
    let mut order: Vec<(usize, usize)> = Vec::new();
    while remaining.iter().any(|&r| r > 0) {
        let live: Vec<usize> = (0..remaining.len()).filter(|&i| remaining[i] > 0).collect();
        let s = *live.choose(rng).expect("non-empty");
        order.push((s, cursor[s]));
        cursor[s] += 1;
        remaining[s] -= 1;
    }
    let mut sent_index = vec![Vec::new(); slot_sents.len()];
    let mut sentences = Vec::with_capacity(order.len());
    let mut entities: Vec<Entity> = (0..entity_names.len()).map(|id| Entity { id, mentions: vec![] }).collect();
    for (n, &(s, j)) in order.iter().enumerate() {
        let draft = &slot_sents[s][j];
        for &(e, start, end) in &draft.mentions {
            entities[e].mentions.push(Mention {
                entity_id: e,
                sent_id: n,
                start,
                end,
                name: words.names[entity_names[e]].clone(),
                etype: "MISC".into(),
            });
        }
        sentences.push(Sentence { index: n, tokens: draft.tokens.clone() });
        sent_index[s].push(n);
    }

    let mut facts = Vec::new();
    let mut tpls = Vec::new();
    for (s, fact) in slot_facts.iter().enumerate() {
        let Some((h, t, k, tpl)) = *fact else { continue };
        let evidence = match tpl {
            Template::Intra => vec![sent_index[s][0]],
            Template::Coref => vec![sent_index[s][1]],
            Template::Bridge => vec![sent_index[s][0], sent_index[s][1]],
        };
        facts.push(RelationFact { head: h, tail: t, relation: k, evidence });
        tpls.push(tpl);
    }
    let doc = Document { doc_id: title, sentences, entities, facts };
    doc.validate(cfg.n_relations)?;
    Ok((doc, tpls))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_corpus;

    fn cfg(mix: CategoryMix, seed: u64) -> SynthConfig {
        SynthConfig { n_docs: 10, vocab_size: 60, n_relations: 4, seed, mix }
    }

    fn only(t: &str) -> CategoryMix {
        let mut m = CategoryMix { intra: 0.0, coref: 0.0, bridge: 0.0, distractor: 0.0 };
        match t {
            "intra" => m.intra = 1.0,
            "coref" => m.coref = 1.0,
            "bridge" => m.bridge = 1.0,
            _ => m.distractor = 1.0,
        }
        m
    }

    #[test]
    fn intra_evidence_is_the_shared_sentence() {
        let c = synth_corpus(&cfg(only("intra"), 3)).unwrap();
        for d in &c.docs {
            assert!(!d.facts.is_empty());
            for f in &d.facts {
                assert_eq!(f.evidence.len(), 1);
                let s = f.evidence[0];
                assert!(d.entities[f.head].sentences().contains(&s));
                assert!(d.entities[f.tail].sentences().contains(&s));
            }
        }
    }

    #[test]
    fn bridge_evidence_has_two_sentences_without_both_ends() {
        let c = synth_corpus(&cfg(only("bridge"), 4)).unwrap();
        for d in &c.docs {
            for f in &d.facts {
                assert_eq!(f.evidence.len(), 2);
                for s in &f.evidence {
                    let both = d.entities[f.head].sentences().contains(s) && d.entities[f.tail].sentences().contains(s);
                    assert!(!both);
                }
            }
        }
    }

    #[test]
    fn coref_heads_are_in_lexicon() {
        let c = synth_corpus(&cfg(only("coref"), 5)).unwrap();
        for (d, tpls) in c.docs.iter().zip(&c.templates) {
            for (f, t) in d.facts.iter().zip(tpls) {
                assert_eq!(*t, Template::Coref);
                let name = &d.entities[f.head].mentions[0].name;
                assert!(c.lexicon.contains_key(name));
            }
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_corpus(&cfg(CategoryMix::default(), 7)).unwrap();
        let b = synth_corpus(&cfg(CategoryMix::default(), 7)).unwrap();
        assert_eq!(
            write_corpus(&a.docs, &a.relations).unwrap(),
            write_corpus(&b.docs, &b.relations).unwrap()
        );
        assert_eq!(a.lexicon, b.lexicon);
    }

    #[test]
    fn small_vocab_is_a_config_error() {
        let mut c = cfg(CategoryMix::default(), 0);
        c.vocab_size = 20;
        assert!(matches!(synth_corpus(&c), Err(Error::Config(_))));
    }

    #[test]
    fn mix_must_sum_to_one() {
        let mut c = cfg(CategoryMix::default(), 0);
        c.mix.intra = 0.9;
        assert!(synth_corpus(&c).is_err());
    }
}
