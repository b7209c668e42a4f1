use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AliasLexicon, Document, Entity, Mention, RelationFact, RelationVocab, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RawDoc {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<RawLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predicted_evidence: Option<Vec<PairEvidence>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predictions: Option<Vec<PairPrediction>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    name: String,
    sent_id: usize,
    pos: Vec<usize>,
    #[serde(rename = "type")]
    etype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLabel {
    h: usize,
    t: usize,
    r: String,
    #[serde(default)]
    evidence: Vec<usize>,
}

/// Evidence sentences selected for one ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvidence {
    pub h: usize,
    pub t: usize,
    pub evidence: Vec<usize>,
}

/// A predicted relation for one ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub h: usize,
    pub t: usize,
    pub r: String,
    pub score: f64,
}

/// Optional per-document output arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DocAnnotations {
    pub predicted_evidence: Option<Vec<PairEvidence>>,
    pub predictions: Option<Vec<PairPrediction>>,
}

fn raw_docs(bytes: &[u8]) -> Result<Vec<RawDoc>> {
    let values: Vec<serde_json::Value> = serde_json::from_slice(bytes)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let title = v
                .get("title")
                .and_then(|t| t.as_str())
                .map_or_else(|| format!("#{i}"), str::to_string);
            serde_json::from_value::<RawDoc>(v).map_err(|e| Error::schema(&title, "document", e.to_string()))
        })
        .collect()
}

fn convert(raw: RawDoc, vocab: &RelationVocab) -> Result<(Document, DocAnnotations)> {
    let title = raw.title;
    let sentences = raw
        .sents
        .into_iter()
        .enumerate()
        .map(|(index, tokens)| Sentence { index, tokens })
        .collect();
    let mut entities = Vec::with_capacity(raw.vertex_set.len());
    for (ei, cluster) in raw.vertex_set.into_iter().enumerate() {
        let mut mentions = Vec::with_capacity(cluster.len());
        for (mi, m) in cluster.into_iter().enumerate() {
            if m.pos.len() != 2 {
                return Err(Error::schema(
                    &title,
                    format!("vertexSet[{ei}][{mi}].pos"),
                    format!("entity {ei}: expected [start, end], got {:?}", m.pos),
                ));
            }
            mentions.push(Mention {
                entity_id: ei,
                sent_id: m.sent_id,
                start: m.pos[0],
                end: m.pos[1],
                name: m.name,
                etype: m.etype,
            });
        }
        entities.push(Entity { id: ei, mentions });
    }
    let mut facts = Vec::with_capacity(raw.labels.len());
    for (li, l) in raw.labels.into_iter().enumerate() {
        let relation = vocab
            .index_of(&l.r)
            .ok_or_else(|| Error::schema(&title, format!("labels[{li}].r"), format!("unknown relation {:?}", l.r)))?;
        facts.push(RelationFact { head: l.h, tail: l.t, relation, evidence: l.evidence });
    }
    let doc = Document { doc_id: title, sentences, entities, facts };
    doc.validate(vocab.len())?;
    let ann = DocAnnotations { predicted_evidence: raw.predicted_evidence, predictions: raw.predictions };
    Ok((doc, ann))
}

/// Parses a DocRED-layout JSON array. The relation vocabulary is every
/// label name in the file, sorted.
pub fn parse_corpus(bytes: &[u8]) -> Result<(Vec<Document>, RelationVocab)> {
    let raws = raw_docs(bytes)?;
    let names: BTreeSet<String> = raws.iter().flat_map(|d| d.labels.iter().map(|l| l.r.clone())).collect();
    if names.is_empty() {
        return Err(Error::Config("corpus carries no relation labels; supply a relation vocabulary".into()));
    }
    let vocab = RelationVocab::new(names.into_iter().collect())?;
    let docs = raws
        .into_iter()
        .map(|r| convert(r, &vocab).map(|(d, _)| d))
        .collect::<Result<_>>()?;
    Ok((docs, vocab))
}

/// Parses against a fixed relation vocabulary, also returning any
/// prediction arrays present in the file.
pub fn parse_corpus_with(bytes: &[u8], vocab: &RelationVocab) -> Result<Vec<(Document, DocAnnotations)>> {
    raw_docs(bytes)?.into_iter().map(|r| convert(r, vocab)).collect()
}

fn to_raw(doc: &Document, vocab: &RelationVocab, ann: Option<&DocAnnotations>) -> RawDoc {
    RawDoc {
        title: doc.doc_id.clone(),
        sents: doc.sentences.iter().map(|s| s.tokens.clone()).collect(),
        vertex_set: doc
            .entities
            .iter()
            .map(|e| {
                e.mentions
                    .iter()
                    .map(|m| RawMention {
                        name: m.name.clone(),
                        sent_id: m.sent_id,
                        pos: vec![m.start, m.end],
                        etype: m.etype.clone(),
                    })
                    .collect()
            })
            .collect(),
        labels: doc
            .facts
            .iter()
            .map(|f| RawLabel {
                h: f.head,
                t: f.tail,
                r: vocab.name(f.relation).to_string(),
                evidence: f.evidence.clone(),
            })
            .collect(),
        predicted_evidence: ann.and_then(|a| a.predicted_evidence.clone()),
        predictions: ann.and_then(|a| a.predictions.clone()),
    }
}

pub fn write_corpus(docs: &[Document], vocab: &RelationVocab) -> Result<String> {
    let raws: Vec<RawDoc> = docs.iter().map(|d| to_raw(d, vocab, None)).collect();
    Ok(serde_json::to_string(&raws)?)
}

/// Like [`write_corpus`], adding `predicted_evidence` / `predictions`
/// arrays; `annotations` is parallel to `docs`.
pub fn write_corpus_annotated(
    docs: &[Document],
    vocab: &RelationVocab,
    annotations: &[DocAnnotations],
) -> Result<String> {
    if annotations.len() != docs.len() {
        return Err(Error::Config(format!(
            "{} annotation sets for {} documents",
            annotations.len(),
            docs.len()
        )));
    }
    let raws: Vec<RawDoc> = docs
        .iter()
        .zip(annotations)
        .map(|(d, a)| to_raw(d, vocab, Some(a)))
        .collect();
    Ok(serde_json::to_string(&raws)?)
}

pub fn read_alias_lexicon(bytes: &[u8]) -> Result<AliasLexicon> {
    Ok(serde_json::from_slice(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_DOC: &str = r#"[{"title":"t0","sents":[["Alpha","met","Beta","."]],
        "vertexSet":[[{"name":"Alpha","sent_id":0,"pos":[0,1],"type":"PER"}],
                     [{"name":"Beta","sent_id":0,"pos":[2,3],"type":"PER"}]],
        "labels":[{"h":0,"t":1,"r":"P1","evidence":[0]}]}]"#;

    #[test]
    fn parses_single_document() {
        let (docs, vocab) = parse_corpus(ONE_DOC.as_bytes()).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(vocab.names(), ["P1"]);
        let d = &docs[0];
        assert_eq!((d.sentences.len(), d.entities.len(), d.facts.len()), (1, 2, 1));
        assert_eq!(d.facts[0].evidence, vec![0]);
    }

    #[test]
    fn offset_error_names_entity() {
        let bad = ONE_DOC.replace("\"pos\":[2,3]", "\"pos\":[2,7]");
        let err = parse_corpus(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("t0") && err.contains("entity 1") && err.contains("pos"), "{err}");
    }

    #[test]
    fn missing_field_names_document() {
        let bad = ONE_DOC.replace("\"sents\"", "\"sentences\"");
        let err = parse_corpus(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("t0") && err.contains("sents"), "{err}");
    }

    #[test]
    fn unknown_sentence_rejected() {
        let bad = ONE_DOC.replace("\"sent_id\":0,\"pos\":[2,3]", "\"sent_id\":4,\"pos\":[2,3]");
        let err = parse_corpus(bad.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("sent_id"), "{err}");
    }

    #[test]
    fn round_trip_preserves_documents() {
        let (docs, vocab) = parse_corpus(ONE_DOC.as_bytes()).unwrap();
        let text = write_corpus(&docs, &vocab).unwrap();
        let (again, vocab2) = parse_corpus(text.as_bytes()).unwrap();
        assert_eq!(docs, again);
        assert_eq!(vocab, vocab2);
    }

    #[test]
    fn annotations_round_trip() {
        let (docs, vocab) = parse_corpus(ONE_DOC.as_bytes()).unwrap();
        let ann = DocAnnotations {
            predicted_evidence: Some(vec![PairEvidence { h: 0, t: 1, evidence: vec![0] }]),
            predictions: Some(vec![PairPrediction { h: 0, t: 1, r: "P1".into(), score: 0.75 }]),
        };
        let text = write_corpus_annotated(&docs, &vocab, std::slice::from_ref(&ann)).unwrap();
        let back = parse_corpus_with(text.as_bytes(), &vocab).unwrap();
        assert_eq!(back[0].1, ann);
        assert_eq!(back[0].0, docs[0]);
    }
}
