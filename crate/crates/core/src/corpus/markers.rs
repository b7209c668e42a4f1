use std::cmp::Reverse;
use std::ops::Range;

use super::{Document, TokenVocab, MARKER};

/// Token ids of a document with a marker before and after every mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub tokens: Vec<usize>,
    /// Position of each mention's leading marker, indexed `[entity][mention]`.
    pub mention_start_pos: Vec<Vec<usize>>,
    /// Per-sentence token range; markers fall inside their mention's sentence.
    pub sent_spans: Vec<Range<usize>>,
}

impl MarkedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Inserts mention markers.
///
/// At a shared boundary, closing markers come before opening ones. Mentions
/// opening at the same token open outermost first, then by entity id;
/// closing order mirrors opening order.
pub fn insert_markers(doc: &Document, vocab: &TokenVocab) -> MarkedSequence {
    let mut tokens = Vec::with_capacity(doc.marked_len());
    let mut mention_start_pos: Vec<Vec<usize>> =
        doc.entities.iter().map(|e| vec![0; e.mentions.len()]).collect();
    let mut sent_spans = Vec::with_capacity(doc.sentences.len());

    for sent in &doc.sentences {
        let begin = tokens.len();
        // (start, Reverse(end), entity, mention) is the opening order.
        let mut local: Vec<(usize, Reverse<usize>, usize, usize)> = doc
            .entities
            .iter()
            .flat_map(|e| {
                e.mentions
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.sent_id == sent.index)
                    .map(move |(mi, m)| (m.start, Reverse(m.end), e.id, mi))
            })
            .collect();
        local.sort();
        for p in 0..=sent.tokens.len() {
            for &(_, Reverse(end), _, _) in local.iter().rev() {
                if end == p {
                    tokens.push(MARKER);
                }
            }
            if p == sent.tokens.len() {
                break;
            }
            for &(start, _, e, mi) in &local {
                if start == p {
                    mention_start_pos[e][mi] = tokens.len();
                    tokens.push(MARKER);
                }
            }
            tokens.push(vocab.id(&sent.tokens[p]));
        }
        sent_spans.push(begin..tokens.len());
    }
    MarkedSequence { tokens, mention_start_pos, sent_spans }
}
