//! Candidate generation and the tagging, span and relation heads.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AnnotatedDocument;
use crate::encoder::Projection;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Graph, Mat, NodeId};

/// Class index of `NoneEntity` in the span head output.
pub const NONE_ENTITY: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("span {start}..{end} is wider than the threshold {max_width}")]
    TooWide { start: usize, end: usize, max_width: usize },
    #[error("span {start}..{end} lies outside a sentence of {len} tokens")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("relation threshold {0} outside (0, 1)")]
    Threshold(f64),
}

/// A candidate span covering tokens `start..start + width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanCandidate {
    pub start: usize,
    pub width: usize,
}

impl SpanCandidate {
    pub fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            width: end - start,
        }
    }

    /// Exclusive end.
    pub fn end(&self) -> usize {
        self.start + self.width
    }

    /// Index of the last token.
    pub fn last(&self) -> usize {
        self.end() - 1
    }
}

/// Every span of width at most `min(max_width, n)`, ordered by start then width.
pub fn enumerate_spans(n: usize, max_width: usize) -> Vec<SpanCandidate> {
    let mut out = Vec::new();
    for start in 0..n {
        for width in 1..=max_width.min(n - start) {
            out.push(SpanCandidate { start, width });
        }
    }
    out
}

/// `Σ_{w=1..min(ε,n)} (n − w + 1)`
pub fn span_count(n: usize, max_width: usize) -> usize {
    (1..=max_width.min(n)).map(|w| n - w + 1).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Span width threshold ε.
    pub max_width: usize,
    /// Width embedding dimension d_w.
    pub width_dim: usize,
    /// Relation activation threshold α.
    pub alpha: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            max_width: 10,
            width_dim: 150,
            alpha: 0.4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(HeadError::Threshold(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `W_L, b_L`; absent when the tagging head is removed.
    pub tag: Option<Projection>,
    /// `ε × d_w`, row `w − 1` embeds width `w`. Shared by spans and relations.
    pub width_table: ParamId,
    pub span: Projection,
    /// Absent when the schema has no relation types.
    pub relation: Option<Projection>,
}

impl HeadParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        cfg: &HeadConfig,
        dim: usize,
        labels: Option<usize>,
        entity_types: usize,
        relation_types: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let span_dim = 2 * dim + cfg.width_dim;
        let tag = labels.map(|l| Projection::init(store, "heads/tag", dim, l, rng));
        let width_table = store.weight("heads/width_table", cfg.max_width, cfg.width_dim, rng);
        let span = Projection::init(store, "heads/span", span_dim, entity_types + 1, rng);
        let relation = (relation_types > 0)
            .then(|| Projection::init(store, "heads/relation", 2 * span_dim + dim, relation_types, rng));
        Self {
            tag,
            width_table,
            span,
            relation,
        }
    }
}

/// `softmax(H_L W_L + b_L)` row by row.
pub fn tag_probs(g: &mut Graph, bound: &Bound, tag: &Projection, h_l: NodeId) -> NodeId {
    let logits = tag.apply(g, bound, h_l);
    g.softmax_rows(logits)
}

fn check_spans(spans: &[SpanCandidate], len: usize, max_width: usize) -> Result<(), HeadError> {
    for s in spans {
        if s.width == 0 || s.end() > len {
            return Err(HeadError::OutOfRange {
                start: s.start,
                end: s.end(),
                len,
            });
        }
        if s.width > max_width {
            return Err(HeadError::TooWide {
                start: s.start,
                end: s.end(),
                max_width,
            });
        }
    }
    Ok(())
}

/// One row `[h_start; h_last; W_width]` per span.
pub fn span_representation(
    g: &mut Graph,
    bound: &Bound,
    width_table: ParamId,
    h: NodeId,
    spans: &[SpanCandidate],
) -> Result<NodeId, HeadError> {
    let max_width = g.value(bound[width_table]).nrows();
    check_spans(spans, g.value(h).nrows(), max_width)?;
    let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
    let lasts: Vec<usize> = spans.iter().map(|s| s.last()).collect();
    let widths: Vec<usize> = spans.iter().map(|s| s.width - 1).collect();
    let a = g.gather_rows(h, &starts);
    let b = g.gather_rows(h, &lasts);
    let w = g.gather_rows(bound[width_table], &widths);
    Ok(g.concat_cols(&[a, b, w]))
}

/// Posterior over `NoneEntity` followed by the schema's entity types.
pub fn span_probs(
    g: &mut Graph,
    bound: &Bound,
    params: &HeadParams,
    h_e: NodeId,
    spans: &[SpanCandidate],
) -> Result<NodeId, HeadError> {
    let reps = span_representation(g, bound, params.width_table, h_e, spans)?;
    let logits = params.span.apply(g, bound, reps);
    Ok(g.softmax_rows(logits))
}

/// A span the span head assigns to an entity type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanPrediction {
    pub span: SpanCandidate,
    /// Index into the schema's entity types.
    pub entity_type: usize,
    pub score: f64,
}

/// The entity set `S_e`: spans whose argmax class is not `NoneEntity`.
/// Ties resolve to the lowest class index.
pub fn select_entities(probs: &Mat, spans: &[SpanCandidate]) -> Vec<SpanPrediction> {
    let mut out = Vec::new();
    for (row, span) in probs.rows().into_iter().zip(spans) {
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        if best != NONE_ENTITY {
            out.push(SpanPrediction {
                span: *span,
                entity_type: best - 1,
                score: row[best],
            });
        }
    }
    out
}

/// An ordered pair of distinct spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationCandidate {
    pub head: SpanCandidate,
    pub tail: SpanCandidate,
}

/// Every ordered pair of distinct spans from `entities`.
pub fn build_relation_candidates(entities: &[SpanCandidate]) -> Vec<RelationCandidate> {
    let mut out = Vec::new();
    for (i, &head) in entities.iter().enumerate() {
        for (j, &tail) in entities.iter().enumerate() {
            if i != j && head != tail {
                out.push(RelationCandidate { head, tail });
            }
        }
    }
    out
}

/// Rows strictly between the two spans; empty when they touch or overlap.
pub fn context_range(a: SpanCandidate, b: SpanCandidate) -> (usize, usize) {
    let (first, second) = if a.start <= b.start { (a, b) } else { (b, a) };
    if first.end() < second.start {
        (first.end(), second.start)
    } else {
        (0, 0)
    }
}

/// One row `[E_head; E_tail; C_r]` per candidate, built over `h_r`.
pub fn relation_representation(
    g: &mut Graph,
    bound: &Bound,
    width_table: ParamId,
    h_r: NodeId,
    candidates: &[RelationCandidate],
) -> Result<NodeId, HeadError> {
    let heads: Vec<SpanCandidate> = candidates.iter().map(|c| c.head).collect();
    let tails: Vec<SpanCandidate> = candidates.iter().map(|c| c.tail).collect();
    let ranges: Vec<(usize, usize)> = candidates.iter().map(|c| context_range(c.head, c.tail)).collect();
    let e1 = span_representation(g, bound, width_table, h_r, &heads)?;
    let e2 = span_representation(g, bound, width_table, h_r, &tails)?;
    let ctx = g.max_pool_rows(h_r, &ranges);
    Ok(g.concat_cols(&[e1, e2, ctx]))
}

/// Independent sigmoid scores per relation type.
pub fn relation_probs(
    g: &mut Graph,
    bound: &Bound,
    params: &HeadParams,
    relation: &Projection,
    h_r: NodeId,
    candidates: &[RelationCandidate],
) -> Result<NodeId, HeadError> {
    let reps = relation_representation(g, bound, params.width_table, h_r, candidates)?;
    let logits = relation.apply(g, bound, reps);
    Ok(g.sigmoid(logits))
}

/// Relation types with score `≥ alpha`, as `(candidate index, type index, score)`.
pub fn activated_relations(scores: &Mat, alpha: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for ((i, t), &p) in scores.indexed_iter() {
        if p >= alpha {
            out.push((i, t, p));
        }
    }
    out
}

/// Sampled negatives for one document.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Negatives {
    /// Spans matching no gold boundary; target `NoneEntity`.
    pub spans: Vec<SpanCandidate>,
    /// Ordered gold-entity pairs with no relation in that direction; target all zeros.
    pub pairs: Vec<RelationCandidate>,
}

fn take_sample<T: Copy>(pool: &[T], quota: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    if pool.len() <= quota {
        return pool.to_vec();
    }
    let mut idx = sample(rng, pool.len(), quota).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Draws up to `span_quota` negative spans and up to `pair_quota` negative
/// relation pairs without replacement, deterministically from `seed`.
pub fn sample_negatives(
    doc: &AnnotatedDocument,
    max_width: usize,
    span_quota: usize,
    pair_quota: usize,
    seed: u64,
) -> Negatives {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gold: HashSet<(usize, usize)> = doc.entities.iter().map(|e| e.span()).collect();
    let span_pool: Vec<SpanCandidate> = enumerate_spans(doc.len(), max_width)
        .into_iter()
        .filter(|s| !gold.contains(&(s.start, s.end())))
        .collect();
    let spans = take_sample(&span_pool, span_quota, &mut rng);

    // Pairs are keyed by span so that a related pair is never also a negative.
    let related: HashSet<RelationCandidate> = doc
        .relations
        .iter()
        .map(|r| RelationCandidate {
            head: SpanCandidate::new(doc.entities[r.head].start, doc.entities[r.head].end),
            tail: SpanCandidate::new(doc.entities[r.tail].start, doc.entities[r.tail].end),
        })
        .collect();
    let gold_spans: Vec<SpanCandidate> = doc
        .entities
        .iter()
        .map(|e| SpanCandidate::new(e.start, e.end))
        .filter(|s| s.width <= max_width)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pair_pool: Vec<RelationCandidate> = build_relation_candidates(&gold_spans)
        .into_iter()
        .filter(|c| !related.contains(c))
        .collect();
    let pairs = take_sample(&pair_pool, pair_quota, &mut rng);
    Negatives { spans, pairs }
}
