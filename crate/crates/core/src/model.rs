//! Assembly of the encoder and heads into a trainable model.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedDocument, TypeSchema};
use crate::encoder::{encode_stack, EncoderConfig, EncoderError, EncoderParams, Projection, StreamStates};
use crate::heads::{
    activated_relations, build_relation_candidates, enumerate_spans, relation_probs, select_entities,
    span_probs, tag_probs, HeadConfig, HeadError, HeadParams, Negatives, RelationCandidate, SpanCandidate,
};
use crate::params::{Bound, ParamStore};
use crate::tagging::{encode_labels, LabelVocabulary, TaggingError};
use crate::tape::{Graph, Mat, NodeId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error("embeddings have {rows} rows of width {cols}; expected {tokens} rows of width {dim}")]
    Embeddings {
        rows: usize,
        cols: usize,
        tokens: usize,
        dim: usize,
    },
    #[error("empty document")]
    EmptyDocument,
    #[error("empty batch")]
    EmptyBatch,
}

/// `Stacked` is the full model; `NoLabel` drops the attention stack and the
/// tagging head and feeds projected embeddings straight to the span and
/// relation heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Stacked,
    NoLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            architecture: Architecture::Stacked,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.heads.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Stacked(EncoderParams),
    NoLabel { entity: Projection, relation: Projection },
}

/// Output streams read by the heads.
struct Streams {
    label: Option<NodeId>,
    entity: NodeId,
    relation: NodeId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: TypeSchema,
    pub vocab: LabelVocabulary,
    pub input_dim: usize,
    pub store: ParamStore,
    body: Body,
    heads: HeadParams,
}

/// A document with its embeddings and training targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub doc: AnnotatedDocument,
    pub embeddings: Mat,
    /// Vocabulary index of every token's label.
    pub labels: Vec<usize>,
    /// Gold spans with their class (entity type index + 1).
    pub spans: Vec<(SpanCandidate, usize)>,
    /// Gold ordered pairs with a multi-hot relation target.
    pub pairs: Vec<(RelationCandidate, Vec<f64>)>,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub tagging: NodeId,
    pub span: NodeId,
    pub relation: NodeId,
    pub joint: NodeId,
}

/// Loss values and the instance counts used as their denominators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_l: f64,
    pub l_e: f64,
    pub l_r: f64,
    pub l_joint: f64,
    pub m_l: usize,
    pub m_e: usize,
    pub m_r: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedRelation {
    #[serde(rename = "type")]
    pub relation_type: String,
    pub head_span: [usize; 2],
    pub tail_span: [usize; 2],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prediction {
    pub entities: Vec<PredictedEntity>,
    pub relations: Vec<PredictedRelation>,
}

impl Model {
    /// Builds a freshly initialized model; parameters are drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        schema: TypeSchema,
        vocab: LabelVocabulary,
        input_dim: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = config.encoder.dim;
        let (body, labels) = match config.architecture {
            Architecture::Stacked => (
                Body::Stacked(EncoderParams::init(&mut store, &config.encoder, input_dim, &mut rng)),
                Some(vocab.len()),
            ),
            Architecture::NoLabel => (
                Body::NoLabel {
                    entity: Projection::init(&mut store, "input/entity", input_dim, dim, &mut rng),
                    relation: Projection::init(&mut store, "input/relation", input_dim, dim, &mut rng),
                },
                None,
            ),
        };
        let heads = HeadParams::init(
            &mut store,
            &config.heads,
            dim,
            labels,
            schema.entity_types.len(),
            schema.relation_types.len(),
            &mut rng,
        );
        Ok(Self {
            config,
            schema,
            vocab,
            input_dim,
            store,
            body,
            heads,
        })
    }

    fn check_embeddings(&self, embeddings: &Mat, tokens: usize) -> Result<(), ModelError> {
        if tokens == 0 {
            return Err(ModelError::EmptyDocument);
        }
        if embeddings.nrows() != tokens || embeddings.ncols() != self.input_dim {
            return Err(ModelError::Embeddings {
                rows: embeddings.nrows(),
                cols: embeddings.ncols(),
                tokens,
                dim: self.input_dim,
            });
        }
        Ok(())
    }

    /// Attaches training targets to a document. Gold spans wider than the
    /// width threshold cannot be represented and are dropped with a warning,
    /// along with the relations that use them.
    pub fn prepare(&self, doc: &AnnotatedDocument, embeddings: Mat) -> Result<Example, ModelError> {
        self.check_embeddings(&embeddings, doc.len())?;
        let labels = self.vocab.indices(&encode_labels(doc)?);
        let max_width = self.config.heads.max_width;
        let mut spans = BTreeSet::new();
        for e in &doc.entities {
            if e.width() > max_width {
                log::warn!(
                    "dropping entity {}..{} ({}): wider than {max_width} tokens",
                    e.start,
                    e.end,
                    e.entity_type
                );
                continue;
            }
            if let Some(t) = self.schema.entity_index(&e.entity_type) {
                spans.insert((SpanCandidate::new(e.start, e.end), t + 1));
            }
        }
        let mut pairs: BTreeMap<RelationCandidate, Vec<f64>> = BTreeMap::new();
        let r = self.schema.relation_types.len();
        for rel in &doc.relations {
            let (h, t) = (&doc.entities[rel.head], &doc.entities[rel.tail]);
            if h.width() > max_width || t.width() > max_width || h.span() == t.span() {
                continue;
            }
            let Some(ty) = self.schema.relation_index(&rel.relation_type) else {
                continue;
            };
            let key = RelationCandidate {
                head: SpanCandidate::new(h.start, h.end),
                tail: SpanCandidate::new(t.start, t.end),
            };
            pairs.entry(key).or_insert_with(|| vec![0.0; r])[ty] = 1.0;
        }
        Ok(Example {
            doc: doc.clone(),
            embeddings,
            labels,
            spans: spans.into_iter().collect(),
            pairs: pairs.into_iter().collect(),
        })
    }

    fn streams(&self, g: &mut Graph, bound: &Bound, embeddings: &Mat) -> Result<Streams, ModelError> {
        let x = g.input(embeddings.clone());
        Ok(match &self.body {
            Body::Stacked(params) => {
                let StreamStates {
                    label,
                    entity,
                    relation,
                } = encode_stack(g, bound, params, &self.config.encoder, x)?;
                Streams {
                    label: Some(label),
                    entity,
                    relation,
                }
            }
            Body::NoLabel { entity, relation } => Streams {
                label: None,
                entity: entity.apply(g, bound, x),
                relation: relation.apply(g, bound, x),
            },
        })
    }

    /// Builds the joint loss of a batch. Each loss is averaged over the
    /// batch's instance count; a loss with no instances is zero.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[(&Example, &Negatives)],
    ) -> Result<(LossNodes, LossBreakdown), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let has_tags = self.heads.tag.is_some();
        let m_l: usize = if has_tags { batch.iter().map(|(ex, _)| ex.labels.len()).sum() } else { 0 };
        let m_e: usize = batch.iter().map(|(ex, neg)| ex.spans.len() + neg.spans.len()).sum();
        let m_r: usize = if self.heads.relation.is_some() {
            batch.iter().map(|(ex, neg)| ex.pairs.len() + neg.pairs.len()).sum()
        } else {
            0
        };

        let (mut tag_terms, mut span_terms, mut rel_terms) = (Vec::new(), Vec::new(), Vec::new());
        for (ex, neg) in batch {
            self.check_embeddings(&ex.embeddings, ex.doc.len())?;
            let s = self.streams(g, bound, &ex.embeddings)?;
            if let (Some(tag), Some(h_l)) = (&self.heads.tag, s.label) {
                let probs = tag_probs(g, bound, tag, h_l);
                tag_terms.push(g.nll(probs, &ex.labels, m_l as f64));
            }

            let mut spans: Vec<SpanCandidate> = ex.spans.iter().map(|(s, _)| *s).collect();
            let mut targets: Vec<usize> = ex.spans.iter().map(|(_, c)| *c).collect();
            spans.extend(&neg.spans);
            targets.extend(std::iter::repeat_n(crate::heads::NONE_ENTITY, neg.spans.len()));
            if !spans.is_empty() {
                let probs = span_probs(g, bound, &self.heads, s.entity, &spans)?;
                span_terms.push(g.nll(probs, &targets, m_e as f64));
            }

            if let Some(rel) = &self.heads.relation {
                let r = self.schema.relation_types.len();
                let mut cands: Vec<RelationCandidate> = ex.pairs.iter().map(|(c, _)| *c).collect();
                cands.extend(&neg.pairs);
                if !cands.is_empty() {
                    let mut y = Mat::zeros((cands.len(), r));
                    for (i, (_, target)) in ex.pairs.iter().enumerate() {
                        for (j, &v) in target.iter().enumerate() {
                            y[[i, j]] = v;
                        }
                    }
                    let probs = relation_probs(g, bound, &self.heads, rel, s.relation, &cands)?;
                    rel_terms.push(g.bce(probs, y, m_r as f64));
                }
            }
        }
        let total = |g: &mut Graph, terms: &[NodeId]| {
            if terms.is_empty() {
                g.input(Mat::zeros((1, 1)))
            } else {
                g.sum(terms)
            }
        };
        let tagging = total(g, &tag_terms);
        let span = total(g, &span_terms);
        let relation = total(g, &rel_terms);
        let joint = g.sum(&[tagging, span, relation]);
        let breakdown = LossBreakdown {
            l_l: g.scalar(tagging),
            l_e: g.scalar(span),
            l_r: g.scalar(relation),
            l_joint: g.scalar(joint),
            m_l,
            m_e,
            m_r,
        };
        Ok((
            LossNodes {
                tagging,
                span,
                relation,
                joint,
            },
            breakdown,
        ))
    }

    /// Joint loss of a batch without keeping the graph.
    pub fn loss(&self, batch: &[(&Example, &Negatives)]) -> Result<LossBreakdown, ModelError> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        Ok(self.batch_loss(&mut g, &bound, batch)?.1)
    }

    /// Extracts entities and relations from one document's embeddings.
    pub fn predict(&self, embeddings: &Mat) -> Result<Prediction, ModelError> {
        self.check_embeddings(embeddings, embeddings.nrows())?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let s = self.streams(&mut g, &bound, embeddings)?;
        let spans = enumerate_spans(embeddings.nrows(), self.config.heads.max_width);
        let probs = span_probs(&mut g, &bound, &self.heads, s.entity, &spans)?;
        let found = select_entities(g.value(probs), &spans);
        let entities = found
            .iter()
            .map(|p| PredictedEntity {
                entity_type: self.schema.entity_types[p.entity_type].clone(),
                start: p.span.start,
                end: p.span.end(),
                score: p.score,
            })
            .collect();

        let mut relations = Vec::new();
        if let Some(rel) = &self.heads.relation {
            let set: Vec<SpanCandidate> = found.iter().map(|p| p.span).collect();
            let cands = build_relation_candidates(&set);
            if !cands.is_empty() {
                let probs = relation_probs(&mut g, &bound, &self.heads, rel, s.relation, &cands)?;
                for (i, t, score) in activated_relations(g.value(probs), self.config.heads.alpha) {
                    let c = cands[i];
                    relations.push(PredictedRelation {
                        relation_type: self.schema.relation_types[t].clone(),
                        head_span: [c.head.start, c.head.end()],
                        tail_span: [c.tail.start, c.tail.end()],
                        score,
                    });
                }
            }
        }
        Ok(Prediction { entities, relations })
    }

    /// Most probable label per token from the tagging head, if present.
    pub fn predict_labels(&self, embeddings: &Mat) -> Result<Option<Vec<usize>>, ModelError> {
        let Some(tag) = &self.heads.tag else {
            return Ok(None);
        };
        self.check_embeddings(embeddings, embeddings.nrows())?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let s = self.streams(&mut g, &bound, embeddings)?;
        let probs = tag_probs(&mut g, &bound, tag, s.label.expect("stacked model has a label stream"));
        let best = g
            .value(probs)
            .rows()
            .into_iter()
            .map(|row| {
                let mut b = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[b] {
                        b = c;
                    }
                }
                b
            })
            .collect();
        Ok(Some(best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, EntityMention, RelationMention, TokenizedText};
    use crate::heads::sample_negatives;
    use crate::tagging::build_label_vocabulary;
    use rand::Rng;

    fn fixture(architecture: Architecture) -> (Model, Example, Negatives) {
        let schema = TypeSchema::new(["PER", "ORG"], ["WORK", "LEAD"]).unwrap();
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(["Jack", "works", "at", "Acme", "Corp"]),
            entities: vec![EntityMention::new(0, 1, "PER"), EntityMention::new(3, 5, "ORG")],
            relations: vec![RelationMention::new(0, 1, "WORK"), RelationMention::new(0, 1, "LEAD")],
        };
        let data = Dataset::new(vec![doc.clone()], schema.clone()).unwrap();
        let vocab = build_label_vocabulary(&data).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig {
                layers: 1,
                heads: 2,
                dim: 4,
                ..Default::default()
            },
            heads: HeadConfig {
                max_width: 3,
                width_dim: 2,
                alpha: 0.4,
            },
            architecture,
        };
        let model = Model::new(config, schema, vocab, 6, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Mat::from_shape_simple_fn((5, 6), || rng.gen_range(-1.0..1.0));
        let ex = model.prepare(&doc, emb).unwrap();
        let neg = sample_negatives(&doc, 3, 4, 4, 3);
        (model, ex, neg)
    }

    #[test]
    fn targets_group_relation_types_per_pair() {
        let (_, ex, _) = fixture(Architecture::Stacked);
        assert_eq!(ex.spans, vec![(SpanCandidate::new(0, 1), 1), (SpanCandidate::new(3, 5), 2)]);
        assert_eq!(ex.pairs.len(), 1);
        assert_eq!(ex.pairs[0].1, vec![1.0, 1.0]);
        assert_eq!(ex.labels.len(), 5);
    }

    #[test]
    fn joint_is_the_plain_sum_with_batch_counts() {
        let (model, ex, neg) = fixture(Architecture::Stacked);
        let l = model.loss(&[(&ex, &neg), (&ex, &neg)]).unwrap();
        assert_eq!(l.l_joint, l.l_l + l.l_e + l.l_r);
        assert_eq!(l.m_l, 10);
        assert_eq!(l.m_e, 2 * (2 + 4));
        assert_eq!(l.m_r, 2 * (1 + 1));
        // Averaging over the batch makes a duplicated document cost the same.
        let single = model.loss(&[(&ex, &neg)]).unwrap();
        assert!((single.l_joint - l.l_joint).abs() < 1e-12);
    }

    #[test]
    fn no_label_drops_tagging_loss() {
        let (model, ex, neg) = fixture(Architecture::NoLabel);
        let l = model.loss(&[(&ex, &neg)]).unwrap();
        assert_eq!(l.l_l, 0.0);
        assert_eq!(l.m_l, 0);
        assert!(l.l_e > 0.0 && l.l_r > 0.0);
        assert!(model.store.find("heads/tag/w").is_none());
        assert!(model.predict_labels(&ex.embeddings).unwrap().is_none());
    }

    #[test]
    fn predictions_stay_within_the_schema() {
        let (model, ex, _) = fixture(Architecture::Stacked);
        let p = model.predict(&ex.embeddings).unwrap();
        for e in &p.entities {
            assert!(e.end - e.start <= 3);
            assert!(model.schema.entity_index(&e.entity_type).is_some());
        }
        for r in &p.relations {
            assert!(r.score >= 0.4);
            assert_ne!(r.head_span, r.tail_span);
        }
    }

    #[test]
    fn wrong_embedding_shape_is_rejected() {
        let (model, ex, _) = fixture(Architecture::Stacked);
        assert!(matches!(
            model.prepare(&ex.doc, Mat::zeros((5, 3))),
            Err(ModelError::Embeddings { .. })
        ));
    }
}
