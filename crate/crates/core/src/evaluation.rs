//! Strict NER and relation scoring with micro/macro P/R/F1 and bucketed
//! breakdowns by entity length and sentence length.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{assign_bucket, AnnotatedDocument, BucketKind, TypeSchema, ENTITY_BUCKETS, TEXT_BUCKETS};
use crate::model::Prediction;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("entity {start}..{end} has no head span; the head criterion needs one on every entity")]
    MissingHead { start: usize, end: usize },
    #[error("{gold} gold documents but {predicted} predictions")]
    Misaligned { gold: usize, predicted: usize },
    #[error("unknown criterion {0:?}")]
    UnknownCriterion(String),
    #[error("unknown aggregation {0:?}")]
    UnknownAggregation(String),
    #[error("entity-length buckets apply to NER criteria only")]
    BucketCriterion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Boundaries and type.
    #[serde(alias = "ner")]
    NerBoundaryType,
    /// Head span and type.
    #[serde(alias = "ner_head")]
    NerHeadType,
    /// Relation type, direction and both entity boundaries.
    #[serde(alias = "re")]
    ReBoundary,
    /// As `ReBoundary`, plus both entity types.
    RePlus,
}

impl Criterion {
    pub fn is_ner(&self) -> bool {
        matches!(self, Criterion::NerBoundaryType | Criterion::NerHeadType)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::NerBoundaryType => "ner",
            Criterion::NerHeadType => "ner_head",
            Criterion::ReBoundary => "re",
            Criterion::RePlus => "re_plus",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ner" | "ner_boundary_type" => Criterion::NerBoundaryType,
            "ner_head" | "ner_head_type" => Criterion::NerHeadType,
            "re" | "re_boundary" => Criterion::ReBoundary,
            "re_plus" | "re+" => Criterion::RePlus,
            _ => return Err(EvalError::UnknownCriterion(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Micro,
    Macro,
}

impl FromStr for Aggregation {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "macro" => Ok(Aggregation::Macro),
            _ => Err(EvalError::UnknownAggregation(s.to_string())),
        }
    }
}

/// An entity as seen by the scorer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
    pub head: Option<(usize, usize)>,
}

/// A directed relation with its argument spans and, when known, their types.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: (usize, usize),
    pub head_type: Option<String>,
    pub tail: (usize, usize),
    pub tail_type: Option<String>,
    pub relation_type: String,
}

/// The entities and relations of one document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub entities: Vec<Mention>,
    pub relations: Vec<Triple>,
}

impl From<&AnnotatedDocument> for Annotations {
    fn from(doc: &AnnotatedDocument) -> Self {
        let entities = doc
            .entities
            .iter()
            .map(|e| Mention {
                start: e.start,
                end: e.end,
                entity_type: e.entity_type.clone(),
                head: e.head_span(),
            })
            .collect();
        let relations = doc
            .relations
            .iter()
            .map(|r| {
                let (h, t) = (&doc.entities[r.head], &doc.entities[r.tail]);
                Triple {
                    head: h.span(),
                    head_type: Some(h.entity_type.clone()),
                    tail: t.span(),
                    tail_type: Some(t.entity_type.clone()),
                    relation_type: r.relation_type.clone(),
                }
            })
            .collect();
        Self { entities, relations }
    }
}

impl From<&Prediction> for Annotations {
    /// Argument types come from the first predicted entity with that span.
    fn from(pred: &Prediction) -> Self {
        let type_of = |span: [usize; 2]| {
            pred.entities
                .iter()
                .find(|e| [e.start, e.end] == span)
                .map(|e| e.entity_type.clone())
        };
        Self {
            entities: pred
                .entities
                .iter()
                .map(|e| Mention {
                    start: e.start,
                    end: e.end,
                    entity_type: e.entity_type.clone(),
                    head: None,
                })
                .collect(),
            relations: pred
                .relations
                .iter()
                .map(|r| Triple {
                    head: (r.head_span[0], r.head_span[1]),
                    head_type: type_of(r.head_span),
                    tail: (r.tail_span[0], r.tail_span[1]),
                    tail_type: type_of(r.tail_span),
                    relation_type: r.relation_type.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

pub type TypeCounts = BTreeMap<String, Counts>;

fn count_sets<K: Ord + Clone>(gold: BTreeSet<(String, K)>, pred: BTreeSet<(String, K)>) -> TypeCounts {
    let mut out = TypeCounts::new();
    for item in gold.union(&pred) {
        let c = out.entry(item.0.clone()).or_default();
        match (gold.contains(item), pred.contains(item)) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    out
}

fn entity_key(m: &Mention, criterion: Criterion) -> Result<(usize, usize), EvalError> {
    match criterion {
        Criterion::NerHeadType => m.head.ok_or(EvalError::MissingHead {
            start: m.start,
            end: m.end,
        }),
        _ => Ok((m.start, m.end)),
    }
}

/// Per-type TP/FP/FN for entities; duplicates count once.
pub fn match_entities(gold: &[Mention], pred: &[Mention], criterion: Criterion) -> Result<TypeCounts, EvalError> {
    let keys = |ms: &[Mention]| -> Result<BTreeSet<(String, (usize, usize))>, EvalError> {
        ms.iter()
            .map(|m| Ok((m.entity_type.clone(), entity_key(m, criterion)?)))
            .collect()
    };
    Ok(count_sets(keys(gold)?, keys(pred)?))
}

type RelationKey = ((usize, usize), (usize, usize), Option<(String, String)>);

/// Per-relation-type TP/FP/FN. `RePlus` also compares argument types; a
/// relation with an untyped argument never matches under it.
pub fn match_relations(gold: &[Triple], pred: &[Triple], criterion: Criterion) -> TypeCounts {
    let plus = criterion == Criterion::RePlus;
    let mut unmatched: Vec<(String, bool)> = Vec::new();
    let mut keys = |ts: &[Triple], is_pred: bool| -> BTreeSet<(String, RelationKey)> {
        let mut out = BTreeSet::new();
        let mut untyped = BTreeSet::new();
        for t in ts {
            let types = match (&t.head_type, &t.tail_type) {
                _ if !plus => None,
                (Some(h), Some(tl)) => Some((h.clone(), tl.clone())),
                _ => {
                    untyped.insert((t.relation_type.clone(), t.head, t.tail));
                    continue;
                }
            };
            out.insert((t.relation_type.clone(), (t.head, t.tail, types)));
        }
        unmatched.extend(untyped.into_iter().map(|(r, _, _)| (r, is_pred)));
        out
    };
    let (g, p) = (keys(gold, false), keys(pred, true));
    let mut counts = count_sets(g, p);
    for (r, is_pred) in unmatched {
        let c = counts.entry(r).or_default();
        if is_pred {
            c.fp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    counts
}

/// Per-document counts under `criterion`.
pub fn match_document(gold: &Annotations, pred: &Annotations, criterion: Criterion) -> Result<TypeCounts, EvalError> {
    if criterion.is_ner() {
        match_entities(&gold.entities, &pred.entities, criterion)
    } else {
        Ok(match_relations(&gold.relations, &pred.relations, criterion))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// `(value, had_zero_denominator)`
fn ratio(num: f64, den: f64) -> (f64, bool) {
    if den == 0.0 {
        (0.0, true)
    } else {
        (num / den, false)
    }
}

/// P, R and F1 from counts; zero denominators give 0 and set the flag.
pub fn scores(c: Counts) -> (Scores, bool) {
    let (p, zp) = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let (r, zr) = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    let (f1, zf) = ratio(2.0 * p * r, p + r);
    (
        Scores {
            p,
            r,
            f1,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        },
        zp || zr || zf,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub criterion: Criterion,
    pub aggregation: Aggregation,
    pub per_type: BTreeMap<String, Scores>,
    pub overall: Scores,
    /// Some P, R or F1 had a zero denominator and was reported as 0.
    pub zero_division: bool,
    /// Types left out of the macro average because they have no gold instance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub macro_excluded: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<BTreeMap<String, MetricsReport>>,
}

/// Aggregates per-type counts. Micro pools the counts; macro averages
/// per-type P, R and F1 over types with at least one gold instance.
pub fn prf1(counts: &TypeCounts, criterion: Criterion, aggregation: Aggregation) -> MetricsReport {
    let mut zero_division = false;
    let mut per_type = BTreeMap::new();
    let mut pooled = Counts::default();
    for (t, &c) in counts {
        let (s, z) = scores(c);
        zero_division |= z;
        per_type.insert(t.clone(), s);
        pooled.add(c);
    }
    let mut macro_excluded = Vec::new();
    let overall = match aggregation {
        Aggregation::Micro => {
            let (s, z) = scores(pooled);
            zero_division |= z;
            s
        }
        Aggregation::Macro => {
            let included: Vec<&Scores> = per_type
                .iter()
                .filter_map(|(t, s)| {
                    if s.tp + s.fn_ > 0 {
                        Some(s)
                    } else {
                        macro_excluded.push(t.clone());
                        None
                    }
                })
                .collect();
            let k = included.len() as f64;
            let mean = |f: fn(&Scores) -> f64| {
                if included.is_empty() {
                    0.0
                } else {
                    included.iter().map(|s| f(s)).sum::<f64>() / k
                }
            };
            zero_division |= included.is_empty();
            Scores {
                p: mean(|s| s.p),
                r: mean(|s| s.r),
                f1: mean(|s| s.f1),
                tp: pooled.tp,
                fp: pooled.fp,
                fn_: pooled.fn_,
            }
        }
    };
    MetricsReport {
        criterion,
        aggregation,
        per_type,
        overall,
        zero_division,
        macro_excluded,
        buckets: None,
    }
}

fn schema_types(schema: Option<&TypeSchema>, criterion: Criterion) -> Vec<String> {
    match schema {
        Some(s) if criterion.is_ner() => s.entity_types.clone(),
        Some(s) => s.relation_types.clone(),
        None => Vec::new(),
    }
}

/// Sums per-document counts over aligned gold and predicted documents.
/// Types from `schema` are listed even when they never occur.
pub fn corpus_counts(
    gold: &[Annotations],
    pred: &[Annotations],
    criterion: Criterion,
    schema: Option<&TypeSchema>,
) -> Result<TypeCounts, EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned {
            gold: gold.len(),
            predicted: pred.len(),
        });
    }
    let mut total: TypeCounts = schema_types(schema, criterion)
        .into_iter()
        .map(|t| (t, Counts::default()))
        .collect();
    for (g, p) in gold.iter().zip(pred) {
        for (t, c) in match_document(g, p, criterion)? {
            total.entry(t).or_default().add(c);
        }
    }
    Ok(total)
}

pub fn evaluate(
    gold: &[Annotations],
    pred: &[Annotations],
    criterion: Criterion,
    aggregation: Aggregation,
    schema: Option<&TypeSchema>,
) -> Result<MetricsReport, EvalError> {
    Ok(prf1(&corpus_counts(gold, pred, criterion, schema)?, criterion, aggregation))
}

/// Reports per bucket, for buckets with at least one member.
///
/// Entity-length buckets score only the gold and predicted entities whose
/// width falls in the bucket (entities wider than ten tokens fall in none).
/// Text-length buckets score whole documents grouped by token count.
pub fn bucketed_report(
    gold_docs: &[AnnotatedDocument],
    pred: &[Annotations],
    kind: BucketKind,
    criterion: Criterion,
    aggregation: Aggregation,
) -> Result<BTreeMap<String, MetricsReport>, EvalError> {
    if gold_docs.len() != pred.len() {
        return Err(EvalError::Misaligned {
            gold: gold_docs.len(),
            predicted: pred.len(),
        });
    }
    let gold: Vec<Annotations> = gold_docs.iter().map(Annotations::from).collect();
    let mut out = BTreeMap::new();
    match kind {
        BucketKind::Entity => {
            if !criterion.is_ner() {
                return Err(EvalError::BucketCriterion);
            }
            let in_bucket = |m: &Mention, b: &str| assign_bucket(m.end - m.start, kind).is_ok_and(|x| x == b);
            for b in ENTITY_BUCKETS {
                let filter = |docs: &[Annotations]| -> Vec<Annotations> {
                    docs.iter()
                        .map(|d| Annotations {
                            entities: d.entities.iter().filter(|m| in_bucket(m, b)).cloned().collect(),
                            relations: Vec::new(),
                        })
                        .collect()
                };
                let (g, p) = (filter(&gold), filter(pred));
                if g.iter().chain(&p).any(|d| !d.entities.is_empty()) {
                    out.insert(b.to_string(), evaluate(&g, &p, criterion, aggregation, None)?);
                }
            }
        }
        BucketKind::Text => {
            for b in TEXT_BUCKETS {
                let idx: Vec<usize> = (0..gold_docs.len())
                    .filter(|&i| assign_bucket(gold_docs[i].len(), kind).is_ok_and(|x| x == b))
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let g: Vec<Annotations> = idx.iter().map(|&i| gold[i].clone()).collect();
                let p: Vec<Annotations> = idx.iter().map(|&i| pred[i].clone()).collect();
                out.insert(b.to_string(), evaluate(&g, &p, criterion, aggregation, None)?);
            }
        }
    }
    Ok(out)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, &Scores)> = self.per_type.iter().map(|(t, s)| (t.clone(), s)).collect();
        rows.push((format!("overall ({})", agg_name(self.aggregation)), &self.overall));
        let width = rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "criterion: {}", self.criterion);
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>6}  {:>6}  {:>6}",
            "type", "P", "R", "F1", "TP", "FP", "FN"
        );
        for (t, s) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>6}  {:>6}  {:>6}",
                t, s.p, s.r, s.f1, s.tp, s.fp, s.fn_
            );
        }
        if self.zero_division {
            out.push_str("note: zero denominators reported as 0\n");
        }
        if let Some(buckets) = &self.buckets {
            for (b, r) in buckets {
                let _ = writeln!(
                    out,
                    "bucket {b}: P {:.4}  R {:.4}  F1 {:.4}",
                    r.overall.p, r.overall.r, r.overall.f1
                );
            }
        }
        out
    }
}

fn agg_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::Micro => "micro",
        Aggregation::Macro => "macro",
    }
}
