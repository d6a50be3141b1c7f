//! Annotated documents, type schemas and dataset ingestion.
//!
//! Token offsets are 0-based and spans are end-exclusive, both in memory and
//! in the JSON files, so an entity's width is always `end - start`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entity-type name that the span classifier uses for "not an entity".
pub const NONE_ENTITY: &str = "NoneEntity";
/// Relation-type name for "no relation"; never emitted by the relation head.
pub const NONE_TYPE: &str = "NoneType";

/// Default cap on document length in tokens.
pub const DEFAULT_MAX_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("document {index}: malformed record: {message}")]
    Record { index: usize, message: String },
    #[error("document {index}: {}", join_violations(.violations))]
    Invalid {
        index: usize,
        violations: Vec<Violation>,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("entity length {0} is outside the analysed range 1..=10")]
    BucketRange(usize),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// A single problem found by [`validate_document`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyToken { position: usize },
    TooLong { tokens: usize, max: usize },
    EmptySpan { entity: usize },
    EntityOutOfRange { entity: usize, end: usize, len: usize },
    HeadOutOfRange { entity: usize },
    UnknownEntityType { entity: usize, name: String },
    DuplicateEntity { entity: usize },
    RelationOutOfRange { relation: usize },
    SelfRelation { relation: usize },
    UnknownRelationType { relation: usize, name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyToken { position } => write!(f, "empty token at position {position}"),
            Violation::TooLong { tokens, max } => {
                write!(f, "document has {tokens} tokens, more than the maximum of {max}")
            }
            Violation::EmptySpan { entity } => write!(f, "entity {entity}: empty span"),
            Violation::EntityOutOfRange { entity, end, len } => {
                write!(f, "entity {entity}: out of range (end {end} > {len} tokens)")
            }
            Violation::HeadOutOfRange { entity } => {
                write!(f, "entity {entity}: head span out of range")
            }
            Violation::UnknownEntityType { entity, name } => {
                write!(f, "entity {entity}: unknown entity type {name:?}")
            }
            Violation::DuplicateEntity { entity } => {
                write!(f, "entity {entity}: duplicate mention")
            }
            Violation::RelationOutOfRange { relation } => {
                write!(f, "relation {relation}: entity index out of range")
            }
            Violation::SelfRelation { relation } => write!(f, "relation {relation}: self-relation"),
            Violation::UnknownRelationType { relation, name } => {
                write!(f, "relation {relation}: unknown relation type {name:?}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

impl TokenizedText {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A typed entity over the token range `start..end`.
///
/// `head_start`/`head_end` optionally carry a head span, used only by the
/// head-based NER criterion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_end: Option<usize>,
}

impl EntityMention {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
            head_start: None,
            head_end: None,
        }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn span(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn head_span(&self) -> Option<(usize, usize)> {
        Some((self.head_start?, self.head_end?))
    }
}

/// A directed relation between two entries of the document's entity list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationMention {
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub relation_type: String,
}

impl RelationMention {
    pub fn new(head: usize, tail: usize, relation_type: impl Into<String>) -> Self {
        Self {
            head,
            tail,
            relation_type: relation_type.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub tokens: TokenizedText,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub relations: Vec<RelationMention>,
}

impl AnnotatedDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Ordered entity and relation type inventories.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSchema {
    #[serde(rename = "entities")]
    pub entity_types: Vec<String>,
    #[serde(rename = "relations")]
    pub relation_types: Vec<String>,
}

impl TypeSchema {
    pub fn new<S: Into<String>>(
        entity_types: impl IntoIterator<Item = S>,
        relation_types: impl IntoIterator<Item = S>,
    ) -> Result<Self, DataError> {
        let schema = Self {
            entity_types: entity_types.into_iter().map(Into::into).collect(),
            relation_types: relation_types.into_iter().map(Into::into).collect(),
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = read_to_string(path.as_ref())?;
        let schema: TypeSchema = serde_json::from_str(&text)?;
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<(), DataError> {
        for (kind, names) in [("entity", &self.entity_types), ("relation", &self.relation_types)] {
            let mut seen = HashSet::new();
            for name in names {
                if name.is_empty() {
                    return Err(DataError::Schema(format!("empty {kind} type name")));
                }
                if name == NONE_ENTITY || name == NONE_TYPE {
                    return Err(DataError::Schema(format!("{name:?} is reserved")));
                }
                if name.contains('/') {
                    return Err(DataError::Schema(format!(
                        "{kind} type {name:?} contains the label separator '/'"
                    )));
                }
                if !seen.insert(name) {
                    return Err(DataError::Schema(format!("duplicate {kind} type {name:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relation_types.iter().position(|t| t == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub documents: Vec<AnnotatedDocument>,
    pub schema: TypeSchema,
}

impl Dataset {
    /// Validates every document against `schema`.
    pub fn new(documents: Vec<AnnotatedDocument>, schema: TypeSchema) -> Result<Self, DataError> {
        Self::with_max_tokens(documents, schema, DEFAULT_MAX_TOKENS)
    }

    pub fn with_max_tokens(
        documents: Vec<AnnotatedDocument>,
        schema: TypeSchema,
        max_tokens: usize,
    ) -> Result<Self, DataError> {
        for (index, doc) in documents.iter().enumerate() {
            validate_document_with(doc, &schema, max_tokens)
                .map_err(|violations| DataError::Invalid { index, violations })?;
        }
        Ok(Self { documents, schema })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Serializes the documents in the dataset file format.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.documents).expect("documents serialize")
    }

    /// Subset of documents by index, sharing the schema.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            schema: self.schema.clone(),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads and validates a dataset file (a JSON array of document records).
pub fn parse_dataset(path: impl AsRef<Path>, schema: &TypeSchema) -> Result<Dataset, DataError> {
    let text = read_to_string(path.as_ref())?;
    parse_dataset_str(&text, schema, DEFAULT_MAX_TOKENS)
}

pub fn parse_dataset_str(
    text: &str,
    schema: &TypeSchema,
    max_tokens: usize,
) -> Result<Dataset, DataError> {
    let records: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let mut documents = Vec::with_capacity(records.len());
    for (index, record) in records.into_iter().enumerate() {
        let doc: AnnotatedDocument =
            serde_json::from_value(record).map_err(|e| DataError::Record {
                index,
                message: e.to_string(),
            })?;
        documents.push(doc);
    }
    Dataset::with_max_tokens(documents, schema.clone(), max_tokens)
}

/// Checks a document against every data-model invariant, collecting all
/// violations rather than stopping at the first.
pub fn validate_document(doc: &AnnotatedDocument, schema: &TypeSchema) -> Result<(), Vec<Violation>> {
    validate_document_with(doc, schema, DEFAULT_MAX_TOKENS)
}

pub fn validate_document_with(
    doc: &AnnotatedDocument,
    schema: &TypeSchema,
    max_tokens: usize,
) -> Result<(), Vec<Violation>> {
    let n = doc.len();
    let mut out = Vec::new();
    if n > max_tokens {
        out.push(Violation::TooLong { tokens: n, max: max_tokens });
    }
    for (position, tok) in doc.tokens.tokens.iter().enumerate() {
        if tok.is_empty() {
            out.push(Violation::EmptyToken { position });
        }
    }
    let mut seen = HashSet::new();
    for (i, e) in doc.entities.iter().enumerate() {
        if e.start >= e.end {
            out.push(Violation::EmptySpan { entity: i });
        } else if e.end > n {
            out.push(Violation::EntityOutOfRange { entity: i, end: e.end, len: n });
        }
        match (e.head_start, e.head_end) {
            (None, None) => {}
            (Some(hs), Some(he)) if hs < he && he <= n => {}
            _ => out.push(Violation::HeadOutOfRange { entity: i }),
        }
        if schema.entity_index(&e.entity_type).is_none() {
            out.push(Violation::UnknownEntityType {
                entity: i,
                name: e.entity_type.clone(),
            });
        }
        if !seen.insert((e.start, e.end, e.entity_type.as_str())) {
            out.push(Violation::DuplicateEntity { entity: i });
        }
    }
    for (i, r) in doc.relations.iter().enumerate() {
        if r.head >= doc.entities.len() || r.tail >= doc.entities.len() {
            out.push(Violation::RelationOutOfRange { relation: i });
        } else if r.head == r.tail {
            out.push(Violation::SelfRelation { relation: i });
        }
        if schema.relation_index(&r.relation_type).is_none() {
            out.push(Violation::UnknownRelationType {
                relation: i,
                name: r.relation_type.clone(),
            });
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Entity types that actually occur in the documents.
pub fn observed_entity_types(docs: &[AnnotatedDocument]) -> BTreeSet<String> {
    docs.iter()
        .flat_map(|d| d.entities.iter().map(|e| e.entity_type.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketKind {
    Entity,
    Text,
}

pub const ENTITY_BUCKETS: [&str; 5] = ["[1-2]", "[3-4]", "[5-6]", "[7-8]", "[9-10]"];
pub const TEXT_BUCKETS: [&str; 4] = ["[0-19]", "[20-34]", "[35-49]", "[>=50]"];

/// Maps an entity or text length onto its analysis bucket label.
pub fn assign_bucket(length: usize, kind: BucketKind) -> Result<&'static str, DataError> {
    match kind {
        BucketKind::Entity => match length {
            1..=10 => Ok(ENTITY_BUCKETS[(length - 1) / 2]),
            _ => Err(DataError::BucketRange(length)),
        },
        BucketKind::Text => Ok(match length {
            0..=19 => TEXT_BUCKETS[0],
            20..=34 => TEXT_BUCKETS[1],
            35..=49 => TEXT_BUCKETS[2],
            _ => TEXT_BUCKETS[3],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> TypeSchema {
        TypeSchema::new(["PER", "ORG", "LOC"], ["WORK", "LIVE"]).unwrap()
    }

    fn jack() -> AnnotatedDocument {
        AnnotatedDocument {
            tokens: TokenizedText::new(["Jack", "works", "at", "Harvard", "University"]),
            entities: vec![EntityMention::new(0, 1, "PER"), EntityMention::new(3, 5, "ORG")],
            relations: vec![RelationMention::new(0, 1, "WORK")],
        }
    }

    #[test]
    fn figure_one_document_is_valid() {
        assert_eq!(validate_document(&jack(), &schema()), Ok(()));
    }

    #[test]
    fn self_relation_is_reported() {
        let mut doc = jack();
        doc.relations.push(RelationMention::new(1, 1, "WORK"));
        let errs = validate_document(&doc, &schema()).unwrap_err();
        assert_eq!(errs, vec![Violation::SelfRelation { relation: 1 }]);
        assert!(errs[0].to_string().contains("self-relation"));
    }

    #[test]
    fn end_past_length_is_out_of_range() {
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(["a", "b", "c"]),
            entities: vec![EntityMention::new(1, 4, "PER")],
            relations: vec![],
        };
        let errs = validate_document(&doc, &schema()).unwrap_err();
        assert_eq!(errs, vec![Violation::EntityOutOfRange { entity: 0, end: 4, len: 3 }]);
        assert!(errs[0].to_string().contains("out of range"));
    }

    #[test]
    fn all_violations_are_collected() {
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(["a", ""]),
            entities: vec![
                EntityMention::new(0, 1, "PER"),
                EntityMention::new(0, 1, "PER"),
                EntityMention::new(1, 1, "XYZ"),
            ],
            relations: vec![RelationMention::new(0, 7, "WORK"), RelationMention::new(0, 1, "NOPE")],
        };
        let errs = validate_document(&doc, &schema()).unwrap_err();
        assert!(errs.contains(&Violation::EmptyToken { position: 1 }));
        assert!(errs.contains(&Violation::DuplicateEntity { entity: 1 }));
        assert!(errs.contains(&Violation::EmptySpan { entity: 2 }));
        assert!(errs.contains(&Violation::UnknownEntityType { entity: 2, name: "XYZ".into() }));
        assert!(errs.contains(&Violation::RelationOutOfRange { relation: 0 }));
        assert!(errs.contains(&Violation::UnknownRelationType { relation: 1, name: "NOPE".into() }));
    }

    #[test]
    fn same_span_with_different_types_is_not_a_duplicate() {
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(["a"]),
            entities: vec![EntityMention::new(0, 1, "PER"), EntityMention::new(0, 1, "ORG")],
            relations: vec![],
        };
        assert!(validate_document(&doc, &schema()).is_ok());
    }

    #[test]
    fn overlong_documents_are_rejected() {
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(vec!["x"; 6]),
            ..Default::default()
        };
        let errs = validate_document_with(&doc, &schema(), 5).unwrap_err();
        assert_eq!(errs, vec![Violation::TooLong { tokens: 6, max: 5 }]);
    }

    #[test]
    fn reserved_schema_names_are_rejected() {
        assert!(TypeSchema::new(["PER", "NoneEntity"], []).is_err());
        assert!(TypeSchema::new(["PER"], ["NoneType"]).is_err());
        assert!(TypeSchema::new(["A/B"], []).is_err());
        assert!(TypeSchema::new(["PER", "PER"], []).is_err());
    }

    #[test]
    fn empty_document_record_parses() {
        let ds = parse_dataset_str(r#"[{"tokens":[],"entities":[],"relations":[]}]"#, &schema(), 512)
            .unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.documents[0].is_empty());
    }

    #[test]
    fn empty_span_fails_parse_with_index() {
        let text = r#"[{"tokens":["a"],"entities":[],"relations":[]},
                       {"tokens":["a","b"],"entities":[{"type":"PER","start":1,"end":1}],"relations":[]}]"#;
        let err = parse_dataset_str(text, &schema(), 512).unwrap_err();
        assert!(matches!(err, DataError::Invalid { index: 1, .. }));
        assert!(err.to_string().contains("empty span"));
    }

    #[test]
    fn malformed_record_reports_index() {
        let text = r#"[{"tokens":["a"]}, {"tokens":"oops"}]"#;
        match parse_dataset_str(text, &schema(), 512).unwrap_err() {
            DataError::Record { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn buckets_match_figure_ranges() {
        assert_eq!(assign_bucket(25, BucketKind::Text).unwrap(), "[20-34]");
        assert_eq!(assign_bucket(0, BucketKind::Text).unwrap(), "[0-19]");
        assert_eq!(assign_bucket(49, BucketKind::Text).unwrap(), "[35-49]");
        assert_eq!(assign_bucket(50, BucketKind::Text).unwrap(), "[>=50]");
        assert_eq!(assign_bucket(2, BucketKind::Entity).unwrap(), "[1-2]");
        assert_eq!(assign_bucket(10, BucketKind::Entity).unwrap(), "[9-10]");
        assert!(assign_bucket(11, BucketKind::Entity).is_err());
        assert!(assign_bucket(0, BucketKind::Entity).is_err());
    }

    #[test]
    fn text_buckets_are_exhaustive_and_disjoint() {
        let ranges = [(0usize, 19usize), (20, 34), (35, 49), (50, usize::MAX)];
        for len in 0..500usize {
            let hits: Vec<_> = ranges
                .iter()
                .zip(TEXT_BUCKETS)
                .filter(|((lo, hi), _)| *lo <= len && len <= *hi)
                .map(|(_, label)| label)
                .collect();
            assert_eq!(hits.len(), 1);
            assert_eq!(assign_bucket(len, BucketKind::Text).unwrap(), hits[0]);
        }
    }
}
