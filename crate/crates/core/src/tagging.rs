//! Extended BIO tagging.
//!
//! Every token carries a primary tag and, when two entities overlap, an
//! overlay tag written after a `/` (e.g. `B-AE/B-DRUG`). Entities are put on
//! the two channels by first-fit in head order, so of any two overlapping
//! entities the preceding one (earlier head, then longer, then smaller type
//! name) lands on the primary channel. Each channel on its own is plain BIO.
//!
//! An overlay entity that runs past the end of the primary entity it overlaps
//! keeps its overlay tags to the end, giving composites such as `O/I-ORG`.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{AnnotatedDocument, Dataset, EntityMention};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaggingError {
    #[error("token {token} is covered by {count} entities: overlaps are not two-fold")]
    NotTwoFold { token: usize, count: usize },
    #[error("entities {0:?} and {1:?} do not overlap")]
    Disjoint((usize, usize), (usize, usize)),
    #[error("invalid label {0:?}")]
    BadLabel(String),
    #[error("document {index}: {source}")]
    Document {
        index: usize,
        #[source]
        source: Box<TaggingError>,
    },
    #[error("label sequence has {labels} labels for {tokens} tokens")]
    LengthMismatch { labels: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(String),
    I(String),
}

impl Tag {
    pub fn entity_type(&self) -> Option<&str> {
        match self {
            Tag::O => None,
            Tag::B(t) | Tag::I(t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::B(t) => write!(f, "B-{t}"),
            Tag::I(t) => write!(f, "I-{t}"),
        }
    }
}

impl FromStr for Tag {
    type Err = TaggingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "O" => Ok(Tag::O),
            _ => match s.split_once('-') {
                Some(("B", t)) if !t.is_empty() => Ok(Tag::B(t.to_string())),
                Some(("I", t)) if !t.is_empty() => Ok(Tag::I(t.to_string())),
                _ => Err(TaggingError::BadLabel(s.to_string())),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenLabel {
    pub primary: Tag,
    pub overlay: Option<Tag>,
}

impl TokenLabel {
    pub fn outside() -> Self {
        Self {
            primary: Tag::O,
            overlay: None,
        }
    }

    pub fn is_composite(&self) -> bool {
        self.overlay.is_some()
    }
}

impl fmt::Display for TokenLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.overlay {
            None => write!(f, "{}", self.primary),
            Some(o) => write!(f, "{}/{}", self.primary, o),
        }
    }
}

impl FromStr for TokenLabel {
    type Err = TaggingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('/') {
            None => Ok(Self {
                primary: s.parse()?,
                overlay: None,
            }),
            Some((p, o)) => {
                let overlay: Tag = o.parse()?;
                if overlay == Tag::O {
                    return Err(TaggingError::BadLabel(s.to_string()));
                }
                Ok(Self {
                    primary: p.parse()?,
                    overlay: Some(overlay),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenLabelSequence {
    pub labels: Vec<TokenLabel>,
}

impl TokenLabelSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.to_string()).collect()
    }

    pub fn parse<S: AsRef<str>>(labels: &[S]) -> Result<Self, TaggingError> {
        Ok(Self {
            labels: labels
                .iter()
                .map(|s| s.as_ref().parse())
                .collect::<Result<_, _>>()?,
        })
    }
}

/// Head-order key: earlier start first, then longer, then type name.
fn precedence(e: &EntityMention) -> (usize, std::cmp::Reverse<usize>, &str) {
    (e.start, std::cmp::Reverse(e.width()), e.entity_type.as_str())
}

fn cmp_precedence(a: &EntityMention, b: &EntityMention) -> Ordering {
    precedence(a).cmp(&precedence(b))
}

/// Splits two overlapping entities into `(preceding, overlapping)`.
///
/// The preceding entity has the earlier head; equal heads go to the longer
/// entity, and identical spans to the lexicographically smaller type.
pub fn select_preceding<'a>(
    a: &'a EntityMention,
    b: &'a EntityMention,
) -> Result<(&'a EntityMention, &'a EntityMention), TaggingError> {
    if !a.overlaps(b) {
        return Err(TaggingError::Disjoint(a.span(), b.span()));
    }
    if cmp_precedence(b, a) == Ordering::Less {
        Ok((b, a))
    } else {
        Ok((a, b))
    }
}

fn write_channel(slots: &mut [Option<Tag>], e: &EntityMention) {
    slots[e.start] = Some(Tag::B(e.entity_type.clone()));
    for slot in &mut slots[e.start + 1..e.end] {
        *slot = Some(Tag::I(e.entity_type.clone()));
    }
}

/// Tags `entities` over `n` tokens.
pub fn encode_entities(n: usize, entities: &[EntityMention]) -> Result<TokenLabelSequence, TaggingError> {
    let mut coverage = vec![0usize; n];
    for e in entities {
        for c in &mut coverage[e.start..e.end] {
            *c += 1;
        }
    }
    if let Some((token, &count)) = coverage.iter().enumerate().find(|(_, &c)| c > 2) {
        return Err(TaggingError::NotTwoFold { token, count });
    }

    let mut ordered: Vec<&EntityMention> = entities.iter().collect();
    ordered.sort_by(|a, b| cmp_precedence(a, b));
    ordered.dedup_by(|a, b| a.span() == b.span() && a.entity_type == b.entity_type);

    let mut primary: Vec<Option<Tag>> = vec![None; n];
    let mut overlay: Vec<Option<Tag>> = vec![None; n];
    // First-fit in start order colours an interval graph optimally, so with
    // at most two entities per token it never needs a third channel.
    for e in ordered {
        if primary[e.start..e.end].iter().all(Option::is_none) {
            write_channel(&mut primary, e);
        } else if overlay[e.start..e.end].iter().all(Option::is_none) {
            write_channel(&mut overlay, e);
        } else {
            return Err(TaggingError::NotTwoFold { token: e.start, count: 3 });
        }
    }

    let labels = primary
        .into_iter()
        .zip(overlay)
        .map(|(p, o)| TokenLabel {
            primary: p.unwrap_or(Tag::O),
            overlay: o,
        })
        .collect();
    Ok(TokenLabelSequence { labels })
}

/// Tags a document's entities with the extended BIO scheme.
pub fn encode_labels(doc: &AnnotatedDocument) -> Result<TokenLabelSequence, TaggingError> {
    encode_entities(doc.len(), &doc.entities)
}

fn decode_channel<'a>(
    tags: impl Iterator<Item = Option<&'a Tag>>,
    out: &mut BTreeSet<(usize, usize, String)>,
) {
    let mut open: Option<(usize, &str)> = None;
    let mut n = 0;
    for (i, tag) in tags.enumerate() {
        n = i + 1;
        match tag {
            None | Some(Tag::O) => {
                if let Some((s, t)) = open.take() {
                    out.insert((s, i, t.to_string()));
                }
            }
            Some(Tag::B(t)) => {
                if let Some((s, prev)) = open.take() {
                    out.insert((s, i, prev.to_string()));
                }
                open = Some((i, t));
            }
            Some(Tag::I(t)) => match open {
                Some((_, prev)) if prev == t => {}
                _ => {
                    // I- without a matching open segment starts a new entity.
                    if let Some((s, prev)) = open.take() {
                        out.insert((s, i, prev.to_string()));
                    }
                    open = Some((i, t));
                }
            },
        }
    }
    if let Some((s, t)) = open {
        out.insert((s, n, t.to_string()));
    }
}

/// Decodes both channels independently, repairing malformed runs.
///
/// Returns the entity set sorted by `(start, end, type)`.
pub fn decode_labels(labels: &TokenLabelSequence) -> Vec<EntityMention> {
    let mut found = BTreeSet::new();
    decode_channel(labels.labels.iter().map(|l| Some(&l.primary)), &mut found);
    decode_channel(labels.labels.iter().map(|l| l.overlay.as_ref()), &mut found);
    found
        .into_iter()
        .map(|(s, e, t)| EntityMention::new(s, e, t))
        .collect()
}

/// Ordered label inventory: `O` first, then lexicographic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn from_labels(labels: impl IntoIterator<Item = String>) -> Self {
        let mut rest: BTreeSet<String> = labels.into_iter().collect();
        rest.remove("O");
        let labels: Vec<String> = std::iter::once("O".to_string()).chain(rest).collect();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Label indices for a sequence; unseen labels map to `O`.
    pub fn indices(&self, seq: &TokenLabelSequence) -> Vec<usize> {
        seq.labels
            .iter()
            .map(|l| self.get(&l.to_string()).unwrap_or(0))
            .collect()
    }

    pub fn sequence(&self, indices: &[usize]) -> TokenLabelSequence {
        TokenLabelSequence {
            labels: indices
                .iter()
                .map(|&i| self.labels[i].parse().expect("vocabulary labels are valid"))
                .collect(),
        }
    }
}

/// `O`, `B-t`/`I-t` for every entity type in the corpus, and every composite
/// label the corpus actually produces.
pub fn build_label_vocabulary(dataset: &Dataset) -> Result<LabelVocabulary, TaggingError> {
    let mut labels = BTreeSet::new();
    for (index, doc) in dataset.documents.iter().enumerate() {
        for e in &doc.entities {
            labels.insert(format!("B-{}", e.entity_type));
            labels.insert(format!("I-{}", e.entity_type));
        }
        let seq = encode_labels(doc).map_err(|e| TaggingError::Document {
            index,
            source: Box::new(e),
        })?;
        labels.extend(seq.labels.iter().filter(|l| l.is_composite()).map(|l| l.to_string()));
    }
    Ok(LabelVocabulary::from_labels(labels))
}

/// Two-column `token<TAB>label` text, one blank line between documents.
pub fn to_conll(docs: &[(Vec<String>, TokenLabelSequence)]) -> String {
    let mut out = String::new();
    for (tokens, labels) in docs {
        for (tok, lab) in tokens.iter().zip(&labels.labels) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(&lab.to_string());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

pub fn from_conll(text: &str) -> Result<Vec<(Vec<String>, TokenLabelSequence)>, TaggingError> {
    let mut docs = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if line.is_empty() {
            if !tokens.is_empty() {
                docs.push((std::mem::take(&mut tokens), TokenLabelSequence { labels: std::mem::take(&mut labels) }));
            }
            continue;
        }
        let (tok, lab) = line
            .rsplit_once(['\t', ' '])
            .ok_or_else(|| TaggingError::BadLabel(line.to_string()))?;
        tokens.push(tok.trim().to_string());
        labels.push(lab.parse()?);
    }
    if !tokens.is_empty() {
        docs.push((tokens, TokenLabelSequence { labels }));
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{TokenizedText, TypeSchema};

    fn e(s: usize, end: usize, t: &str) -> EntityMention {
        EntityMention::new(s, end, t)
    }

    fn strings(seq: &TokenLabelSequence) -> Vec<String> {
        seq.to_strings()
    }

    #[test]
    fn codeine_intoxication_preceding() {
        let ae = e(0, 2, "AE");
        let drug = e(0, 1, "DRUG");
        let (p, o) = select_preceding(&drug, &ae).unwrap();
        assert_eq!((p, o), (&ae, &drug));
        let (p, o) = select_preceding(&ae, &drug).unwrap();
        assert_eq!((p, o), (&ae, &drug));
    }

    #[test]
    fn earlier_head_wins() {
        let a = e(2, 6, "X");
        let b = e(5, 9, "Y");
        assert_eq!(select_preceding(&b, &a).unwrap().0, &a);
    }

    #[test]
    fn equal_head_longer_wins() {
        let a = e(4, 7, "X");
        let b = e(4, 5, "Y");
        assert_eq!(select_preceding(&b, &a).unwrap().0, &a);
    }

    #[test]
    fn disjoint_entities_are_an_error() {
        assert!(select_preceding(&e(0, 1, "X"), &e(1, 2, "X")).is_err());
    }

    #[test]
    fn figure_four_composite() {
        let doc = AnnotatedDocument {
            tokens: TokenizedText::new(["Codeine", "intoxication"]),
            entities: vec![e(0, 2, "AE"), e(0, 1, "DRUG")],
            relations: vec![],
        };
        let seq = encode_labels(&doc).unwrap();
        assert_eq!(strings(&seq), ["B-AE/B-DRUG", "I-AE"]);
        let mut got = decode_labels(&seq);
        got.sort();
        let mut want = doc.entities.clone();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn no_entities_gives_all_outside() {
        let seq = encode_entities(3, &[]).unwrap();
        assert_eq!(strings(&seq), ["O", "O", "O"]);
        assert!(decode_labels(&seq).is_empty());
    }

    #[test]
    fn three_fold_overlap_rejected() {
        let err = encode_entities(3, &[e(0, 3, "A"), e(0, 2, "B"), e(1, 2, "C")]).unwrap_err();
        assert_eq!(err, TaggingError::NotTwoFold { token: 1, count: 3 });
    }

    #[test]
    fn crossing_overlap_keeps_overlay_to_its_end() {
        let seq = encode_entities(5, &[e(0, 3, "A"), e(2, 5, "B")]).unwrap();
        assert_eq!(strings(&seq), ["B-A", "I-A", "I-A/B-B", "O/I-B", "O/I-B"]);
        assert_eq!(decode_labels(&seq), vec![e(0, 3, "A"), e(2, 5, "B")]);
    }

    #[test]
    fn overlap_chain_alternates_channels() {
        let ents = [e(0, 2, "A"), e(1, 4, "B"), e(3, 5, "C")];
        let seq = encode_entities(5, &ents).unwrap();
        assert_eq!(strings(&seq), ["B-A", "I-A/B-B", "O/I-B", "B-C/I-B", "I-C"]);
        assert_eq!(decode_labels(&seq), ents.to_vec());
    }

    #[test]
    fn repair_leading_inside() {
        let seq = TokenLabelSequence::parse(&["I-PER", "I-PER"]).unwrap();
        assert_eq!(decode_labels(&seq), vec![e(0, 2, "PER")]);
        let seq = TokenLabelSequence::parse(&["B-PER", "I-ORG", "I-ORG", "O", "I-LOC"]).unwrap();
        assert_eq!(decode_labels(&seq), vec![e(0, 1, "PER"), e(1, 3, "ORG"), e(4, 5, "LOC")]);
    }

    #[test]
    fn label_parsing() {
        assert!("B-".parse::<TokenLabel>().is_err());
        assert!("X-PER".parse::<TokenLabel>().is_err());
        assert!("B-PER/O".parse::<TokenLabel>().is_err());
        let l: TokenLabel = "I-AE/B-DRUG".parse().unwrap();
        assert_eq!(l.primary, Tag::I("AE".into()));
        assert_eq!(l.overlay, Some(Tag::B("DRUG".into())));
        assert_eq!(l.to_string(), "I-AE/B-DRUG");
        // Type names may themselves contain '-'.
        let l: TokenLabel = "B-Located-In".parse().unwrap();
        assert_eq!(l.primary, Tag::B("Located-In".into()));
    }

    fn dataset(docs: Vec<AnnotatedDocument>, types: &[&str]) -> Dataset {
        Dataset::new(docs, TypeSchema::new(types.iter().copied(), []).unwrap()).unwrap()
    }

    #[test]
    fn vocabulary_without_overlaps() {
        let docs = vec![AnnotatedDocument {
            tokens: TokenizedText::new(["Jack", "at", "Harvard"]),
            entities: vec![e(0, 1, "PER"), e(2, 3, "ORG")],
            relations: vec![],
        }];
        let v = build_label_vocabulary(&dataset(docs, &["PER", "ORG"])).unwrap();
        assert_eq!(v.labels(), ["O", "B-ORG", "B-PER", "I-ORG", "I-PER"]);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocabulary_of_empty_schema() {
        let v = build_label_vocabulary(&dataset(vec![], &[])).unwrap();
        assert_eq!(v.labels(), ["O"]);
    }

    #[test]
    fn vocabulary_materializes_observed_composites_only() {
        let doc = |toks: &[&str], ents: Vec<EntityMention>| AnnotatedDocument {
            tokens: TokenizedText::new(toks.iter().copied()),
            entities: ents,
            relations: vec![],
        };
        let docs = vec![
            doc(&["Codeine", "intoxication"], vec![e(0, 2, "AE"), e(0, 1, "DRUG")]),
            doc(&["aspirin", "caused", "rash"], vec![e(0, 1, "DRUG"), e(2, 3, "AE")]),
            doc(&["Codeine", "overdose", "seen"], vec![e(0, 2, "AE"), e(0, 1, "DRUG")]),
        ];
        let ds = dataset(docs, &["AE", "DRUG"]);
        let v = build_label_vocabulary(&ds).unwrap();

        let mut oracle = BTreeSet::new();
        oracle.insert("O".to_string());
        for d in &ds.documents {
            for l in encode_labels(d).unwrap().labels {
                oracle.insert(l.to_string());
            }
            for ent in &d.entities {
                oracle.insert(format!("B-{}", ent.entity_type));
                oracle.insert(format!("I-{}", ent.entity_type));
            }
        }
        assert_eq!(v.len(), oracle.len());
        assert_eq!(v.len(), 6);
        assert!(v.get("B-AE/B-DRUG").is_some());
        assert_eq!(v.label(0), "O");
    }

    #[test]
    fn conll_round_trip() {
        let seq = TokenLabelSequence::parse(&["B-AE/B-DRUG", "I-AE"]).unwrap();
        let docs = vec![(vec!["Codeine".to_string(), "intoxication".to_string()], seq)];
        let text = to_conll(&docs);
        assert_eq!(text, "Codeine\tB-AE/B-DRUG\nintoxication\tI-AE\n\n");
        assert_eq!(from_conll(&text).unwrap(), docs);
    }
}
