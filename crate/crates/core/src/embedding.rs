//! Token embeddings: a deterministic toy embedder and an import path for
//! sub-token vectors produced by an external contextual encoder, aligned to
//! tokens by element-wise max-pooling.

use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedDocument, TokenizedText};
use crate::tape::Mat;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {doc_id}: dimension {found} does not match expected {expected}")]
    Dimension {
        doc_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("grouping not a partition: groups cover {covered} of {rows} sub-token rows")]
    NotPartition { covered: usize, rows: usize },
    #[error("token {0} has an empty sub-token group")]
    EmptyGroup(usize),
    #[error("record {doc_id}: {groups} token groups for a document of {tokens} tokens")]
    TokenCount {
        doc_id: usize,
        groups: usize,
        tokens: usize,
    },
    #[error("no precomputed embeddings for document {0}")]
    Missing(usize),
    #[error("non-finite embedding value in record {0}")]
    NonFinite(usize),
    #[error("embedding dimension {dim} must be positive and divisible by {heads} heads")]
    Config { dim: usize, heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderMode {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    pub mode: EmbedderMode,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 42,
            mode: EmbedderMode::Toy,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self, heads: usize) -> Result<(), EmbeddingError> {
        if self.dim == 0 || heads == 0 || !self.dim.is_multiple_of(heads) {
            return Err(EmbeddingError::Config {
                dim: self.dim,
                heads,
            });
        }
        Ok(())
    }
}

/// Rows are tokens, columns are features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    pub vectors: Mat,
}

impl TokenEmbeddingSequence {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Sub-token vectors plus the number of consecutive rows belonging to each token.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtokenEmbeddingSequence {
    vectors: Mat,
    groups: Vec<usize>,
}

impl SubtokenEmbeddingSequence {
    pub fn new(vectors: Mat, groups: Vec<usize>) -> Result<Self, EmbeddingError> {
        if let Some(i) = groups.iter().position(|&g| g == 0) {
            return Err(EmbeddingError::EmptyGroup(i));
        }
        let covered: usize = groups.iter().sum();
        if covered != vectors.nrows() {
            return Err(EmbeddingError::NotPartition {
                covered,
                rows: vectors.nrows(),
            });
        }
        Ok(Self { vectors, groups })
    }

    pub fn vectors(&self) -> &Mat {
        &self.vectors
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn token_count(&self) -> usize {
        self.groups.len()
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// The content part of a toy embedding: FNV-1a of the UTF-8 token mixed with
/// the seed keys a ChaCha8 stream, from which `dim` values are drawn
/// uniformly in `[-1, 1]`.
pub fn token_vector(token: &str, seed: u64, dim: usize) -> Vec<f64> {
    let key = fnv1a(token.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Sinusoidal position encoding: `sin(pos / 10000^(2k/dim))` on even
/// features and the matching cosine on odd ones.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Embeds each token as `token_vector + position_encoding`.
pub fn toy_embed(text: &TokenizedText, cfg: &EmbedderConfig) -> TokenEmbeddingSequence {
    let n = text.len();
    let mut vectors = Array2::zeros((n, cfg.dim));
    for (pos, tok) in text.tokens.iter().enumerate() {
        let content = token_vector(tok, cfg.seed, cfg.dim);
        let position = position_encoding(pos, cfg.dim);
        for (j, (c, p)) in content.iter().zip(&position).enumerate() {
            vectors[[pos, j]] = c + p;
        }
    }
    TokenEmbeddingSequence { vectors }
}

/// Max-pools each token's sub-token rows into one row.
pub fn align_subtokens(sub: &SubtokenEmbeddingSequence) -> TokenEmbeddingSequence {
    let dim = sub.vectors.ncols();
    let mut out = Array2::from_elem((sub.groups.len(), dim), f64::NEG_INFINITY);
    let mut row = 0;
    for (t, &count) in sub.groups.iter().enumerate() {
        for r in row..row + count {
            for c in 0..dim {
                out[[t, c]] = out[[t, c]].max(sub.vectors[[r, c]]);
            }
        }
        row += count;
    }
    TokenEmbeddingSequence { vectors: out }
}

#[derive(Debug, Deserialize, Serialize)]
struct PrecomputedRecord {
    doc_id: usize,
    dim: usize,
    groups: Vec<usize>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedDocument {
    pub doc_id: usize,
    pub subtokens: SubtokenEmbeddingSequence,
}

/// Reads a JSONL file of sub-token embeddings, one document per line.
pub fn load_precomputed(
    path: impl AsRef<Path>,
    expected_dim: usize,
) -> Result<Vec<PrecomputedDocument>, EmbeddingError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| EmbeddingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_precomputed_line(&line, i + 1, expected_dim)?);
    }
    Ok(out)
}

pub fn parse_precomputed_line(
    line: &str,
    line_no: usize,
    expected_dim: usize,
) -> Result<PrecomputedDocument, EmbeddingError> {
    let rec: PrecomputedRecord = serde_json::from_str(line).map_err(|source| EmbeddingError::Json {
        line: line_no,
        source,
    })?;
    let mismatch = |found| EmbeddingError::Dimension {
        doc_id: rec.doc_id,
        expected: expected_dim,
        found,
    };
    if rec.dim != expected_dim {
        return Err(mismatch(rec.dim));
    }
    if let Some(bad) = rec.vectors.iter().find(|v| v.len() != expected_dim) {
        return Err(mismatch(bad.len()));
    }
    if rec.vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(EmbeddingError::NonFinite(rec.doc_id));
    }
    let flat: Vec<f64> = rec.vectors.iter().flatten().copied().collect();
    let vectors = Array2::from_shape_vec((rec.vectors.len(), expected_dim), flat)
        .expect("row lengths checked");
    Ok(PrecomputedDocument {
        doc_id: rec.doc_id,
        subtokens: SubtokenEmbeddingSequence::new(vectors, rec.groups)?,
    })
}

/// Serializes one record in the JSONL format read by [`load_precomputed`].
pub fn precomputed_line(doc_id: usize, sub: &SubtokenEmbeddingSequence) -> String {
    let rec = PrecomputedRecord {
        doc_id,
        dim: sub.vectors.ncols(),
        groups: sub.groups.clone(),
        vectors: sub.vectors.axis_iter(Axis(0)).map(|r| r.to_vec()).collect(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

/// Aligns precomputed records to documents by `doc_id` (the document's index).
pub fn pair_with_documents(
    records: &[PrecomputedDocument],
    docs: &[AnnotatedDocument],
) -> Result<Vec<TokenEmbeddingSequence>, EmbeddingError> {
    let mut by_id = vec![None; docs.len()];
    for rec in records {
        if rec.doc_id < docs.len() {
            by_id[rec.doc_id] = Some(rec);
        }
    }
    by_id
        .into_iter()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.ok_or(EmbeddingError::Missing(i))?;
            check_pairing(rec, &docs[i])?;
            Ok(align_subtokens(&rec.subtokens))
        })
        .collect()
}

pub fn check_pairing(rec: &PrecomputedDocument, doc: &AnnotatedDocument) -> Result<(), EmbeddingError> {
    if rec.subtokens.token_count() != doc.len() {
        return Err(EmbeddingError::TokenCount {
            doc_id: rec.doc_id,
            groups: rec.subtokens.token_count(),
            tokens: doc.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn toy_embedding_is_deterministic() {
        let cfg = EmbedderConfig { dim: 16, seed: 7, mode: EmbedderMode::Toy };
        let text = TokenizedText::new(["Jack", "works", "Jack"]);
        let a = toy_embed(&text, &cfg);
        let b = toy_embed(&text, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.vectors.dim(), (3, 16));
        assert!(a.vectors.iter().all(|v| v.is_finite()));
        // Same token, different position: content equal, encoding differs.
        assert_ne!(a.vectors.row(0), a.vectors.row(2));
        let other = toy_embed(&text, &EmbedderConfig { seed: 8, ..cfg });
        assert_ne!(a.vectors.row(0), other.vectors.row(0));
    }

    #[test]
    fn jack_golden_vector() {
        let v = token_vector("Jack", 42, 4);
        let golden = [
            -0.8250332030665137,
            -0.3086414624625812,
            0.5710169961304454,
            0.9927583868496943,
        ];
        for (a, b) in v.iter().zip(golden) {
            assert_eq!(*a, b);
        }
        // At position 0 the encoding is [sin 0, cos 0, sin 0, cos 0].
        let cfg = EmbedderConfig { dim: 4, seed: 42, mode: EmbedderMode::Toy };
        let e = toy_embed(&TokenizedText::new(["Jack"]), &cfg);
        let want = [golden[0], golden[1] + 1.0, golden[2], golden[3] + 1.0];
        for (a, b) in e.vectors.row(0).iter().zip(want) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn align_takes_elementwise_max() {
        let sub = SubtokenEmbeddingSequence::new(array![[1.0, 0.0], [0.0, 2.0]], vec![2]).unwrap();
        assert_eq!(align_subtokens(&sub).vectors, array![[1.0, 2.0]]);
    }

    #[test]
    fn align_singletons_is_identity() {
        let m = array![[1.0, -3.0], [0.5, 2.0], [-1.0, 0.0]];
        let sub = SubtokenEmbeddingSequence::new(m.clone(), vec![1, 1, 1]).unwrap();
        assert_eq!(align_subtokens(&sub).vectors, m);
    }

    #[test]
    fn three_tokens_from_five_subtokens() {
        let m = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64);
        let sub = SubtokenEmbeddingSequence::new(m, vec![2, 1, 2]).unwrap();
        let out = align_subtokens(&sub);
        assert_eq!(out.len(), 3);
        assert_eq!(out.vectors.row(0).to_vec(), vec![3.0, 4.0, 5.0]);
        assert_eq!(out.vectors.row(2).to_vec(), vec![12.0, 13.0, 14.0]);
    }

    #[test]
    fn bad_groupings_are_rejected() {
        let m = Array2::zeros((5, 2));
        assert!(matches!(
            SubtokenEmbeddingSequence::new(m.clone(), vec![2, 2]),
            Err(EmbeddingError::NotPartition { covered: 4, rows: 5 })
        ));
        let err = SubtokenEmbeddingSequence::new(m.clone(), vec![2, 2]).unwrap_err();
        assert!(err.to_string().contains("grouping not a partition"));
        assert!(matches!(
            SubtokenEmbeddingSequence::new(m, vec![3, 0, 2]),
            Err(EmbeddingError::EmptyGroup(1))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let line = r#"{"doc_id":0,"dim":2,"groups":[1],"vectors":[[1.0,2.0]]}"#;
        assert!(matches!(
            parse_precomputed_line(line, 1, 3),
            Err(EmbeddingError::Dimension { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn config_requires_divisible_dim() {
        assert!(EmbedderConfig { dim: 64, ..Default::default() }.validate(8).is_ok());
        assert!(EmbedderConfig { dim: 10, ..Default::default() }.validate(4).is_err());
        assert!(EmbedderConfig { dim: 0, ..Default::default() }.validate(1).is_err());
    }
}
