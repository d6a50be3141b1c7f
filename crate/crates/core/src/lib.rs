//! Joint entity and relation extraction with a sequence-tagging-augmented
//! span network.
//!
//! Documents are encoded by three interacting attention streams (label,
//! entity, relation). A tagging head reads the label stream, and span and
//! relation classifiers read the other two.

pub mod data;
pub mod embedding;
pub mod encoder;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod params;
pub mod tagging;
pub mod tape;
pub mod training;
