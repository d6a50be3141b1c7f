//! The stacked three-stream attention encoder.
//!
//! Each layer first fuses the entity and relation streams, lets the label
//! stream attend to the fusion (E&R-L-A), and then lets the entity and the
//! relation streams attend to the *updated* label stream (L-E-A, L-R-A).
//! All three units share one architecture: multi-head attention and a
//! position-wise FFN, each wrapped in a residual connection followed by
//! layer normalization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Graph, NodeId};

/// Epsilon inside the layer-norm square root. Normalized rows have variance
/// `σ² / (σ² + eps)`, so it is kept far below any realistic row variance.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("non-finite value in attention input")]
    NonFinite,
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("encoder needs at least one layer")]
    NoLayers,
    #[error("unknown interaction mode {0:?}")]
    UnknownMode(String),
}

/// Which streams the label stream attends to in E&R-L-A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    /// Keys/values are the fused entity and relation streams.
    #[default]
    Full,
    /// Keys/values are the entity stream only (no RE → NER flow).
    NoReToNer,
    /// Keys/values are the relation stream only (no NER → RE flow).
    NoNerToRe,
    /// Self-attention over the label stream.
    None,
}

impl InteractionMode {
    pub const ALL: [InteractionMode; 4] = [
        InteractionMode::Full,
        InteractionMode::NoReToNer,
        InteractionMode::NoNerToRe,
        InteractionMode::None,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InteractionMode::Full => "full",
            InteractionMode::NoReToNer => "no_re_to_ner",
            InteractionMode::NoNerToRe => "no_ner_to_re",
            InteractionMode::None => "none",
        }
    }
}

impl fmt::Display for InteractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InteractionMode {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| EncoderError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub interaction: InteractionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            dim: 64,
            interaction: InteractionMode::Full,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.layers == 0 {
            return Err(EncoderError::NoLayers);
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(EncoderError::Heads {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Parameters of one attention unit. Column block `i` of `w_q`, `w_k` and
/// `w_v` (width `dim / heads`) is the projection of head `i`.
#[derive(Debug, Clone, Copy)]
pub struct UnitParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub norm1_scale: ParamId,
    pub norm1_shift: ParamId,
    pub norm2_scale: ParamId,
    pub norm2_shift: ParamId,
}

impl UnitParams {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let name = |m: &str| format!("{prefix}/{m}");
        Self {
            w_q: store.weight(name("w_q"), dim, dim, rng),
            w_k: store.weight(name("w_k"), dim, dim, rng),
            w_v: store.weight(name("w_v"), dim, dim, rng),
            w_o: store.weight(name("w_o"), dim, dim, rng),
            w_1: store.weight(name("w_1"), dim, dim, rng),
            b_1: store.row(name("b_1"), dim, 0.0),
            w_2: store.weight(name("w_2"), dim, dim, rng),
            b_2: store.row(name("b_2"), dim, 0.0),
            norm1_scale: store.row(name("norm1_scale"), dim, 1.0),
            norm1_shift: store.row(name("norm1_shift"), dim, 0.0),
            norm2_scale: store.row(name("norm2_scale"), dim, 1.0),
            norm2_shift: store.row(name("norm2_shift"), dim, 0.0),
        }
    }
}

/// `H_C = [H_E; H_R] W_C + b_C`
#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub w_c: ParamId,
    pub b_c: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub fusion: FusionParams,
    /// E&R-L-A
    pub label_unit: UnitParams,
    /// L-E-A
    pub entity_unit: UnitParams,
    /// L-R-A
    pub relation_unit: UnitParams,
}

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
}

impl Projection {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.weight(format!("{prefix}/w"), input, output, rng),
            b: store.row(format!("{prefix}/b"), output, 0.0),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, x: NodeId) -> NodeId {
        let y = g.matmul(x, bound[self.w]);
        g.add_row(y, bound[self.b])
    }
}

/// Maps the token embeddings onto the three initial streams.
#[derive(Debug, Clone, Copy)]
pub struct InputProjections {
    pub label: Projection,
    pub entity: Projection,
    pub relation: Projection,
}

impl InputProjections {
    pub fn init(store: &mut ParamStore, input_dim: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            label: Projection::init(store, "input/label", input_dim, dim, rng),
            entity: Projection::init(store, "input/entity", input_dim, dim, rng),
            relation: Projection::init(store, "input/relation", input_dim, dim, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, bound: &Bound, embeddings: NodeId) -> StreamStates {
        StreamStates {
            label: self.label.apply(g, bound, embeddings),
            entity: self.entity.apply(g, bound, embeddings),
            relation: self.relation.apply(g, bound, embeddings),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub input: InputProjections,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// No parameters are shared across layers or unit types.
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, input_dim: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.dim;
        let input = InputProjections::init(store, input_dim, d, rng);
        let layers = (0..cfg.layers)
            .map(|k| {
                let p = format!("encoder/layer{k}");
                LayerParams {
                    fusion: FusionParams {
                        w_c: store.weight(format!("{p}/fusion/w_c"), 2 * d, d, rng),
                        b_c: store.row(format!("{p}/fusion/b_c"), d, 0.0),
                    },
                    label_unit: UnitParams::init(store, &format!("{p}/erla"), d, rng),
                    entity_unit: UnitParams::init(store, &format!("{p}/lea"), d, rng),
                    relation_unit: UnitParams::init(store, &format!("{p}/lra"), d, rng),
                }
            })
            .collect();
        Self { input, layers }
    }
}

/// Node ids of the label, entity and relation streams (`n × d` each).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStates {
    pub label: NodeId,
    pub entity: NodeId,
    pub relation: NodeId,
}

fn check_finite(g: &Graph, ids: &[NodeId]) -> Result<(), EncoderError> {
    if ids.iter().all(|&id| g.value(id).iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(EncoderError::NonFinite)
    }
}

/// `concat(head_1..head_h) W_O` with
/// `head_i = softmax((Q W_Q^i)(K W_K^i)ᵀ / sqrt(d/h)) (V W_V^i)`.
pub fn multi_head_attention(
    g: &mut Graph,
    bound: &Bound,
    unit: &UnitParams,
    heads: usize,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, EncoderError> {
    check_finite(g, &[q, k, v])?;
    let d = g.value(q).ncols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(EncoderError::Heads { dim: d, heads });
    }
    let dk = d / heads;
    let qp = g.matmul(q, bound[unit.w_q]);
    let kp = g.matmul(k, bound[unit.w_k]);
    let vp = g.matmul(v, bound[unit.w_v]);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let qh = g.slice_cols(qp, lo, hi);
        let kh = g.slice_cols(kp, lo, hi);
        let vh = g.slice_cols(vp, lo, hi);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores);
        outputs.push(g.matmul(weights, vh));
    }
    let concat = if heads == 1 { outputs[0] } else { g.concat_cols(&outputs) };
    Ok(g.matmul(concat, bound[unit.w_o]))
}

/// `max(0, X W_1 + b_1) W_2 + b_2`, row by row.
pub fn position_wise_ffn(g: &mut Graph, bound: &Bound, unit: &UnitParams, x: NodeId) -> NodeId {
    let h = g.matmul(x, bound[unit.w_1]);
    let h = g.add_row(h, bound[unit.b_1]);
    let h = g.relu(h);
    let y = g.matmul(h, bound[unit.w_2]);
    g.add_row(y, bound[unit.b_2])
}

pub fn layer_norm(g: &mut Graph, bound: &Bound, x: NodeId, scale: ParamId, shift: ParamId) -> NodeId {
    let xhat = g.layer_norm_rows(x, LAYER_NORM_EPS);
    let y = g.mul_row(xhat, bound[scale]);
    g.add_row(y, bound[shift])
}

/// Post-norm attention unit; both residuals add onto the query stream.
pub fn attention_unit(
    g: &mut Graph,
    bound: &Bound,
    unit: &UnitParams,
    heads: usize,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, EncoderError> {
    let attended = multi_head_attention(g, bound, unit, heads, q, k, v)?;
    let residual = g.add(q, attended);
    let a = layer_norm(g, bound, residual, unit.norm1_scale, unit.norm1_shift);
    let ffn = position_wise_ffn(g, bound, unit, a);
    let residual = g.add(a, ffn);
    Ok(layer_norm(g, bound, residual, unit.norm2_scale, unit.norm2_shift))
}

pub fn fuse_streams(g: &mut Graph, bound: &Bound, fusion: &FusionParams, entity: NodeId, relation: NodeId) -> NodeId {
    let cat = g.concat_cols(&[entity, relation]);
    let y = g.matmul(cat, bound[fusion.w_c]);
    g.add_row(y, bound[fusion.b_c])
}

pub fn encode_layer(
    g: &mut Graph,
    bound: &Bound,
    layer: &LayerParams,
    heads: usize,
    mode: InteractionMode,
    states: StreamStates,
) -> Result<StreamStates, EncoderError> {
    let context = match mode {
        InteractionMode::Full => fuse_streams(g, bound, &layer.fusion, states.entity, states.relation),
        InteractionMode::NoReToNer => states.entity,
        InteractionMode::NoNerToRe => states.relation,
        InteractionMode::None => states.label,
    };
    let label = attention_unit(g, bound, &layer.label_unit, heads, states.label, context, context)?;
    let entity = attention_unit(g, bound, &layer.entity_unit, heads, states.entity, label, label)?;
    let relation = attention_unit(g, bound, &layer.relation_unit, heads, states.relation, label, label)?;
    Ok(StreamStates {
        label,
        entity,
        relation,
    })
}

/// Projects the embeddings onto the three streams and runs every layer.
pub fn encode_stack(
    g: &mut Graph,
    bound: &Bound,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    embeddings: NodeId,
) -> Result<StreamStates, EncoderError> {
    cfg.validate()?;
    check_finite(g, &[embeddings])?;
    let mut states = params.input.apply(g, bound, embeddings);
    for layer in &params.layers {
        states = encode_layer(g, bound, layer, cfg.heads, cfg.interaction, states)?;
    }
    Ok(states)
}
