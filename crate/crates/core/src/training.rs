//! Losses, the optimizer and schedule, the training loop, checkpoints and
//! finite-difference gradient verification.

use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedDocument, EntityMention, RelationMention, TokenizedText, TypeSchema};
use crate::encoder::{EncoderConfig, InteractionMode};
use crate::heads::{sample_negatives, HeadConfig, Negatives};
use crate::model::{Architecture, Example, LossBreakdown, Model, ModelConfig, ModelError};
use crate::params::ParamStore;
use crate::tagging::{encode_labels, LabelVocabulary};
use crate::tape::{Graph, Mat, PROB_CLAMP};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what} in parameter group {group}")]
    NonFinite { what: &'static str, group: String },
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negative_spans: usize,
    pub negative_relations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            warmup_ratio: 0.1,
            weight_decay: 1e-2,
            batch_size: 4,
            epochs: 100,
            negative_spans: 100,
            negative_relations: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup ratio must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        Ok(())
    }
}

/// `−(1/M) Σ ln p_gold` over rows of a probability matrix, with clamping.
pub fn cross_entropy(probs: &Mat, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs[[i, t]].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
        .sum();
    total / targets.len() as f64
}

/// Tagging loss: mean cross-entropy over tokens.
pub fn tagging_loss(probs: &Mat, gold: &[usize]) -> f64 {
    cross_entropy(probs, gold)
}

/// Span loss: mean cross-entropy over span instances.
pub fn span_loss(probs: &Mat, targets: &[usize]) -> f64 {
    cross_entropy(probs, targets)
}

/// Relation loss: binary cross-entropy summed over types, averaged over pairs.
pub fn relation_loss(scores: &Mat, targets: &Mat) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(targets.iter())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / scores.nrows() as f64
}

/// Linear warmup to `base` over the first `warmup_ratio` of steps, then
/// linear decay to zero at `total`. `step` counts from zero.
pub fn learning_rate_at(step: usize, total: usize, warmup_ratio: f64, base: f64) -> f64 {
    let warmup = (total as f64 * warmup_ratio) as usize;
    if step < warmup {
        base * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        base * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.entries().iter().map(|e| Mat::zeros(e.value.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update; `grads[i]` belongs to the i-th parameter of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.first[i], &mut self.second[i], &grads[i]);
            if entry.decay {
                entry.value *= 1.0 - lr * self.weight_decay;
            }
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                });
        }
    }
}

/// Loss and gradients of one batch, one gradient per parameter (zeros for
/// parameters the loss does not reach).
pub fn batch_gradients(
    model: &Model,
    batch: &[(&Example, &Negatives)],
) -> Result<(LossBreakdown, Vec<Mat>), TrainError> {
    let mut g = Graph::new();
    let bound = model.store.bind(&mut g);
    let (nodes, loss) = model.batch_loss(&mut g, &bound, batch)?;
    if !loss.l_joint.is_finite() {
        return Err(TrainError::NonFinite {
            what: "loss",
            group: "joint".into(),
        });
    }
    let mut grads = g.backward(nodes.joint);
    let mut out = Vec::with_capacity(model.store.len());
    for (entry, &node) in model.store.entries().iter().zip(bound.nodes()) {
        let grad = grads.take(node).unwrap_or_else(|| Mat::zeros(entry.value.dim()));
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "gradient",
                group: entry.name.clone(),
            });
        }
        out.push(grad);
    }
    Ok((loss, out))
}

/// Computes the joint loss of a batch, back-propagates, and applies one
/// optimizer update at learning rate `lr`.
pub fn joint_step(
    model: &mut Model,
    optimizer: &mut AdamW,
    batch: &[(&Example, &Negatives)],
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    let (loss, grads) = batch_gradients(model, batch)?;
    optimizer.update(&mut model.store, &grads, lr);
    Ok(loss)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_L")]
    pub l_l: f64,
    #[serde(rename = "L_E")]
    pub l_e: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_joint")]
    pub l_joint: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub wall_time_s: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the negatives of document `doc` in `epoch`.
pub fn negative_seed(seed: u64, epoch: usize, doc: usize) -> u64 {
    mix(mix(seed, epoch as u64 + 1), doc as u64 + 1)
}

pub fn total_steps(examples: usize, cfg: &TrainConfig) -> usize {
    examples.div_ceil(cfg.batch_size) * cfg.epochs
}

/// Trains for `cfg.epochs` epochs. Documents are shuffled every epoch and
/// negatives redrawn, both from `cfg.seed`. `on_epoch` sees every log line
/// and the model after that epoch, and can stop training early with
/// `ControlFlow::Break`.
pub fn train(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<ControlFlow<()>, TrainError>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    let mut optimizer = AdamW::new(&model.store, cfg.weight_decay);
    let total = total_steps(examples.len(), cfg);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let max_width = model.config.heads.max_width;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let negatives: Vec<Negatives> = (0..examples.len())
            .map(|i| {
                sample_negatives(
                    &examples[i].doc,
                    max_width,
                    cfg.negative_spans,
                    cfg.negative_relations,
                    negative_seed(cfg.seed, epoch, i),
                )
            })
            .collect();
        let mut sums = [0.0; 4];
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Example, &Negatives)> = chunk.iter().map(|&i| (&examples[i], &negatives[i])).collect();
            lr = learning_rate_at(step, total, cfg.warmup_ratio, cfg.learning_rate);
            let loss = joint_step(model, &mut optimizer, &batch, lr)?;
            for (s, v) in sums.iter_mut().zip([loss.l_l, loss.l_e, loss.l_r, loss.l_joint]) {
                *s += v;
            }
            batches += 1;
            step += 1;
        }
        let n = batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            l_l: sums[0] / n,
            l_e: sums[1] / n,
            l_r: sums[2] / n,
            l_joint: sums[3] / n,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {epoch}: joint loss {:.6}", log.l_joint);
        let flow = on_epoch(&log, model)?;
        logs.push(log);
        if flow.is_break() {
            break;
        }
    }
    Ok(logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schema: TypeSchema,
    pub labels: Vec<String>,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    /// Row-major.
    pub data: Vec<f64>,
}

/// A JSON header plus every parameter keyed by its path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: BTreeMap<String, Tensor>,
}

pub const CHECKPOINT_FORMAT: &str = "stsn-checkpoint/1";

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig) -> Self {
        let params = model
            .store
            .entries()
            .iter()
            .map(|e| {
                let (r, c) = e.value.dim();
                (
                    e.name.clone(),
                    Tensor {
                        shape: [r, c],
                        data: e.value.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.to_string(),
                model: model.config,
                train: *train,
                schema: model.schema.clone(),
                labels: model.vocab.labels().to_vec(),
                input_dim: model.input_dim,
            },
            params,
        }
    }

    /// Rebuilds the model and overwrites every parameter from the archive.
    pub fn into_model(self) -> Result<Model, TrainError> {
        let h = self.header;
        if h.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Format(format!("unknown format {:?}", h.format)));
        }
        let vocab = LabelVocabulary::from_labels(h.labels.iter().cloned());
        if vocab.labels() != h.labels.as_slice() {
            return Err(TrainError::Format("label vocabulary is not in canonical order".into()));
        }
        let mut model = Model::new(h.model, h.schema, vocab, h.input_dim, 0)?;
        if model.store.len() != self.params.len() {
            return Err(TrainError::Format(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for entry in model.store.entries_mut() {
            let t = self
                .params
                .get(&entry.name)
                .ok_or_else(|| TrainError::Format(format!("missing parameter {}", entry.name)))?;
            let value = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| TrainError::Format(format!("{}: {e}", entry.name)))?;
            if value.dim() != entry.value.dim() {
                return Err(TrainError::Format(format!(
                    "{}: shape {:?}, expected {:?}",
                    entry.name,
                    t.shape,
                    entry.value.dim()
                )));
            }
            entry.value = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| TrainError::Format(e.to_string()))?;
        fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Format(e.to_string()))
    }
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub tokens: usize,
    pub width_dim: usize,
    pub max_width: usize,
    pub entity_types: usize,
    pub relation_types: usize,
    pub mode: InteractionMode,
    pub architecture: Architecture,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            heads: 2,
            layers: 2,
            tokens: 5,
            width_dim: 4,
            max_width: 3,
            entity_types: 2,
            relation_types: 2,
            mode: InteractionMode::Full,
            architecture: Architecture::Stacked,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, or the absolute
    /// difference norm when both gradients vanish.
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mode: InteractionMode,
    pub architecture: Architecture,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GroupCheck> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// A small random document and model for gradient checking.
pub fn gradcheck_fixture(cfg: &GradCheckConfig) -> Result<(Model, Example, Negatives), TrainError> {
    let entity_types: Vec<String> = (0..cfg.entity_types).map(|i| format!("E{i}")).collect();
    let relation_types: Vec<String> = (0..cfg.relation_types).map(|i| format!("R{i}")).collect();
    let schema = TypeSchema::new(entity_types.clone(), relation_types.clone())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let n = cfg.tokens;
    let mut entities = Vec::new();
    if cfg.entity_types > 0 && n >= 1 {
        entities.push(EntityMention::new(0, 1, entity_types[0].clone()));
        if n >= 4 {
            entities.push(EntityMention::new(2, 4, entity_types[1 % cfg.entity_types].clone()));
        }
    }
    let mut relations = Vec::new();
    if cfg.relation_types > 0 && entities.len() == 2 {
        relations.push(RelationMention::new(0, 1, relation_types[0].clone()));
        relations.push(RelationMention::new(1, 0, relation_types[cfg.relation_types - 1].clone()));
    }
    let doc = AnnotatedDocument {
        tokens: TokenizedText::new((0..n).map(|i| format!("w{i}"))),
        entities,
        relations,
    };
    let labels = encode_labels(&doc).map_err(ModelError::from)?;
    let mut all = vec!["O".to_string()];
    for t in &entity_types {
        all.push(format!("B-{t}"));
        all.push(format!("I-{t}"));
    }
    all.extend(labels.to_strings());
    let vocab = LabelVocabulary::from_labels(all);
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: cfg.layers,
            heads: cfg.heads,
            dim: cfg.dim,
            interaction: cfg.mode,
        },
        heads: HeadConfig {
            max_width: cfg.max_width,
            width_dim: cfg.width_dim,
            alpha: 0.4,
        },
        architecture: cfg.architecture,
    };
    let mut model = Model::new(config, schema, vocab, cfg.dim, cfg.seed)?;
    // Random biases and norm parameters so that no group sits at a special point.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for entry in model.store.entries_mut() {
        if !entry.decay {
            entry.value.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
        }
    }
    let emb = Mat::from_shape_simple_fn((n, cfg.dim), || rng.gen_range(-1.0..1.0));
    let ex = model.prepare(&doc, emb)?;
    let neg = sample_negatives(&doc, cfg.max_width, 100, 100, cfg.seed);
    Ok((model, ex, neg))
}

/// Compares analytic gradients of the joint loss with central finite
/// differences, per parameter group. `tamper` may rewrite an analytic
/// gradient before comparison (used to confirm the check catches errors).
pub fn check_gradients(
    cfg: &GradCheckConfig,
    tamper: Option<&dyn Fn(&str, &mut Mat)>,
) -> Result<GradCheckReport, TrainError> {
    let (mut model, ex, neg) = gradcheck_fixture(cfg)?;
    let batch = [(&ex, &neg)];
    let (_, mut analytic) = batch_gradients(&model, &batch)?;
    if let Some(f) = tamper {
        for (entry, grad) in model.store.entries().iter().zip(analytic.iter_mut()) {
            f(&entry.name, grad);
        }
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for (i, (id, grad)) in ids.into_iter().zip(&analytic).enumerate() {
        let name = model.store.entries()[i].name.clone();
        let mut numeric = Mat::zeros(grad.dim());
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.store.get(id)[[r, c]];
            model.store.get_mut(id)[[r, c]] = orig + cfg.step;
            let plus = model.loss(&batch)?.l_joint;
            model.store.get_mut(id)[[r, c]] = orig - cfg.step;
            let minus = model.loss(&batch)?.l_joint;
            model.store.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (plus - minus) / (2.0 * cfg.step);
        }
        let norm = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff = norm(&(grad - &numeric));
        let scale = norm(grad).max(norm(&numeric));
        let relative_error = if scale > 1e-10 { diff / scale } else { diff };
        groups.push(GroupCheck {
            name,
            relative_error,
            passed: relative_error <= cfg.tolerance,
        });
    }
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        mode: cfg.mode,
        architecture: cfg.architecture,
        tolerance: cfg.tolerance,
        passed: groups.iter().all(|g| g.passed),
        groups,
        max_relative_error,
    })
}
