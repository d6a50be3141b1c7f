//! Run configuration: one TOML file, defaults for everything omitted.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use stsn::embedding::EmbedderConfig;
use stsn::encoder::{EncoderConfig, InteractionMode};
use stsn::evaluation::{Aggregation, Criterion};
use stsn::heads::HeadConfig;
use stsn::model::{Architecture, ModelConfig};
use stsn::training::TrainConfig;

/// Invalid configuration. Reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Model variant: the four interaction modes plus the label-free ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoReToNer,
    NoNerToRe,
    None,
    NoLabel,
}

impl Variant {
    pub const MODES: [Variant; 4] = [Variant::Full, Variant::NoReToNer, Variant::NoNerToRe, Variant::None];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoReToNer => "no_re_to_ner",
            Variant::NoNerToRe => "no_ner_to_re",
            Variant::None => "none",
            Variant::NoLabel => "no_label",
        }
    }

    pub fn interaction(&self) -> InteractionMode {
        match self {
            Variant::NoReToNer => InteractionMode::NoReToNer,
            Variant::NoNerToRe => InteractionMode::NoNerToRe,
            Variant::None => InteractionMode::None,
            Variant::Full | Variant::NoLabel => InteractionMode::Full,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Variant::NoLabel => Architecture::NoLabel,
            _ => Architecture::Stacked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub negative_spans: usize,
    pub negative_relations: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            negative_spans: t.negative_spans,
            negative_relations: t.negative_relations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// Number of stacked layers N.
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Span width threshold ε.
    pub max_width: usize,
    /// Width embedding size d_w.
    pub width_dim: usize,
    /// Relation threshold α.
    pub alpha: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        let h = HeadConfig::default();
        Self {
            layers: e.layers,
            heads: e.heads,
            dim: e.dim,
            max_width: h.max_width,
            width_dim: h.width_dim,
            alpha: h.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// Held-out documents for evaluate/predict/analyze/ablate; `dataset` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<PathBuf>,
    /// Precomputed sub-token embeddings for `dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_embeddings: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predictions: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Variant,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_folds: Option<usize>,
    pub criteria: Vec<Criterion>,
    pub aggregation: Aggregation,
    /// Adds the label-free variant as a fifth ablation row.
    pub ablate_no_label: bool,
    pub max_tokens: usize,
    pub train: TrainSection,
    pub model: ModelSection,
    pub embedder: EmbedderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            schema: None,
            eval_dataset: None,
            embeddings: None,
            eval_embeddings: None,
            checkpoint: None,
            predictions: None,
            output_dir: PathBuf::from("runs"),
            mode: Variant::Full,
            seed: 0,
            k_folds: None,
            criteria: vec![Criterion::NerBoundaryType, Criterion::ReBoundary, Criterion::RePlus],
            aggregation: Aggregation::Micro,
            ablate_no_label: false,
            max_tokens: stsn::data::DEFAULT_MAX_TOKENS,
            train: TrainSection::default(),
            model: ModelSection::default(),
            embedder: EmbedderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text; every unknown key is reported at once.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| config_error(format!("invalid configuration: {e}")))?;
        if !unknown.is_empty() {
            return Err(config_error(format!("unknown configuration keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let alpha = self.model.alpha;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(config_error(format!("model.alpha = {alpha} must lie strictly between 0 and 1")));
        }
        let m = &self.model;
        if m.layers == 0 || m.heads == 0 || m.dim == 0 || m.max_width == 0 || m.width_dim == 0 {
            return Err(config_error("model sizes must be positive"));
        }
        if !m.dim.is_multiple_of(m.heads) {
            return Err(config_error(format!("model.dim = {} is not divisible by model.heads = {}", m.dim, m.heads)));
        }
        if self.embedder.dim == 0 {
            return Err(config_error("embedder.dim must be positive"));
        }
        self.train_config()
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        if let Some(k) = self.k_folds {
            if k < 2 {
                return Err(config_error(format!("k_folds = {k} must be at least 2")));
            }
        }
        if self.criteria.is_empty() {
            return Err(config_error("criteria must not be empty"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            warmup_ratio: t.warmup_ratio,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            negative_spans: t.negative_spans,
            negative_relations: t.negative_relations,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            encoder: EncoderConfig {
                layers: m.layers,
                heads: m.heads,
                dim: m.dim,
                interaction: variant.interaction(),
            },
            heads: HeadConfig {
                max_width: m.max_width,
                width_dim: m.width_dim,
                alpha: m.alpha,
            },
            architecture: variant.architecture(),
        }
    }

    /// The path a command cannot run without.
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| config_error(format!("`{key}` must be set for this command")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_toml("dataset = \"d.json\"").unwrap();
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!(c.train.warmup_ratio, 0.1);
        assert_eq!(c.train.weight_decay, 1e-2);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model.width_dim, 150);
        assert_eq!(c.model.heads, 8);
        assert_eq!(c.model.max_width, 10);
        assert_eq!(c.model.alpha, 0.4);
        assert_eq!(c.model.layers, 3);
        assert_eq!((c.train.negative_spans, c.train.negative_relations), (100, 100));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_toml("colour = 1\n[model]\nalpha = 0.5\ndepth = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(err.downcast_ref::<ConfigError>().is_some());
        assert!(msg.contains("colour") && msg.contains("model.depth"), "{msg}");
    }

    #[test]
    fn alpha_outside_unit_interval() {
        for a in ["1.5", "0.0", "1.0"] {
            let err = RunConfig::from_toml(&format!("[model]\nalpha = {a}\n")).unwrap_err();
            assert!(err.downcast_ref::<ConfigError>().is_some());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut c = RunConfig::from_toml("dataset = \"d.json\"\ncriteria = [\"ner\", \"re_plus\"]\nk_folds = 10\n").unwrap();
        c.mode = Variant::NoNerToRe;
        c.model.alpha = 0.3;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    }
}
