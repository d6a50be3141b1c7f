//! Training from scratch at a learning rate suited to randomly initialized
//! encoders. Complements the overfit acceptance criterion, which runs at the
//! default fine-tuning rate.

mod common;

use std::ops::ControlFlow;

use stsn::data::Dataset;
use stsn::embedding::{toy_embed, EmbedderConfig};
use stsn::encoder::{EncoderConfig, InteractionMode};
use stsn::evaluation::{evaluate, Aggregation, Annotations, Criterion};
use stsn::heads::HeadConfig;
use stsn::model::{Architecture, Model, ModelConfig};
use stsn::tagging::build_label_vocabulary;
use stsn::tape::Mat;
use stsn::training::{train, TrainConfig};

fn epochs_to_fit(data: &Dataset, embs: &[Mat], architecture: Architecture) -> Option<usize> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            layers: 3,
            heads: 8,
            dim: 64,
            interaction: InteractionMode::Full,
        },
        heads: HeadConfig::default(),
        architecture,
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 200,
        ..Default::default()
    };
    let mut model = Model::new(config, data.schema.clone(), build_label_vocabulary(data).unwrap(), 64, 0).unwrap();
    let examples: Vec<_> = data
        .documents
        .iter()
        .zip(embs)
        .map(|(d, e)| model.prepare(d, e.clone()).unwrap())
        .collect();
    let gold: Vec<Annotations> = data.documents.iter().map(Annotations::from).collect();
    let mut reached = None;
    train(&mut model, &examples, &cfg, |log, m| {
        let pred: Vec<Annotations> = embs.iter().map(|e| Annotations::from(&m.predict(e).unwrap())).collect();
        let f1 = |c| evaluate(&gold, &pred, c, Aggregation::Micro, None).unwrap().overall.f1;
        if f1(Criterion::NerBoundaryType) >= 0.99 && f1(Criterion::RePlus) >= 0.95 {
            reached = Some(log.epoch);
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    })
    .unwrap();
    reached
}

#[test]
fn templated_corpus_is_fit_at_a_from_scratch_learning_rate() {
    let data = common::templated_corpus(50, 0);
    let embedder = EmbedderConfig::default();
    let embs: Vec<Mat> = data.documents.iter().map(|d| toy_embed(&d.tokens, &embedder).vectors).collect();
    let stacked = epochs_to_fit(&data, &embs, Architecture::Stacked).expect("stacked model fits the corpus");
    let bare = epochs_to_fit(&data, &embs, Architecture::NoLabel);
    assert!(bare.is_none_or(|b| b >= stacked), "no_label fit at epoch {bare:?}, stacked at {stacked}");
}
