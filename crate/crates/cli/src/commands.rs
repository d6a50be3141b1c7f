//! The workflows behind each subcommand.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stsn::data::{parse_dataset_str, BucketKind, Dataset, TypeSchema};
use stsn::embedding::{load_precomputed, pair_with_documents, toy_embed, EmbedderMode};
use stsn::evaluation::{bucketed_report, evaluate, Annotations, Criterion, MetricsReport};
use stsn::model::{Model, Prediction};
use stsn::tagging::{build_label_vocabulary, decode_labels, encode_labels, from_conll, to_conll};
use stsn::tape::Mat;
use stsn::training::{check_gradients, train, Checkpoint, GradCheckConfig, GradCheckReport, TrainError};

use crate::config::{config_error, RunConfig, Variant};
use crate::folds::{complement, partition};

/// Holds `<dir>/.lock` for the lifetime of a command.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!("output directory {} is locked by another run ({} exists)", dir.display(), path.display())
            }
            Err(e) => Err(e).with_context(|| format!("cannot lock {}", dir.display())),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_schema(cfg: &RunConfig, fallback: Option<&TypeSchema>) -> Result<TypeSchema> {
    match (&cfg.schema, fallback) {
        (Some(p), _) => TypeSchema::load(p).with_context(|| format!("cannot load schema {}", p.display())),
        (None, Some(s)) => Ok(s.clone()),
        (None, None) => Err(config_error("`schema` must be set for this command")),
    }
}

fn load_dataset(cfg: &RunConfig, path: &Path, schema: &TypeSchema) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read dataset {}", path.display()))?;
    parse_dataset_str(&text, schema, cfg.max_tokens).with_context(|| format!("invalid dataset {}", path.display()))
}

/// Token embeddings for every document, from the toy embedder or a
/// precomputed file.
fn embed(cfg: &RunConfig, data: &Dataset, precomputed: Option<&Path>) -> Result<Vec<Mat>> {
    match cfg.embedder.mode {
        EmbedderMode::Toy => Ok(data
            .documents
            .iter()
            .map(|d| toy_embed(&d.tokens, &cfg.embedder).vectors)
            .collect()),
        EmbedderMode::Precomputed => {
            let path = precomputed.ok_or_else(|| config_error("precomputed embeddings need an embeddings file"))?;
            let records = load_precomputed(path, cfg.embedder.dim)?;
            Ok(pair_with_documents(&records, &data.documents)?
                .into_iter()
                .map(|e| e.vectors)
                .collect())
        }
    }
}

/// The evaluation documents: `eval_dataset` when set, otherwise `dataset`.
fn eval_data(cfg: &RunConfig, schema: &TypeSchema) -> Result<(Dataset, Option<PathBuf>)> {
    match &cfg.eval_dataset {
        Some(p) => Ok((load_dataset(cfg, p, schema)?, cfg.eval_embeddings.clone())),
        None => {
            let p = cfg.require(&cfg.dataset, "dataset")?;
            Ok((load_dataset(cfg, p, schema)?, cfg.embeddings.clone()))
        }
    }
}

/// Trains a fresh model, appending one JSON line per epoch to `log`.
pub fn fit(cfg: &RunConfig, variant: Variant, data: &Dataset, embs: &[Mat], log: Option<&Path>) -> Result<Model> {
    let vocab = build_label_vocabulary(data)?;
    let mut model = Model::new(cfg.model_config(variant), data.schema.clone(), vocab, cfg.embedder.dim, cfg.seed)?;
    let examples = data
        .documents
        .iter()
        .zip(embs)
        .map(|(d, e)| model.prepare(d, e.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => None,
    };
    let log_path = log.map(|p| p.display().to_string()).unwrap_or_default();
    train(&mut model, &examples, &cfg.train_config(), |line, _| {
        if let Some(w) = writer.as_mut() {
            let text = serde_json::to_string(line).expect("log line serializes");
            writeln!(w, "{text}")
                .and_then(|_| w.flush())
                .map_err(|source| TrainError::Io {
                    path: log_path.clone(),
                    source,
                })?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    Ok(model)
}

pub fn predict_all(model: &Model, embs: &[Mat]) -> Result<Vec<Prediction>> {
    embs.iter().map(|e| Ok(model.predict(e)?)).collect()
}

pub fn score(cfg: &RunConfig, gold: &Dataset, preds: &[Prediction]) -> Result<Vec<MetricsReport>> {
    let g: Vec<Annotations> = gold.documents.iter().map(Annotations::from).collect();
    let p: Vec<Annotations> = preds.iter().map(Annotations::from).collect();
    cfg.criteria
        .iter()
        .map(|&c| Ok(evaluate(&g, &p, c, cfg.aggregation, Some(&gold.schema))?))
        .collect()
}

fn write_reports(dir: &Path, reports: &[MetricsReport], echo: bool) -> Result<()> {
    for r in reports {
        write_json(&dir.join(format!("metrics_{}.json", r.criterion)), r)?;
        let table = r.to_table();
        fs::write(dir.join(format!("metrics_{}.txt", r.criterion)), &table)?;
        if echo {
            println!("{table}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    criterion: Criterion,
    per_fold_f1: Vec<f64>,
    mean_f1: f64,
}

/// Trains and scores one model per fold; returns mean F1 per criterion.
fn cross_validate(cfg: &RunConfig, variant: Variant, data: &Dataset, embs: &[Mat], dir: &Path, k: usize) -> Result<Vec<(Criterion, f64)>> {
    if k > data.len() {
        return Err(config_error(format!("k_folds = {k} exceeds the {} documents", data.len())));
    }
    let folds = partition(data.len(), k, cfg.seed);
    let mut per_fold: Vec<Vec<f64>> = vec![Vec::new(); cfg.criteria.len()];
    for (i, test) in folds.iter().enumerate() {
        let fold_dir = dir.join(format!("fold_{i}"));
        fs::create_dir_all(&fold_dir)?;
        let train_idx = complement(&folds, i);
        let pick = |idx: &[usize]| idx.iter().map(|&j| embs[j].clone()).collect::<Vec<_>>();
        let (train_data, test_data) = (data.select(&train_idx), data.select(test));
        log::info!("fold {}/{k}: {} train, {} test documents", i + 1, train_idx.len(), test.len());
        let model = fit(cfg, variant, &train_data, &pick(&train_idx), Some(&fold_dir.join("train_log.jsonl")))?;
        let preds = predict_all(&model, &pick(test))?;
        write_json(&fold_dir.join("predictions.json"), &preds)?;
        let reports = score(cfg, &test_data, &preds)?;
        write_reports(&fold_dir, &reports, false)?;
        for (slot, r) in per_fold.iter_mut().zip(&reports) {
            slot.push(r.overall.f1);
        }
    }
    let summary: Vec<FoldSummary> = cfg
        .criteria
        .iter()
        .zip(per_fold)
        .map(|(&criterion, f)| FoldSummary {
            criterion,
            mean_f1: f.iter().sum::<f64>() / f.len() as f64,
            per_fold_f1: f,
        })
        .collect();
    write_json(&dir.join("cv_summary.json"), &summary)?;
    Ok(summary.iter().map(|s| (s.criterion, s.mean_f1)).collect())
}

pub fn train_command(cfg: &RunConfig) -> Result<()> {
    let schema = load_schema(cfg, None)?;
    let data = load_dataset(cfg, cfg.require(&cfg.dataset, "dataset")?, &schema)?;
    let out = &cfg.output_dir;
    let _lock = OutputLock::acquire(out)?;
    cfg.save(&out.join("config.toml"))?;
    let embs = embed(cfg, &data, cfg.embeddings.as_deref())?;
    if let Some(k) = cfg.k_folds {
        for (c, f1) in cross_validate(cfg, cfg.mode, &data, &embs, out, k)? {
            println!("{c}: mean F1 over {k} folds {f1:.4}");
        }
        return Ok(());
    }
    let model = fit(cfg, cfg.mode, &data, &embs, Some(&out.join("train_log.jsonl")))?;
    Checkpoint::from_model(&model, &cfg.train_config()).save(out.join("checkpoint.json"))?;
    let (gold, eval_embs) = match &cfg.eval_dataset {
        Some(_) => {
            let (d, p) = eval_data(cfg, &schema)?;
            let e = embed(cfg, &d, p.as_deref())?;
            (d, e)
        }
        None => (data, embs),
    };
    let preds = predict_all(&model, &eval_embs)?;
    write_reports(out, &score(cfg, &gold, &preds)?, true)?;
    println!("checkpoint written to {}", out.join("checkpoint.json").display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    Ok(ckpt.into_model()?)
}

/// Reads a prediction file; an empty file or `[]` means nothing was predicted.
fn read_predictions(path: &Path, docs: usize) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read predictions {}", path.display()))?;
    let preds: Vec<Prediction> = if text.trim().is_empty() {
        Vec::new()
    } else {
        serde_json::from_str(&text).with_context(|| format!("malformed predictions {}", path.display()))?
    };
    if preds.is_empty() {
        return Ok(vec![Prediction::default(); docs]);
    }
    if preds.len() != docs {
        bail!("{} predictions for {docs} documents", preds.len());
    }
    Ok(preds)
}

/// Gold documents and predictions, from a prediction file or a checkpoint.
fn gold_and_predictions(cfg: &RunConfig) -> Result<(Dataset, Vec<Prediction>)> {
    if let Some(p) = &cfg.predictions {
        let schema = load_schema(cfg, None)?;
        let (gold, _) = eval_data(cfg, &schema)?;
        let preds = read_predictions(p, gold.len())?;
        return Ok((gold, preds));
    }
    let model = load_model(cfg)?;
    let schema = load_schema(cfg, Some(&model.schema))?;
    let (gold, emb_path) = eval_data(cfg, &schema)?;
    let embs = embed(cfg, &gold, emb_path.as_deref())?;
    let preds = predict_all(&model, &embs)?;
    Ok((gold, preds))
}

pub fn evaluate_command(cfg: &RunConfig) -> Result<()> {
    let (gold, preds) = gold_and_predictions(cfg)?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    write_reports(&cfg.output_dir, &score(cfg, &gold, &preds)?, true)
}

pub fn predict_command(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let schema = load_schema(cfg, Some(&model.schema))?;
    let (data, emb_path) = eval_data(cfg, &schema)?;
    let embs = embed(cfg, &data, emb_path.as_deref())?;
    let preds = predict_all(&model, &embs)?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let path = cfg.output_dir.join("predictions.json");
    write_json(&path, &preds)?;
    println!("{} predictions written to {}", preds.len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub mode: Variant,
    pub f1: BTreeMap<Criterion, f64>,
}

pub fn ablate_command(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let schema = load_schema(cfg, None)?;
    let data = load_dataset(cfg, cfg.require(&cfg.dataset, "dataset")?, &schema)?;
    let out = &cfg.output_dir;
    let _lock = OutputLock::acquire(out)?;
    cfg.save(&out.join("config.toml"))?;
    let embs = embed(cfg, &data, cfg.embeddings.as_deref())?;
    let held_out = match (&cfg.eval_dataset, cfg.k_folds) {
        (Some(_), None) => {
            let (d, p) = eval_data(cfg, &schema)?;
            let e = embed(cfg, &d, p.as_deref())?;
            Some((d, e))
        }
        _ => None,
    };
    let mut variants = Variant::MODES.to_vec();
    if cfg.ablate_no_label {
        variants.push(Variant::NoLabel);
    }
    let mut rows = Vec::new();
    for v in variants {
        let dir = out.join(v.as_str());
        fs::create_dir_all(&dir)?;
        log::info!("ablation variant {}", v.as_str());
        let f1: BTreeMap<Criterion, f64> = if let Some(k) = cfg.k_folds {
            cross_validate(cfg, v, &data, &embs, &dir, k)?.into_iter().collect()
        } else {
            let model = fit(cfg, v, &data, &embs, Some(&dir.join("train_log.jsonl")))?;
            let (gold, eval_embs) = match &held_out {
                Some((d, e)) => (d, e),
                None => (&data, &embs),
            };
            let reports = score(cfg, gold, &predict_all(&model, eval_embs)?)?;
            write_reports(&dir, &reports, false)?;
            reports.iter().map(|r| (r.criterion, r.overall.f1)).collect()
        };
        rows.push(AblationRow { mode: v, f1 });
    }
    write_json(&out.join("ablation.json"), &rows)?;
    let table = ablation_table(&cfg.criteria, &rows);
    fs::write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(rows)
}

fn ablation_table(criteria: &[Criterion], rows: &[AblationRow]) -> String {
    let mut s = format!("{:<14}", "mode");
    for c in criteria {
        s.push_str(&format!("  {:>8}", c.as_str()));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{:<14}", r.mode.as_str()));
        for c in criteria {
            s.push_str(&format!("  {:>8.4}", r.f1.get(c).copied().unwrap_or(0.0)));
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Serialize)]
struct Analysis {
    entity_length: BTreeMap<Criterion, BTreeMap<String, MetricsReport>>,
    text_length: BTreeMap<Criterion, BTreeMap<String, MetricsReport>>,
}

pub fn analyze_command(cfg: &RunConfig) -> Result<()> {
    let (gold, preds) = gold_and_predictions(cfg)?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let p: Vec<Annotations> = preds.iter().map(Annotations::from).collect();
    let mut ner: Vec<Criterion> = cfg.criteria.iter().copied().filter(Criterion::is_ner).collect();
    if ner.is_empty() {
        ner.push(Criterion::NerBoundaryType);
    }
    let mut analysis = Analysis {
        entity_length: BTreeMap::new(),
        text_length: BTreeMap::new(),
    };
    for c in ner {
        let b = bucketed_report(&gold.documents, &p, BucketKind::Entity, c, cfg.aggregation)?;
        analysis.entity_length.insert(c, b);
    }
    for &c in &cfg.criteria {
        let b = bucketed_report(&gold.documents, &p, BucketKind::Text, c, cfg.aggregation)?;
        analysis.text_length.insert(c, b);
    }
    write_json(&cfg.output_dir.join("analysis.json"), &analysis)?;
    for (title, part) in [("entity length", &analysis.entity_length), ("text length", &analysis.text_length)] {
        for (c, buckets) in part {
            println!("{title} / {c}");
            for (b, r) in buckets {
                println!("  {b:<8} P {:.4}  R {:.4}  F1 {:.4}", r.overall.p, r.overall.r, r.overall.f1);
            }
        }
    }
    Ok(())
}

pub fn gradcheck_command(cfg: &RunConfig, only: Option<Variant>) -> Result<Vec<GradCheckReport>> {
    let variants = match only {
        Some(v) => vec![v],
        None => Variant::MODES.to_vec(),
    };
    let mut reports = Vec::new();
    for v in variants {
        let gc = GradCheckConfig {
            mode: v.interaction(),
            architecture: v.architecture(),
            seed: cfg.seed,
            ..Default::default()
        };
        let r = check_gradients(&gc, None)?;
        println!(
            "{:<14} {}  max relative error {:.3e} over {} parameter groups",
            v.as_str(),
            if r.passed { "pass" } else { "FAIL" },
            r.max_relative_error,
            r.groups.len()
        );
        for g in r.failures() {
            println!("    {} relative error {:.3e}", g.name, g.relative_error);
        }
        reports.push(r);
    }
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("gradcheck.json"), &reports)?;
    if reports.iter().any(|r| !r.passed) {
        bail!("gradient check failed");
    }
    Ok(reports)
}

/// Writes the dataset's extended BIO labels as two-column CoNLL text.
pub fn tags_command(cfg: &RunConfig) -> Result<()> {
    let schema = load_schema(cfg, None)?;
    let data = load_dataset(cfg, cfg.require(&cfg.dataset, "dataset")?, &schema)?;
    let rows = data
        .documents
        .iter()
        .map(|d| Ok((d.tokens.tokens.clone(), encode_labels(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let path = cfg.output_dir.join("labels.conll");
    fs::write(&path, to_conll(&rows))?;
    println!("labels for {} documents written to {}", rows.len(), path.display());
    Ok(())
}

/// Decodes CoNLL label text back into entity lists, one JSON line per sentence.
pub fn decode_tags(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = String::new();
    for (tokens, labels) in from_conll(&text)? {
        let line = serde_json::json!({ "tokens": tokens, "entities": decode_labels(&labels) });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    Ok(out)
}
