use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use coughgate::cnn::{self, predict_clips, train_cnn, CnnModel, CnnSidecar};
use coughgate::dataset::{parse_manifest, resolve_audio_path, select_split, DatasetManifest, DatasetRecord, Split};
use coughgate::eval::{ablate, emit_ablation, emit_report, evaluate, to_json_full_precision, EvalReport, ScoredSet};
use coughgate::features::{write_feature_matrix, SonographBuilder, SvmFeaturizer};
use coughgate::pipeline::{labels, load_record, LabeledClip};
use coughgate::quality::{QualityReport, Screener};
use coughgate::ssl::{self, clip_log_spectrogram, pretrain_upstream, train_downstream, SslEncoder, SslModel};
use coughgate::svm::{train_svm_clips, SvmModel};
use coughgate::synth::synth_corpus;

use crate::config::{self, RunConfig};
use crate::{AblationModel, Cli, Command, FeatureKind, ModelKind, SplitArg};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_full_precision(value)?).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(path.to_path_buf())
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
}

/// Per-command output directory under the run directory, with its
/// run-metadata file.
fn command_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = ensure_dir(&cfg.run_dir.join(name))?;
    write_json(
        &dir.join("run.json"),
        &RunMeta {
            command: name,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg,
        },
    )?;
    Ok(dir)
}

fn screener(cfg: &RunConfig) -> Screener {
    Screener::new(cfg.quality)
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    parse_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

/// Screen records in parallel; results follow record order.
fn screen_records(
    manifest_path: &Path,
    records: &[DatasetRecord],
    screener: &Screener,
) -> Result<Vec<(Option<LabeledClip>, QualityReport)>> {
    records
        .par_iter()
        .map(|r| load_record(manifest_path, r, screener).with_context(|| format!("record {}", r.id)))
        .collect()
}

/// Clips of the given records that pass the gate.
fn gated_clips(manifest_path: &Path, records: &[DatasetRecord], cfg: &RunConfig) -> Result<Vec<LabeledClip>> {
    let screened = screen_records(manifest_path, records, &screener(cfg))?;
    let total = screened.len();
    let clips: Vec<LabeledClip> = screened.into_iter().filter_map(|(c, _)| c).collect();
    if clips.len() < total {
        log::warn!("{} of {total} records excluded by the quality gate", total - clips.len());
    }
    Ok(clips)
}

fn split_clips(manifest_path: &Path, cfg: &RunConfig, split: Split) -> Result<Vec<LabeledClip>> {
    let manifest = read_manifest(manifest_path)?;
    gated_clips(manifest_path, &select_split(&manifest, split, true), cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    if let Some(dir) = &cli.run_dir {
        sets.push(format!("run_dir={}", toml::Value::String(dir.display().to_string())));
    }
    let cfg = config::load(cli.config.as_deref(), &config::env_overrides(), &sets)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("starting worker pool")?;
    match &cli.command {
        Command::Synth { out_dir, n_per_class } => synth(&cfg, out_dir, *n_per_class),
        Command::Screen { manifest } => screen(&cfg, manifest),
        Command::Featurize { manifest, kind } => featurize(&cfg, manifest, *kind),
        Command::TrainSvm { manifest } => train_svm_cmd(&cfg, manifest),
        Command::TrainCnn { manifest } => train_cnn_cmd(&cfg, manifest),
        Command::PretrainSsl { manifest } => pretrain_ssl_cmd(&cfg, manifest),
        Command::TrainSslHead { manifest, encoder } => train_ssl_head_cmd(&cfg, manifest, encoder),
        Command::Eval {
            model,
            manifest,
            split,
            kind,
        } => eval_cmd(&cfg, model, manifest, *split, *kind),
        Command::Ablate {
            manifest,
            model,
            encoder,
        } => ablate_cmd(&cfg, manifest, *model, encoder.as_deref()),
    }
}

fn synth(cfg: &RunConfig, out_dir: &Path, n_per_class: Option<usize>) -> Result<()> {
    let mut s = cfg.synth;
    if let Some(n) = n_per_class {
        s.n_per_class = n;
    }
    command_dir(cfg, "synth")?;
    let manifest = synth_corpus(out_dir, &s)?;
    println!(
        "{}",
        serde_json::json!({ "manifest": out_dir.join("manifest.csv"), "records": manifest.len() })
    );
    Ok(())
}

fn screen(cfg: &RunConfig, manifest_path: &Path) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let dir = command_dir(cfg, "screen")?;
    let screened = screen_records(manifest_path, &manifest.records, &screener(cfg))?;
    let mut lines = String::new();
    let mut kept = Vec::new();
    for (record, (_, report)) in manifest.records.iter().zip(&screened) {
        lines.push_str(&serde_json::to_string(&report.to_json(&record.id))?);
        lines.push('\n');
        if report.passed() {
            // absolute paths keep the filtered manifest valid from its new directory
            let audio = resolve_audio_path(manifest_path, record);
            let audio = fs::canonicalize(&audio).unwrap_or(audio);
            kept.push(DatasetRecord {
                audio_path: audio,
                ..record.clone()
            });
        }
    }
    fs::write(dir.join("reports.jsonl"), lines)?;
    let n_kept = kept.len();
    DatasetManifest::from_records(kept)?.write(dir.join("manifest.csv"))?;
    println!(
        "{}",
        serde_json::json!({
            "records": manifest.len(),
            "passed": n_kept,
            "reports": dir.join("reports.jsonl"),
            "manifest": dir.join("manifest.csv"),
        })
    );
    Ok(())
}

fn featurize(cfg: &RunConfig, manifest_path: &Path, kind: FeatureKind) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let name = match kind {
        FeatureKind::Svm => "svm",
        FeatureKind::Sonograph => "sonograph",
        FeatureKind::Spectrogram => "spectrogram",
    };
    let dir = command_dir(cfg, &format!("features/{name}"))?;
    let clips = gated_clips(manifest_path, &manifest.records, cfg)?;
    let svm = SvmFeaturizer::new()?;
    let sono = SonographBuilder::new()?;
    let rows: Vec<String> = clips
        .par_iter()
        .map(|c| -> Result<String> {
            let (dims, values): (Vec<usize>, Vec<f64>) = match kind {
                FeatureKind::Svm => {
                    let v = svm.compute(&c.audio, &c.segments)?.values;
                    (vec![v.len()], v)
                }
                FeatureKind::Sonograph => {
                    let m = cnn::clip_sonograph(&sono, c)?;
                    (m.shape().to_vec(), m.iter().copied().collect())
                }
                FeatureKind::Spectrogram => {
                    let m = clip_log_spectrogram(&c.audio, &c.segments, &cfg.ssl.stft)?;
                    (m.shape().to_vec(), m.iter().copied().collect())
                }
            };
            let file = format!("{}.feat", c.id);
            let values: Vec<f32> = values.iter().map(|&v| v as f32).collect();
            write_feature_matrix(dir.join(&file), &dims, &values)?;
            let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
            Ok(format!("{},{file},{}\n", c.id, dims.join("x")))
        })
        .collect::<Result<_>>()?;
    fs::write(dir.join("index.csv"), format!("id,file,dims\n{}", rows.concat()))?;
    println!("{}", serde_json::json!({ "kind": name, "written": rows.len(), "dir": dir }));
    Ok(())
}

fn validation_auc(scores: &[f64], clips: &[LabeledClip]) -> Result<f64> {
    Ok(coughgate::eval::auc(scores, &labels(clips)?)?)
}

fn train_svm_cmd(cfg: &RunConfig, manifest: &Path) -> Result<()> {
    let train = split_clips(manifest, cfg, Split::Train)?;
    let val = split_clips(manifest, cfg, Split::Validation)?;
    let dir = command_dir(cfg, "svm")?;
    let model = train_svm_clips(&train, &cfg.svm, cfg.seed)?;
    model.save(dir.join("model.json"))?;
    let val_auc = if val.is_empty() {
        None
    } else {
        Some(validation_auc(&model.predict_clips(&val)?, &val)?)
    };
    let history = serde_json::json!({
        "train_clips": train.len(),
        "validation_clips": val.len(),
        "support_vectors": model.support_vectors.len(),
        "val_auc": val_auc,
    });
    write_json(&dir.join("history.json"), &history)?;
    println!("{history}");
    Ok(())
}

fn train_cnn_cmd(cfg: &RunConfig, manifest: &Path) -> Result<()> {
    let train = split_clips(manifest, cfg, Split::Train)?;
    let val = split_clips(manifest, cfg, Split::Validation)?;
    let dir = command_dir(cfg, "cnn")?;
    let (model, history) = train_cnn(&train, &val, &cfg.cnn.arch, &cfg.cnn.train, cfg.seed)?;
    model.save(
        &dir.join("model.bin"),
        &CnnSidecar {
            arch: model.arch,
            norm: model.norm.clone(),
            epoch: Some(history.best_epoch),
            val_auc: Some(history.best_val_auc),
            config_hash: Some(cfg.hash()),
        },
    )?;
    write_json(&dir.join("history.json"), &history)?;
    println!(
        "{}",
        serde_json::json!({ "best_epoch": history.best_epoch, "best_val_auc": history.best_val_auc })
    );
    Ok(())
}

fn pretrain_ssl_cmd(cfg: &RunConfig, manifest_path: &Path) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    // unlabeled train records are pretraining data too
    let train = gated_clips(manifest_path, &select_split(&manifest, Split::Train, false), cfg)?;
    let dir = command_dir(cfg, "ssl")?;
    let s = &cfg.ssl;
    let (encoder, losses) = pretrain_upstream(&train, &s.upstream, &s.encoder, &s.stft, &s.mask, cfg.seed)?;
    encoder.save(&dir.join("encoder.bin"))?;
    write_json(&dir.join("upstream_history.json"), &serde_json::json!({ "losses": losses }))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "{}",
        serde_json::json!({
            "steps": losses.len(),
            "final_loss_mean": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        })
    );
    Ok(())
}

fn train_ssl_head_cmd(cfg: &RunConfig, manifest: &Path, encoder_path: &Path) -> Result<()> {
    let encoder = SslEncoder::load(encoder_path)
        .with_context(|| format!("loading encoder {}", encoder_path.display()))?;
    let train = split_clips(manifest, cfg, Split::Train)?;
    let val = split_clips(manifest, cfg, Split::Validation)?;
    let dir = command_dir(cfg, "ssl")?;
    let (model, history) = train_downstream(encoder, &train, &val, &cfg.ssl.downstream, cfg.seed)?;
    model.save(
        &dir.join("model.bin"),
        Some(history.best_step),
        Some(history.best_val_auc),
        Some(cfg.hash()),
    )?;
    write_json(&dir.join("downstream_history.json"), &history)?;
    println!(
        "{}",
        serde_json::json!({ "best_step": history.best_step, "best_val_auc": history.best_val_auc })
    );
    Ok(())
}

enum Loaded {
    Svm(SvmModel),
    Cnn(CnnModel),
    Ssl(SslModel),
}

impl Loaded {
    fn name(&self) -> &'static str {
        match self {
            Loaded::Svm(_) => "svm",
            Loaded::Cnn(_) => "cnn",
            Loaded::Ssl(_) => "ssl",
        }
    }

    fn score(&mut self, clips: &[LabeledClip]) -> Result<Vec<f64>> {
        Ok(match self {
            Loaded::Svm(m) => m.predict_clips(clips)?,
            Loaded::Cnn(m) => predict_clips(m, clips)?,
            Loaded::Ssl(m) => m.predict_clips(clips)?,
        })
    }
}

/// SVM models are JSON; network weights carry a JSON sidecar whose fields
/// tell the two network kinds apart.
fn detect_kind(path: &Path) -> Result<ModelKind> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(ModelKind::Svm);
    }
    let side = cnn::sidecar_path(path);
    let text = fs::read_to_string(&side).with_context(|| format!("reading model sidecar {}", side.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if v.get("arch").is_some() {
        Ok(ModelKind::Cnn)
    } else if v.get("head_width").is_some() {
        Ok(ModelKind::Ssl)
    } else {
        bail!("cannot tell the model kind of {}; pass --kind", path.display())
    }
}

fn load_model(path: &Path, kind: ModelKind) -> Result<Loaded> {
    let kind = if kind == ModelKind::Auto { detect_kind(path)? } else { kind };
    let what = || format!("loading model {}", path.display());
    Ok(match kind {
        ModelKind::Svm => Loaded::Svm(SvmModel::load(path).with_context(what)?),
        ModelKind::Cnn => Loaded::Cnn(CnnModel::load(path).with_context(what)?.0),
        ModelKind::Ssl => Loaded::Ssl(SslModel::load(path).with_context(what)?.0),
        ModelKind::Auto => unreachable!("resolved above"),
    })
}

fn score_report(model: &mut Loaded, clips: &[LabeledClip], threshold: f64) -> Result<EvalReport> {
    let scores = model.score(clips)?;
    let set = ScoredSet::new(scores, labels(clips)?, clips.iter().map(|c| c.id.clone()).collect())?;
    Ok(evaluate(&set, threshold)?)
}

fn eval_cmd(cfg: &RunConfig, model_path: &Path, manifest_path: &Path, split: SplitArg, kind: ModelKind) -> Result<()> {
    let mut model = load_model(model_path, kind)?;
    let manifest = read_manifest(manifest_path)?;
    let (records, split_name): (Vec<DatasetRecord>, &str) = match split {
        SplitArg::Train => (select_split(&manifest, Split::Train, true), "train"),
        SplitArg::Validation => (select_split(&manifest, Split::Validation, true), "validation"),
        SplitArg::Test => (select_split(&manifest, Split::Test, true), "test"),
        SplitArg::All => (
            manifest.records.iter().filter(|r| r.label.as_binary().is_some()).cloned().collect(),
            "all",
        ),
    };
    let clips = gated_clips(manifest_path, &records, cfg)?;
    if clips.is_empty() {
        bail!("no labeled {split_name} records pass the quality gate");
    }
    let report = score_report(&mut model, &clips, cfg.eval.threshold)?;
    let dir = command_dir(cfg, "eval")?;
    let stem = format!("{}-{split_name}", model.name());
    let files = emit_report(&report, &dir, &stem)?;
    println!(
        "{}",
        serde_json::json!({
            "model": model.name(),
            "split": split_name,
            "clips": clips.len(),
            "auc": report.auc,
            "accuracy": report.accuracy,
            "sensitivity": report.sensitivity,
            "specificity": report.specificity,
            "files": files,
        })
    );
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig, manifest_path: &Path, which: AblationModel, encoder: Option<&Path>) -> Result<()> {
    if which == AblationModel::Ssl && encoder.is_none() {
        bail!("--model ssl needs --encoder");
    }
    let manifest = read_manifest(manifest_path)?;
    let train_records = select_split(&manifest, Split::Train, true);
    let train = gated_clips(manifest_path, &train_records, cfg)?;
    let val = split_clips(manifest_path, cfg, Split::Validation)?;
    let by_id: HashMap<&str, &LabeledClip> = train.iter().map(|c| (c.id.as_str(), c)).collect();
    // subsample among records that survive the gate
    let kept: Vec<DatasetRecord> = train_records
        .into_iter()
        .filter(|r| by_id.contains_key(r.id.as_str()))
        .collect();
    let dir = command_dir(cfg, "ablate")?;
    let table = ablate(&kept, &cfg.eval.fractions, &cfg.eval.seeds, |records, seed| {
        let subset: Vec<LabeledClip> = records.iter().map(|r| by_id[r.id.as_str()].clone()).collect();
        let mut model = match which {
            AblationModel::Svm => Loaded::Svm(train_svm_clips(&subset, &cfg.svm, seed)?),
            AblationModel::Cnn => Loaded::Cnn(train_cnn(&subset, &val, &cfg.cnn.arch, &cfg.cnn.train, seed)?.0),
            AblationModel::Ssl => {
                let enc = ssl::SslEncoder::load(encoder.expect("checked above"))?;
                Loaded::Ssl(train_downstream(enc, &subset, &val, &cfg.ssl.downstream, seed)?.0)
            }
        };
        let scores = model
            .score(&val)
            .map_err(|e| coughgate::Error::InvalidArgument(format!("scoring: {e:#}")))?;
        let set = ScoredSet::new(scores, labels(&val)?, val.iter().map(|c| c.id.clone()).collect())?;
        evaluate(&set, cfg.eval.threshold)
    })?;
    let stem = match which {
        AblationModel::Svm => "svm",
        AblationModel::Cnn => "cnn",
        AblationModel::Ssl => "ssl",
    };
    let files = emit_ablation(&table, &dir, stem)?;
    let means: Vec<_> = table
        .mean_auc()
        .into_iter()
        .map(|(f, a)| serde_json::json!({ "fraction": f, "mean_auc": a }))
        .collect();
    println!("{}", serde_json::json!({ "model": stem, "rows": table.rows.len(), "mean_auc": means, "files": files }));
    Ok(())
}
