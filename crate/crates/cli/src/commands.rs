use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use sensorformer::dataset::{read_frame_csv, write_atomic, write_frame_csv};
use sensorformer::downstream::{
    emit_confusion_csv, evaluate as score, prepare_windows, random_split, run_finetune, DownstreamSplits, FinetuneConfig,
    FinetuneInit, LabeledWindowSet, MetricsReport,
};
use sensorformer::preprocess::{fit_minmax, DEFAULT_WINSOR_FRACTION};
use sensorformer::pretrain::{run_pretraining, PretrainRunConfig, Split};
use sensorformer::synth::{generate, SynthConfig};
use sensorformer::{Checkpoint, Error, ModelConfig, SensorFrame};

use crate::args::{EvaluateArgs, FinetuneArgs, ModelArgs, PretrainArgs, SplitArg, SynthArgs};
use crate::manifest::{default_path, RunRecord};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, rec: &mut RunRecord) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config `{}`: {e}", path.display())))?;
    rec.input(path);
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config `{}`: {e}", path.display())))
}

fn read_data(path: &Path, rec: &mut RunRecord) -> Result<SensorFrame> {
    let frame = read_frame_csv(path).with_context(|| format!("reading {}", path.display()))?;
    rec.input(path);
    log::info!("{}: {} timesteps x {} dims", path.display(), frame.timesteps(), frame.dims());
    Ok(frame)
}

fn apply_model_args(cfg: &mut ModelConfig, a: &ModelArgs) {
    if let Some(v) = a.arch {
        cfg.arch = v.into();
    }
    if let Some(v) = a.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    if let Some(v) = a.seq_len {
        cfg.max_len = v;
    }
    if let Some(v) = a.dropout {
        cfg.dropout = v;
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut rec = RunRecord::start("synth");
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        classes: a.classes,
        windows_per_class: a.windows_per_class,
        length: a.length,
        dims: a.dims,
        amplitude: a.amplitude.unwrap_or(defaults.amplitude),
        noise_std: a.noise.unwrap_or(defaults.noise_std),
        seed: a.seed,
    };
    let frame = generate(&cfg)?;
    write_frame_csv(&frame, &a.out)?;
    rec.output(&a.out);
    log::info!("wrote {} rows to {}", frame.timesteps(), a.out.display());
    let manifest = a.manifest.unwrap_or_else(|| default_path(&a.out));
    rec.finish(&manifest, Some(cfg.seed), &cfg)
}

/// Pretraining config file: `{"model": {...}, "pretrain": {...}}`. The bin count lives
/// in `pretrain.bins` and is copied into the model.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainFile {
    pub model: ModelConfig,
    pub pretrain: PretrainRunConfig,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut rec = RunRecord::start("pretrain");
    let mut cfg: PretrainFile = load_config(a.config.as_deref(), &mut rec)?;
    apply_model_args(&mut cfg.model, &a.model);
    let p = &mut cfg.pretrain;
    if let Some(v) = a.task {
        p.task = v.into();
    }
    if let Some(v) = a.bins {
        p.bins = v;
    }
    if let Some(v) = a.epochs {
        p.epochs = v;
    }
    if let Some(v) = a.batch_size {
        p.batch_size = v;
    }
    if let Some(v) = a.lr {
        p.optimizer.lr = v;
    }
    if let Some(v) = a.mask_ratio {
        p.mask_ratio = v;
    }
    if let Some(v) = a.mask_granularity {
        p.mask_granularity = v.into();
    }
    if let Some(v) = a.next_token_skip {
        p.next_token_skip = v;
    }
    if let Some(v) = a.seed {
        p.seed = v;
        cfg.model.seed = v;
    }
    cfg.model.bins = cfg.pretrain.bins;
    cfg.model.validate()?;
    cfg.pretrain.validate(&cfg.model)?;

    let frame = read_data(&a.data, &mut rec)?;
    cfg.model.n_dims = frame.dims();
    let (ck, curve) = run_pretraining::<f32>(&frame, &cfg.pretrain, &cfg.model)?;
    if let Some(first) = curve.train().next() {
        log::info!("first batch loss {first:.4}");
    }
    if let Some(last) = curve.records.iter().rev().find(|r| r.split == Split::Train) {
        log::info!("final batch loss {:.4} after {} steps", last.loss, last.step);
    }
    ck.save(&a.out_checkpoint)?;
    curve.write_csv(&a.loss_csv)?;
    rec.output(&a.out_checkpoint);
    rec.output(&a.loss_csv);
    let manifest = a.manifest.unwrap_or_else(|| default_path(&a.out_checkpoint));
    rec.finish(&manifest, Some(cfg.pretrain.seed), &cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train_fraction: 0.6, validation_fraction: 0.2, seed: 0 }
    }
}

/// Fine-tuning config file. `model` only applies to `--scratch` runs; a checkpoint brings
/// its own architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneFile {
    pub model: ModelConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitConfig,
    pub winsor_fraction: f64,
    pub refit_scaler: bool,
}

impl Default for FinetuneFile {
    fn default() -> Self {
        FinetuneFile {
            model: ModelConfig::default(),
            finetune: FinetuneConfig::default(),
            split: SplitConfig::default(),
            winsor_fraction: DEFAULT_WINSOR_FRACTION,
            refit_scaler: false,
        }
    }
}

fn check_dims(frame: &SensorFrame, model: &ModelConfig, what: &Path) -> Result<()> {
    if frame.dims() != model.n_dims {
        return Err(Error::Config(format!(
            "{} has {} dimensions but the checkpoint model expects {}",
            what.display(),
            frame.dims(),
            model.n_dims
        ))
        .into());
    }
    Ok(())
}

fn confusion_path(explicit: Option<PathBuf>, metrics: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let stem = metrics.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "metrics".into());
        metrics.with_file_name(format!("{stem}.confusion.csv"))
    })
}

fn write_metrics(metrics: &sensorformer::Metrics, json_path: &Path, csv_path: &Path, rec: &mut RunRecord) -> Result<()> {
    emit_confusion_csv(metrics, csv_path)?;
    let report = MetricsReport::new(metrics, csv_path);
    write_atomic(json_path, report.to_json()?.as_bytes())?;
    rec.output(json_path);
    rec.output(csv_path);
    log::info!("accuracy {:.4}, weighted F1 {:.4}", metrics.accuracy, metrics.weighted_f1);
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let mut rec = RunRecord::start("finetune");
    let mut cfg: FinetuneFile = load_config(a.config.as_deref(), &mut rec)?;
    let f = &mut cfg.finetune;
    if let Some(v) = a.lr {
        f.optimizer.lr = v;
    }
    if let Some(v) = a.batch_size {
        f.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        f.max_epochs = v;
    }
    if let Some(v) = a.patience {
        f.patience = v;
    }
    if let Some(v) = a.pooling {
        f.pooling = v.into();
    }
    if let Some(v) = a.seed {
        f.seed = v;
        cfg.split.seed = v;
        cfg.model.seed = v;
    }
    if let Some(v) = a.split_seed {
        cfg.split.seed = v;
    }
    cfg.refit_scaler |= a.refit_scaler;
    cfg.finetune.validate()?;

    let pretrained = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            rec.input(path);
            let m = &a.model;
            if m.arch.is_some() || m.d_model.is_some() || m.layers.is_some() || m.heads.is_some() || m.dropout.is_some() {
                return Err(usage("architecture flags only apply to --scratch runs"));
            }
            if let Some(l) = m.seq_len {
                if l != ck.model.config.max_len {
                    return Err(Error::Config(format!(
                        "--seq-len {l} does not match the checkpoint's window length {}",
                        ck.model.config.max_len
                    ))
                    .into());
                }
            }
            Some(ck)
        }
        None => {
            apply_model_args(&mut cfg.model, &a.model);
            None
        }
    };

    let train_frame = read_data(&a.data, &mut rec)?;
    let extra_frames = match (&a.val_data, &a.test_data) {
        (Some(v), Some(t)) => Some((read_data(v, &mut rec)?, read_data(t, &mut rec)?)),
        _ => None,
    };
    let model_config = match &pretrained {
        Some(ck) => ck.model.config.clone(),
        None => {
            cfg.model.n_dims = train_frame.dims();
            cfg.model.validate()?;
            cfg.model.clone()
        }
    };
    check_dims(&train_frame, &model_config, &a.data)?;
    if let Some((v, t)) = &extra_frames {
        check_dims(v, &model_config, a.val_data.as_deref().expect("paired"))?;
        check_dims(t, &model_config, a.test_data.as_deref().expect("paired"))?;
    }

    let scaler = match &pretrained {
        Some(ck) if !cfg.refit_scaler => ck.scaler.clone(),
        _ => fit_minmax(&train_frame, cfg.winsor_fraction)?,
    };
    let len = model_config.max_len;
    let max_label = |f: &SensorFrame| f.labels().and_then(|l| l.iter().max().copied());
    let mut classes = max_label(&train_frame).map_or(0, |m| m + 1);
    if let Some((v, t)) = &extra_frames {
        classes = classes.max(max_label(v).map_or(0, |m| m + 1)).max(max_label(t).map_or(0, |m| m + 1));
    }
    let train_set: LabeledWindowSet<f32> = prepare_windows(&train_frame, &scaler, len, Some(classes))?;
    let splits = match &extra_frames {
        Some((v, t)) => DownstreamSplits {
            train: train_set,
            validation: prepare_windows(v, &scaler, len, Some(classes))?,
            test: prepare_windows(t, &scaler, len, Some(classes))?,
        },
        None => random_split(&train_set, cfg.split.train_fraction, cfg.split.validation_fraction, cfg.split.seed)?,
    };
    log::info!(
        "{} classes; {} train / {} validation / {} test windows",
        classes,
        splits.train.len(),
        splits.validation.len(),
        splits.test.len()
    );

    let init = match &pretrained {
        Some(ck) => FinetuneInit::Pretrained(&ck.model),
        None => FinetuneInit::Scratch(&model_config),
    };
    let outcome = run_finetune(init, &splits, &cfg.finetune)?;
    log::info!("best validation epoch {}", outcome.best_epoch);

    Checkpoint { model: outcome.model, scaler }.save(&a.out_checkpoint)?;
    rec.output(&a.out_checkpoint);
    let csv_path = confusion_path(a.confusion_csv, &a.metrics_json);
    write_metrics(&outcome.test_metrics, &a.metrics_json, &csv_path, &mut rec)?;
    if let Some(p) = &a.loss_csv {
        outcome.curve.write_csv(p)?;
        rec.output(p);
    }
    let resolved = json!({
        "init": if pretrained.is_some() { "pretrained" } else { "scratch" },
        "model": model_config,
        "finetune": cfg.finetune,
        "split": if extra_frames.is_some() { json!("files") } else { serde_json::to_value(&cfg.split)? },
        "winsor_fraction": cfg.winsor_fraction,
        "refit_scaler": cfg.refit_scaler,
        "num_classes": classes,
    });
    let manifest = a.manifest.unwrap_or_else(|| default_path(&a.out_checkpoint));
    rec.finish(&manifest, Some(cfg.finetune.seed), &resolved)
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut rec = RunRecord::start("evaluate");
    let ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let classes = ck
        .model
        .num_classes()
        .ok_or_else(|| Error::Mode("evaluate needs a fine-tuned (downstream-mode) checkpoint".into()))?;
    let frame = read_data(&a.data, &mut rec)?;
    check_dims(&frame, &ck.model.config, &a.data)?;
    let set: LabeledWindowSet<f32> = prepare_windows(&frame, &ck.scaler, ck.model.config.max_len, Some(classes))?;
    let set = match a.split {
        SplitArg::All => set,
        part => {
            let s = random_split(&set, a.train_fraction, a.validation_fraction, a.split_seed)?;
            match part {
                SplitArg::Train => s.train,
                SplitArg::Validation => s.validation,
                _ => s.test,
            }
        }
    };
    let metrics = score(&ck.model, &set)?;
    let csv_path = confusion_path(a.confusion_csv, &a.metrics_json);
    write_metrics(&metrics, &a.metrics_json, &csv_path, &mut rec)?;
    let resolved = json!({
        "split": format!("{:?}", a.split).to_lowercase(),
        "train_fraction": a.train_fraction,
        "validation_fraction": a.validation_fraction,
        "split_seed": a.split_seed,
        "windows": set.len(),
    });
    let manifest = a.manifest.unwrap_or_else(|| default_path(&a.metrics_json));
    rec.finish(&manifest, None, &resolved)
}
