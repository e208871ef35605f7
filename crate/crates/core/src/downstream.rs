//! Window-level classification: fine-tuning with early stopping and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{init_classifier_model, swap_pretrain_head_for_classifier, Model, ModelConfig, OutputHead, Pooling};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::pretrain::{LossCurve, Split};
use crate::preprocess::{apply_minmax, central_label, segment_sequences, Scaler, SensorFrame, SequenceBatch};
use crate::scalar::Scalar;

/// Windows with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledWindowSet<S> {
    pub windows: SequenceBatch<S>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> LabeledWindowSet<S> {
    pub fn new(windows: SequenceBatch<S>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != windows.batch() {
            return Err(Error::Data(format!("{} labels for {} windows", labels.len(), windows.batch())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(LabeledWindowSet { windows, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Subset in the given order. An empty selection gives an empty set.
    pub fn select(&self, indices: &[usize]) -> Self {
        LabeledWindowSet {
            windows: self.windows.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Scales `frame` with `scaler`, cuts it into windows of `len` and labels each window by
/// its central timestep. `num_classes` defaults to one more than the largest label.
pub fn prepare_windows<S: Scalar>(
    frame: &SensorFrame,
    scaler: &Scaler,
    len: usize,
    num_classes: Option<usize>,
) -> Result<LabeledWindowSet<S>> {
    let labels = frame
        .labels()
        .ok_or_else(|| Error::Data("fine-tuning data needs a label column".into()))?;
    let scaled = apply_minmax(frame.values(), scaler)?;
    let seg = segment_sequences::<S>(&scaled, frame.dims(), Some(labels), len)?;
    let window_labels = seg
        .labels
        .expect("labels were supplied")
        .iter()
        .map(|w| central_label(w))
        .collect::<Result<Vec<_>>>()?;
    let classes = num_classes.unwrap_or_else(|| window_labels.iter().max().map_or(0, |m| m + 1));
    LabeledWindowSet::new(seg.windows, window_labels, classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamSplits<S> {
    pub train: LabeledWindowSet<S>,
    pub validation: LabeledWindowSet<S>,
    pub test: LabeledWindowSet<S>,
}

/// Seeded random partition by window into train / validation / test. Fractions are of the
/// window count; the test split receives the remainder.
pub fn random_split<S: Scalar>(
    set: &LabeledWindowSet<S>,
    train_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<DownstreamSplits<S>> {
    if !(train_fraction > 0.0 && validation_fraction > 0.0 && train_fraction + validation_fraction < 1.0) {
        return Err(Error::config(format!(
            "split fractions {train_fraction} / {validation_fraction} leave no room for a test split"
        )));
    }
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_val = (n as f64 * validation_fraction).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::config(format!("{n} windows are too few for a train/validation/test split")));
    }
    Ok(DownstreamSplits {
        train: set.select(&order[..n_train]),
        validation: set.select(&order[n_train..n_train + n_val]),
        test: set.select(&order[n_train + n_val..]),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-accuracy improvement before stopping.
    pub patience: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 25,
            max_epochs: 30,
            patience: 5,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch size, epoch budget and patience must be positive"));
        }
        Ok(())
    }
}

/// Where the body weights come from.
#[derive(Clone, Copy, Debug)]
pub enum FinetuneInit<'a, S> {
    /// A pretraining-mode model whose heads are swapped for a classifier.
    Pretrained(&'a Model<S>),
    /// Fresh weights for every parameter.
    Scratch(&'a ModelConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassStats>,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Builds the confusion matrix and per-class and weighted scores from raw predictions.
pub fn metrics_from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Data("cannot score an empty set".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::shape(format!("{} labels but {} predictions", truth.len(), predicted.len())));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Index(format!("class {} outside 0..{num_classes}", t.max(p))));
        }
        confusion[t][p] += 1;
    }
    let total = truth.len();
    let trace: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut weighted_f1 = 0.0;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted_c);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        weighted_f1 += support as f64 / total as f64 * f1;
        per_class.push(ClassStats { precision, recall, f1, support });
    }
    Ok(Metrics { accuracy: trace as f64 / total as f64, weighted_f1, confusion, per_class })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 64;

/// Predicted class per window, computed in inference mode.
pub fn predict<S: Scalar>(model: &Model<S>, windows: &SequenceBatch<S>) -> Result<Vec<usize>> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Mode("evaluation needs a downstream-mode model with a classifier head".into()))?;
    let mut out = Vec::with_capacity(windows.batch());
    let all: Vec<usize> = (0..windows.batch()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let logits = model.class_logits(&windows.select(chunk))?;
        out.extend(logits.data().chunks(classes).map(argmax));
    }
    Ok(out)
}

pub fn evaluate<S: Scalar>(model: &Model<S>, set: &LabeledWindowSet<S>) -> Result<Metrics> {
    let classes = model
        .num_classes()
        .ok_or_else(|| Error::Mode("evaluation needs a downstream-mode model with a classifier head".into()))?;
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty window set".into()));
    }
    if set.num_classes > classes {
        return Err(Error::config(format!(
            "data has {} classes but the classifier has {classes}",
            set.num_classes
        )));
    }
    let predicted = predict(model, &set.windows)?;
    metrics_from_predictions(&set.labels, &predicted, classes)
}

/// Class-id header, then one row of counts per true class.
pub fn confusion_csv(metrics: &Metrics) -> String {
    let n = metrics.confusion.len();
    let mut out = (0..n).map(|c| c.to_string()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in &metrics.confusion {
        out.push_str(&row.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}

pub fn emit_confusion_csv(metrics: &Metrics, path: &Path) -> Result<()> {
    write_atomic(path, confusion_csv(metrics).as_bytes())
}

/// The metrics document written next to the confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassStats>,
    pub confusion_csv_path: String,
}

impl MetricsReport {
    pub fn new(metrics: &Metrics, confusion_csv_path: &Path) -> Self {
        MetricsReport {
            accuracy: metrics.accuracy,
            weighted_f1: metrics.weighted_f1,
            per_class: metrics.per_class.clone(),
            confusion_csv_path: confusion_csv_path.display().to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<S> {
    /// The parameters of the epoch with the best validation accuracy.
    pub model: Model<S>,
    pub test_metrics: Metrics,
    pub best_epoch: usize,
    pub validation_accuracy: Vec<f64>,
    pub curve: LossCurve,
}

fn check_compatible<S: Scalar>(config: &ModelConfig, set: &LabeledWindowSet<S>, split: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::config(format!("the {split} split is empty")));
    }
    if set.windows.dims() != config.n_dims || set.windows.len() != config.max_len {
        return Err(Error::config(format!(
            "{split} windows are {} x {} but the model expects {} x {}",
            set.windows.len(),
            set.windows.dims(),
            config.max_len,
            config.n_dims
        )));
    }
    Ok(())
}

/// Mean cross-entropy and metrics from one inference pass.
fn validation_pass<S: Scalar>(model: &Model<S>, set: &LabeledWindowSet<S>, classes: usize) -> Result<(f64, Metrics)> {
    let all: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    let mut predicted = Vec::with_capacity(set.len());
    for chunk in all.chunks(EVAL_BATCH) {
        let sub = set.select(chunk);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g)?;
        let h = model.hidden_states(&mut g, &p, &sub.windows, None)?;
        let logits = model.classification_forward(&mut g, &p, h)?;
        predicted.extend(g.value(logits).data().chunks(classes).map(argmax));
        let loss = g.cross_entropy(logits, &sub.labels, &vec![true; sub.len()])?;
        total += g.value(loss).item().as_f64() * chunk.len() as f64;
    }
    Ok((total / set.len() as f64, metrics_from_predictions(&set.labels, &predicted, classes)?))
}

/// Trains a classifier on `splits.train`, keeps the parameters of the best validation
/// epoch and scores them on `splits.test`.
pub fn run_finetune<S: Scalar>(
    init: FinetuneInit<'_, S>,
    splits: &DownstreamSplits<S>,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome<S>> {
    config.validate()?;
    let num_classes = splits.train.num_classes;
    if splits.validation.num_classes != num_classes || splits.test.num_classes != num_classes {
        return Err(Error::config("train, validation and test splits disagree on the class count"));
    }
    if num_classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut model = match init {
        FinetuneInit::Pretrained(pre) => {
            if pre.head != OutputHead::Parallel {
                return Err(Error::Mode("fine-tuning starts from a pretraining-mode checkpoint".into()));
            }
            swap_pretrain_head_for_classifier(pre, num_classes, config.pooling, config.seed.wrapping_add(1))?
        }
        FinetuneInit::Scratch(mc) => {
            let mc = ModelConfig { seed: config.seed, ..mc.clone() };
            init_classifier_model(&mc, num_classes, config.pooling)?
        }
    };
    for (name, set) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        check_compatible(&model.config, set, name)?;
    }

    let mut opt = OptimizerState::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d409);
    let mut curve = LossCurve::default();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<S>)> = None;
    let mut stale = 0;
    let mut step = 0usize;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = splits.train.select(chunk);
            let mut g = Graph::new();
            let p = model.params.bind(&mut g)?;
            let h = model.hidden_states(&mut g, &p, &batch.windows, Some(&mut dropout_rng))?;
            let logits = model.classification_forward(&mut g, &p, h)?;
            let loss = g.cross_entropy(logits, &batch.labels, &vec![true; batch.len()])?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss diverged at step {}", step + 1)));
            }
            let grads = g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&p, &grads)?;
            adamw_step(&mut model.params, &mut opt)?;
            step += 1;
            curve.push(step, Split::Train, value);
        }
        model.params.zero_grads();
        let (val_loss, val_metrics) = validation_pass(&model, &splits.validation, num_classes)?;
        curve.push(step, Split::Validation, val_loss);
        let acc = val_metrics.accuracy;
        history.push(acc);
        log::info!("epoch {epoch} validation accuracy {acc:.4}");
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    let test_metrics = evaluate(&model, &splits.test)?;
    Ok(FinetuneOutcome { model, test_metrics, best_epoch, validation_accuracy: history, curve })
}
