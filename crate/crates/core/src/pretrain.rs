//! Self-supervised pretraining on binned targets.
//!
//! Three example builders share one loss: per input dimension, the mean
//! cross-entropy over the cells selected by the loss mask, averaged over the
//! dimensions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{init_model, Arch, Model, ModelConfig, OutputHead};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::params::Bound;
use crate::preprocess::{apply_minmax, check_bins, discretize_bins, fit_minmax, segment_sequences, BinLabels, SensorFrame, SequenceBatch};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reconstruction,
    Mlm,
    NextToken,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reconstruction => "reconstruction",
            Task::Mlm => "mlm",
            Task::NextToken => "next-token",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Task::Reconstruction),
            "mlm" => Ok(Task::Mlm),
            "next-token" => Ok(Task::NextToken),
            other => Err(Error::config(format!("unknown pretraining task `{other}`"))),
        }
    }
}

/// What a masked-prediction example hides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskGranularity {
    /// Individual (position, dimension) cells.
    #[default]
    Cell,
    /// Whole timesteps, every dimension at once.
    Timestep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainExample<S> {
    pub input: SequenceBatch<S>,
    pub targets: BinLabels,
    /// `batch x len x dims`, aligned with `targets`.
    pub loss_mask: Vec<bool>,
    pub task: Task,
}

impl<S> PretrainExample<S> {
    pub fn included(&self) -> usize {
        self.loss_mask.iter().filter(|&&b| b).count()
    }
}

pub fn build_reconstruction_example<S: Scalar>(seq: &SequenceBatch<S>, k: usize) -> Result<PretrainExample<S>> {
    let targets = discretize_bins(seq, k)?;
    Ok(PretrainExample {
        input: seq.clone(),
        loss_mask: vec![true; targets.labels.len()],
        targets,
        task: Task::Reconstruction,
    })
}

/// Masks `floor(ratio * len * dims)` cells per window, chosen uniformly without replacement
/// (or `floor(ratio * len)` whole timesteps), overwriting them with `mask_value`.
pub fn build_mlm_example<S: Scalar, R: Rng + ?Sized>(
    seq: &SequenceBatch<S>,
    k: usize,
    ratio: f64,
    mask_value: f64,
    granularity: MaskGranularity,
    rng: &mut R,
) -> Result<PretrainExample<S>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let targets = discretize_bins(seq, k)?;
    let (len, dims) = (seq.len(), seq.dims());
    let units = match granularity {
        MaskGranularity::Cell => len * dims,
        MaskGranularity::Timestep => len,
    };
    let count = (ratio * units as f64).floor() as usize;
    if count == 0 {
        return Err(Error::config(format!("mask ratio {ratio} selects nothing from {units} candidates")));
    }
    let mut input = seq.clone();
    let mut loss_mask = vec![false; targets.labels.len()];
    let sentinel = S::from_f64_lossy(mask_value);
    let window = len * dims;
    for b in 0..seq.batch() {
        for u in index::sample(rng, units, count) {
            let cells = match granularity {
                MaskGranularity::Cell => u..u + 1,
                MaskGranularity::Timestep => u * dims..(u + 1) * dims,
            };
            for c in cells {
                input.data_mut()[b * window + c] = sentinel;
                loss_mask[b * window + c] = true;
            }
        }
    }
    Ok(PretrainExample { input, targets, loss_mask, task: Task::Mlm })
}

/// Context is positions `0..len-1`; the target at context position `t` is the bin of
/// position `t + 1`, and only target positions `>= skip` carry loss.
pub fn build_next_token_example<S: Scalar>(seq: &SequenceBatch<S>, k: usize, skip: usize) -> Result<PretrainExample<S>> {
    check_bins(k)?;
    let (len, dims) = (seq.len(), seq.dims());
    if len < 2 {
        return Err(Error::config("next-token examples need sequences of at least 2 positions"));
    }
    if skip >= len {
        return Err(Error::config(format!("next-token skip {skip} must be below the sequence length {len}")));
    }
    let ctx = len - 1;
    let input = seq.truncate_positions(ctx)?;
    let all = discretize_bins(seq, k)?;
    let mut labels = Vec::with_capacity(seq.batch() * ctx * dims);
    let mut loss_mask = Vec::with_capacity(labels.capacity());
    for b in 0..seq.batch() {
        for t in 0..ctx {
            for d in 0..dims {
                labels.push(all.get(b, t + 1, d));
                loss_mask.push(t + 1 >= skip);
            }
        }
    }
    Ok(PretrainExample {
        input,
        targets: BinLabels { labels, batch: seq.batch(), len: ctx, dims, k },
        loss_mask,
        task: Task::NextToken,
    })
}

/// `(1/n) * sum_i L_i` where `L_i` is the mean cross-entropy of head `i` over its included
/// cells. Dimensions with no included cell are left out of the average.
pub fn compute_pretrain_loss<S: Scalar>(g: &mut Graph<S>, logits: &[Var], example: &PretrainExample<S>) -> Result<Var> {
    let t = &example.targets;
    if logits.len() != t.dims {
        return Err(Error::shape(format!("{} heads for {} target dimensions", logits.len(), t.dims)));
    }
    let rows = t.batch * t.len;
    let mut per_dim = Vec::with_capacity(t.dims);
    for (d, &l) in logits.iter().enumerate() {
        let shape = g.shape(l);
        if shape != [t.batch, t.len, t.k] {
            return Err(Error::shape(format!(
                "head {d} logits {shape:?} do not match targets [{}, {}, {}]",
                t.batch, t.len, t.k
            )));
        }
        let targets: Vec<usize> = (0..rows).map(|r| t.labels[r * t.dims + d]).collect();
        let include: Vec<bool> = (0..rows).map(|r| example.loss_mask[r * t.dims + d]).collect();
        if include.iter().any(|&b| b) {
            per_dim.push(g.cross_entropy(l, &targets, &include)?);
        }
    }
    let Some((&first, rest)) = per_dim.split_first() else {
        return Err(Error::NoLossPositions);
    };
    let mut total = first;
    for &v in rest {
        total = g.add(total, v)?;
    }
    g.scale(total, S::from_usize_lossy(per_dim.len()).recip())
}

/// Forward pass plus loss for one example.
pub fn pretrain_loss<S: Scalar>(
    model: &Model<S>,
    g: &mut Graph<S>,
    p: &Bound,
    example: &PretrainExample<S>,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let h = model.hidden_states(g, p, &example.input, dropout_rng)?;
    let logits = model.parallel_heads_forward(g, p, h)?;
    compute_pretrain_loss(g, &logits, example)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainRunConfig {
    pub task: Task,
    pub bins: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub mask_ratio: f64,
    pub mask_value: f64,
    pub mask_granularity: MaskGranularity,
    pub next_token_skip: usize,
    /// Trailing fraction of windows held out for validation loss.
    pub val_fraction: f64,
    pub winsor_fraction: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        PretrainRunConfig {
            task: Task::Mlm,
            bins: 100,
            batch_size: 25,
            epochs: 1,
            optimizer: AdamWConfig::default(),
            mask_ratio: 0.25,
            mask_value: -100.0,
            mask_granularity: MaskGranularity::Cell,
            next_token_skip: 70,
            val_fraction: 0.2,
            winsor_fraction: 0.05,
            shuffle: true,
            seed: 0,
        }
    }
}

impl PretrainRunConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        check_bins(self.bins)?;
        self.optimizer.validate()?;
        if self.bins != model.bins {
            return Err(Error::config(format!(
                "run uses {} bins but the model heads have {}",
                self.bins, model.bins
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        if self.task == Task::Mlm && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.task == Task::NextToken {
            if model.arch != Arch::Decoder {
                return Err(Error::config(
                    "next-token prediction needs the causal decoder architecture (arch = decoder)",
                ));
            }
            if self.next_token_skip >= model.max_len {
                return Err(Error::config(format!(
                    "next-token skip {} must be below the sequence length {}",
                    self.next_token_skip, model.max_len
                )));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn build_example<S: Scalar, R: Rng + ?Sized>(&self, seq: &SequenceBatch<S>, rng: &mut R) -> Result<PretrainExample<S>> {
        match self.task {
            Task::Reconstruction => build_reconstruction_example(seq, self.bins),
            Task::Mlm => build_mlm_example(seq, self.bins, self.mask_ratio, self.mask_value, self.mask_granularity, rng),
            Task::NextToken => build_next_token_example(seq, self.bins, self.next_token_skip),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

/// Per-batch training loss and per-epoch validation loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, split: Split, loss: f64) {
        self.records.push(LossRecord { step, split, loss });
    }

    pub fn train(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter(|r| r.split == Split::Train).map(|r| r.loss)
    }

    pub fn validation(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter(|r| r.split == Split::Validation).map(|r| r.loss)
    }

    /// `step,split,loss` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,split,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.step, r.split, r.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

fn split_windows(count: usize, val_fraction: f64) -> Result<(usize, usize)> {
    let val = (count as f64 * val_fraction).round() as usize;
    let val = val.min(count.saturating_sub(1));
    let train = count - val;
    if train == 0 {
        return Err(Error::Data("no training windows".into()));
    }
    Ok((train, val))
}

/// Mean loss over `windows` in batches, without updating the model.
pub fn evaluate_pretrain_loss<S: Scalar>(
    model: &Model<S>,
    windows: &SequenceBatch<S>,
    config: &PretrainRunConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut weight) = (0.0, 0usize);
    let order: Vec<usize> = (0..windows.batch()).collect();
    for chunk in order.chunks(config.batch_size) {
        let example = config.build_example(&windows.select(chunk), &mut rng)?;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g)?;
        let loss = pretrain_loss(model, &mut g, &p, &example, None)?;
        total += g.value(loss).item().as_f64() * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok(total / weight.max(1) as f64)
}

/// Scales and windows `data`, then trains a fresh pretraining-mode model with AdamW.
pub fn run_pretraining<S: Scalar>(
    data: &SensorFrame,
    config: &PretrainRunConfig,
    model_config: &ModelConfig,
) -> Result<(Checkpoint<S>, LossCurve)> {
    model_config.validate()?;
    config.validate(model_config)?;
    if data.dims() != model_config.n_dims {
        return Err(Error::config(format!(
            "data has {} dimensions, model expects {}",
            data.dims(),
            model_config.n_dims
        )));
    }
    let scaler = fit_minmax(data, config.winsor_fraction)?;
    let scaled = apply_minmax(data.values(), &scaler)?;
    let windows = segment_sequences::<S>(&scaled, data.dims(), None, model_config.max_len)?.windows;
    let (n_train, n_val) = split_windows(windows.batch(), config.val_fraction)?;
    let train = windows.select(&(0..n_train).collect::<Vec<_>>());
    let val = windows.select(&(n_train..n_train + n_val).collect::<Vec<_>>());
    log::info!(
        "pretraining {} on {} train / {} validation windows of {} x {}",
        config.task,
        n_train,
        n_val,
        model_config.max_len,
        data.dims()
    );

    let mut model = init_model::<S>(model_config)?;
    let mut opt = OptimizerState::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d409);
    let mut curve = LossCurve::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(config.batch_size) {
            let example = config.build_example(&train.select(chunk), &mut rng)?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g)?;
            let loss = pretrain_loss(&model, &mut g, &p, &example, Some(&mut dropout_rng))?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss diverged at step {}", step + 1)));
            }
            let grads = g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&p, &grads)?;
            adamw_step(&mut model.params, &mut opt)?;
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after step {}", step + 1)));
            }
            step += 1;
            curve.push(step, Split::Train, value);
            log::debug!("epoch {epoch} step {step} loss {value:.5}");
        }
        model.params.zero_grads();
        if n_val > 0 {
            let v = evaluate_pretrain_loss(&model, &val, config, config.seed.wrapping_add(1))?;
            curve.push(step, Split::Validation, v);
            log::info!("epoch {} validation loss {v:.5}", epoch + 1);
        }
    }
    debug_assert_eq!(model.head, OutputHead::Parallel);
    Ok((Checkpoint { model, scaler }, curve))
}
