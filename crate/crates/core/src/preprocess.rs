//! Sensor-data preparation: winsorized min-max scaling, mean imputation,
//! fixed-length windowing, value binning and the flat token encoding used by
//! the single-stream baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_WINSOR_FRACTION: f64 = 0.05;
pub const DEFAULT_SEQ_LEN: usize = 300;

/// Raw multichannel recording: `timesteps x dims` row-major values, NaN marks a missing cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    values: Vec<f64>,
    dims: usize,
    labels: Option<Vec<usize>>,
}

impl SensorFrame {
    pub fn new(values: Vec<f64>, dims: usize, labels: Option<Vec<usize>>) -> Result<Self> {
        if dims == 0 {
            return Err(Error::Data("a frame needs at least one dimension".into()));
        }
        if values.is_empty() || !values.len().is_multiple_of(dims) {
            return Err(Error::Data(format!("{} values do not form whole rows of {dims}", values.len())));
        }
        let t = values.len() / dims;
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Data(format!("{} labels for {t} timesteps", l.len())));
            }
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::Data("infinite sensor value".into()));
        }
        Ok(SensorFrame { values, dims, labels })
    }

    pub fn timesteps(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_missing(&self, t: usize, dim: usize) -> bool {
        self.values[t * self.dims + dim].is_nan()
    }

    /// Values of one dimension in time order (missing cells stay NaN).
    pub fn column(&self, dim: usize) -> Vec<f64> {
        self.values.iter().skip(dim).step_by(self.dims).copied().collect()
    }

    pub fn missing_fraction(&self, dim: usize) -> f64 {
        let missing = self.values.iter().skip(dim).step_by(self.dims).filter(|v| v.is_nan()).count();
        missing as f64 / self.timesteps() as f64
    }
}

/// Lower/upper clip points of one series: the extreme `floor(fraction * n)` finite values
/// on each side are discarded and the next value inward becomes the bound.
pub fn winsor_bounds(series: &[f64], fraction: f64) -> Result<(f64, f64)> {
    if !(0.0..0.5).contains(&fraction) {
        return Err(Error::config(format!("winsor fraction {fraction} outside [0, 0.5)")));
    }
    let mut finite: Vec<f64> = series.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Data("series has no finite values".into()));
    }
    finite.sort_by(f64::total_cmp);
    let drop = (fraction * finite.len() as f64).floor() as usize;
    Ok((finite[drop], finite[finite.len() - 1 - drop]))
}

/// Clips each finite value to the winsor bounds of its series; NaN cells are left as is.
pub fn winsorize_percentile(series: &[f64], fraction: f64) -> Result<Vec<f64>> {
    let (lo, hi) = winsor_bounds(series, fraction)?;
    Ok(series.iter().map(|&v| if v.is_nan() { v } else { v.clamp(lo, hi) }).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub x_min: f64,
    pub x_max: f64,
    pub mean: f64,
}

/// Per-dimension statistics computed after winsorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub winsor_fraction: f64,
    pub dims: Vec<DimStats>,
}

impl Scaler {
    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }
}

/// Fits winsorized min/max/mean independently for every dimension of `frame`.
pub fn fit_minmax(frame: &SensorFrame, fraction: f64) -> Result<Scaler> {
    let mut dims = Vec::with_capacity(frame.dims());
    for d in 0..frame.dims() {
        let col = frame.column(d);
        let clipped = winsorize_percentile(&col, fraction)
            .map_err(|e| match e {
                Error::Data(_) => Error::Data(format!("dimension {d} has no finite values")),
                other => other,
            })?;
        let finite: Vec<f64> = clipped.into_iter().filter(|v| v.is_finite()).collect();
        let x_min = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let x_max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if x_min == x_max {
            return Err(Error::DegenerateDimension { dim: d, value: x_min });
        }
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        dims.push(DimStats { x_min, x_max, mean });
    }
    Ok(Scaler { winsor_fraction: fraction, dims })
}

/// Replaces NaN cells of a `rows x dims` buffer with the dimension mean.
pub fn impute_missing_mean(values: &[f64], scaler: &Scaler) -> Result<Vec<f64>> {
    let n = scaler.n_dims();
    if !values.len().is_multiple_of(n) {
        return Err(Error::shape(format!("{} values do not form rows of {n}", values.len())));
    }
    Ok(values
        .iter()
        .enumerate()
        .map(|(i, &v)| if v.is_nan() { scaler.dims[i % n].mean } else { v })
        .collect())
}

/// Min-max scales a `rows x dims` buffer and clamps to `[0, 1]`. Missing cells are imputed first.
pub fn apply_minmax(values: &[f64], scaler: &Scaler) -> Result<Vec<f64>> {
    let n = scaler.n_dims();
    Ok(impute_missing_mean(values, scaler)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let s = &scaler.dims[i % n];
            ((v - s.x_min) / (s.x_max - s.x_min)).clamp(0.0, 1.0)
        })
        .collect())
}

/// Batch of fixed-length multichannel sequences, `batch x len x dims` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<S> {
    data: Vec<S>,
    batch: usize,
    len: usize,
    dims: usize,
}

impl<S: Scalar> SequenceBatch<S> {
    pub fn new(data: Vec<S>, batch: usize, len: usize, dims: usize) -> Result<Self> {
        if len == 0 || dims == 0 {
            return Err(Error::shape("sequences need positive length and width"));
        }
        if data.len() != batch * len * dims {
            return Err(Error::shape(format!(
                "{} values for a {batch} x {len} x {dims} batch",
                data.len()
            )));
        }
        Ok(SequenceBatch { data, batch, len, dims })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, b: usize, t: usize, d: usize) -> S {
        self.data[(b * self.len + t) * self.dims + d]
    }

    pub fn window(&self, b: usize) -> &[S] {
        let w = self.len * self.dims;
        &self.data[b * w..(b + 1) * w]
    }

    /// Gathers the given windows, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.window(i).iter().copied()).collect();
        SequenceBatch { data, batch: indices.len(), len: self.len, dims: self.dims }
    }

    /// First `len` positions of every window.
    pub fn truncate_positions(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len {
            return Err(Error::shape(format!("cannot keep {len} of {} positions", self.len)));
        }
        let data = (0..self.batch)
            .flat_map(|b| self.window(b)[..len * self.dims].iter().copied())
            .collect();
        Ok(SequenceBatch { data, batch: self.batch, len, dims: self.dims })
    }

    pub fn cast<T: Scalar>(&self) -> SequenceBatch<T> {
        SequenceBatch {
            data: self.data.iter().map(|v| T::from_f64_lossy(v.as_f64())).collect(),
            batch: self.batch,
            len: self.len,
            dims: self.dims,
        }
    }
}

/// Non-overlapping windows plus the aligned per-window label slices.
#[derive(Clone, Debug)]
pub struct Segmented<S> {
    pub windows: SequenceBatch<S>,
    pub labels: Option<Vec<Vec<usize>>>,
    pub dropped: usize,
}

/// Cuts `rows x dims` scaled values into consecutive windows of `len` rows, discarding the
/// trailing remainder.
pub fn segment_sequences<S: Scalar>(
    scaled: &[f64],
    dims: usize,
    labels: Option<&[usize]>,
    len: usize,
) -> Result<Segmented<S>> {
    if len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    let rows = scaled.len() / dims;
    let count = rows / len;
    if count == 0 {
        return Err(Error::Data(format!(
            "{rows} timesteps are fewer than one window of {len}; no sequences produced"
        )));
    }
    let kept = count * len;
    let data = scaled[..kept * dims].iter().map(|&v| S::from_f64_lossy(v)).collect();
    let labels = labels.map(|l| l[..kept].chunks(len).map(<[usize]>::to_vec).collect());
    Ok(Segmented { windows: SequenceBatch::new(data, count, len, dims)?, labels, dropped: rows - kept })
}

/// Integer bin targets, `batch x len x dims`, each in `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinLabels {
    pub labels: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    pub dims: usize,
    pub k: usize,
}

impl BinLabels {
    pub fn get(&self, b: usize, t: usize, d: usize) -> usize {
        self.labels[(b * self.len + t) * self.dims + d]
    }
}

pub fn check_bins(k: usize) -> Result<()> {
    if k < 2 {
        Err(Error::config(format!("bin count must be at least 2, got {k}")))
    } else {
        Ok(())
    }
}

/// `min(floor(k * x), k - 1)` computed on the exact product, for `x` in `[0, 1]`.
pub fn bin_index<S: Scalar>(x: S, k: usize) -> usize {
    let kf = S::from_usize_lossy(k);
    let mut b = (kf * x).floor();
    // k * x may round up onto the next integer; the fused residual is exact
    if kf.mul_add(x, -b) < S::zero() {
        b = b - S::one();
    }
    let b = b.max(S::zero()).to_usize().unwrap_or(0);
    b.min(k - 1)
}

/// Bins every cell of a scaled batch independently.
pub fn discretize_bins<S: Scalar>(scaled: &SequenceBatch<S>, k: usize) -> Result<BinLabels> {
    check_bins(k)?;
    Ok(BinLabels {
        labels: scaled.data().iter().map(|&x| bin_index(x, k)).collect(),
        batch: scaled.batch(),
        len: scaled.len(),
        dims: scaled.dims(),
        k,
    })
}

/// Flattens one `len x dims` scaled window into `dims * len` token ids, all of dimension 0
/// first, then dimension 1, and so on.
pub fn vanilla_tokenize<S: Scalar>(window: &[S], dims: usize, vocab_size: usize) -> Result<Vec<u32>> {
    if vocab_size < 2 {
        return Err(Error::config(format!("vocabulary size must be at least 2, got {vocab_size}")));
    }
    if dims == 0 || !window.len().is_multiple_of(dims) {
        return Err(Error::shape(format!("{} values do not form rows of {dims}", window.len())));
    }
    let len = window.len() / dims;
    Ok((0..dims)
        .flat_map(|d| (0..len).map(move |t| window[t * dims + d]))
        .map(|x| bin_index(x, vocab_size) as u32)
        .collect())
}

/// Activity label at the window centre, index `len / 2`.
pub fn central_label(labels: &[usize]) -> Result<usize> {
    labels
        .get(labels.len() / 2)
        .copied()
        .ok_or_else(|| Error::contract("window has no labels"))
}
