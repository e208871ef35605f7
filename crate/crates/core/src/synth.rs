//! Seeded synthetic activity data: per-class sinusoids plus Gaussian noise.
//!
//! Class `c` oscillates at `c + 1` base cycles per window on every axis, with a
//! class- and axis-dependent phase and a baseline offset of `((c + j) mod C) / C`
//! on axis `j`. Each window draws its own random phase shift, so classes are
//! separable by frequency and offset but not by exact waveform.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SensorFrame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub windows_per_class: usize,
    pub length: usize,
    pub dims: usize,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            windows_per_class: 200,
            length: 300,
            dims: 3,
            amplitude: 0.015,
            noise_std: 0.005,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.windows_per_class == 0 || self.length == 0 || self.dims == 0 {
            return Err(Error::config("classes, windows per class, length and dims must all be positive"));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("amplitude and noise must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.classes * self.windows_per_class * self.length
    }
}

/// Generates `classes * windows_per_class` labeled windows in shuffled order.
pub fn generate(config: &SynthConfig) -> Result<SensorFrame> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let mut order: Vec<usize> = (0..config.classes * config.windows_per_class)
        .map(|i| i % config.classes)
        .collect();
    order.shuffle(&mut rng);

    let (c_n, l, n) = (config.classes as f64, config.length as f64, config.dims);
    let mut values = Vec::with_capacity(config.rows() * n);
    let mut labels = Vec::with_capacity(config.rows());
    for &class in &order {
        let freq = (class + 1) as f64;
        let shift: f64 = rng.random::<f64>() * TAU;
        for t in 0..config.length {
            for j in 0..n {
                let offset = ((class + j) % config.classes) as f64 / c_n;
                let phase = TAU * (class as f64 / c_n + j as f64 / n as f64) + shift;
                let x = offset + config.amplitude * (TAU * freq * t as f64 / l + phase).sin();
                values.push(x + noise.sample(&mut rng));
            }
            labels.push(class);
        }
    }
    SensorFrame::new(values, n, Some(labels))
}
