//! Synthetic two-modality data with a known answer.
//!
//! Temporal classes differ only in their time series (phase-shifted
//! sinusoids) and share one flat patch; spatial classes share one flat time
//! series and differ only in the orientation of a grating in the patch.
//! Each modality therefore identifies only half of the classes and a
//! classifier needs both to separate all of them.
//!
//! Samples come in objects of `object_size` consecutive samples which share
//! an object-level perturbation (series offset, grating phase shift), so an
//! object-level split behaves like one on real parcels.

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::grad::Float;

/// Baseline level of every signal.
const LEVEL: f64 = 0.5;
/// Amplitude of the class-bearing sinusoids and gratings.
const AMPLITUDE: f64 = 0.3;
/// Grating frequency in cycles per pixel.
const GRATING_FREQUENCY: f64 = 1.0 / 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub temporal_classes: usize,
    pub spatial_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dates: usize,
    pub variables: usize,
    pub patch: usize,
    pub channels: usize,
    /// Standard deviation of the per-value Gaussian noise; object-level
    /// perturbations scale with it too.
    pub noise: f64,
    pub object_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            temporal_classes: 4,
            spatial_classes: 4,
            train_per_class: 200,
            test_per_class: 400,
            dates: 8,
            variables: 16,
            patch: 25,
            channels: 5,
            noise: 0.1,
            object_size: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.temporal_classes + self.spatial_classes
    }

    fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::Invalid("synthetic data needs at least 2 classes".into()));
        }
        if [self.dates, self.variables, self.patch, self.channels, self.object_size].contains(&0) {
            return Err(Error::Invalid(format!("synthetic layout has a zero size: {self:?}")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Invalid(format!("noise level {} must be >= 0", self.noise)));
        }
        Ok(())
    }

    pub fn is_temporal(&self, class: usize) -> bool {
        class < self.temporal_classes
    }
}

/// Noise-free series of a class, date-major.
pub fn series_template(config: &SynthConfig, class: usize, offset: f64, phase_shift: f64) -> Vec<f64> {
    let (n, b) = (config.dates, config.variables);
    let mut out = vec![LEVEL + offset; n * b];
    if config.is_temporal(class) {
        let phase = TAU * class as f64 / config.temporal_classes as f64 + phase_shift;
        for t in 0..n {
            for v in 0..b {
                let angle = TAU * t as f64 / n as f64 + phase + 0.3 * v as f64;
                out[t * b + v] += AMPLITUDE * angle.sin();
            }
        }
    }
    out
}

/// Noise-free patch of a class, channel-major.
pub fn patch_template(config: &SynthConfig, class: usize, offset: f64, phase_shift: f64) -> Vec<f64> {
    let p = config.patch;
    let mut out = vec![LEVEL + offset; config.channels * p * p];
    if !config.is_temporal(class) {
        let k = class - config.temporal_classes;
        let theta = PI * k as f64 / config.spatial_classes as f64;
        let (c, s) = (theta.cos(), theta.sin());
        for ch in 0..config.channels {
            let gain = AMPLITUDE * (1.0 - 0.1 * ch as f64);
            for y in 0..p {
                for x in 0..p {
                    let u = x as f64 * c + y as f64 * s;
                    out[(ch * p + y) * p + x] += gain * (TAU * GRATING_FREQUENCY * u + phase_shift).sin();
                }
            }
        }
    }
    out
}

/// Training and test splits drawn from disjoint objects.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let value_noise = Normal::new(0.0, config.noise).expect("validated noise level");
    let offset_noise = Normal::new(0.0, config.noise / 2.0).expect("validated noise level");
    let phase_noise = Normal::new(0.0, 3.0 * config.noise).expect("validated noise level");
    let empty = Dataset::new(
        config.dates,
        config.variables,
        config.patch,
        config.channels,
        config.classes(),
    );
    let mut next_object = 0u32;
    let mut splits = [empty.clone(), empty];
    for (split, per_class) in splits.iter_mut().zip([config.train_per_class, config.test_per_class]) {
        for class in 0..config.classes() {
            let mut made = 0;
            while made < per_class {
                let object = next_object;
                next_object += 1;
                let ts = series_template(
                    config,
                    class,
                    offset_noise.sample(&mut rng),
                    phase_noise.sample(&mut rng),
                );
                let patch = patch_template(
                    config,
                    class,
                    offset_noise.sample(&mut rng),
                    phase_noise.sample(&mut rng),
                );
                for _ in 0..config.object_size.min(per_class - made) {
                    let mut noisy = |v: &f64| (v + value_noise.sample(&mut rng)) as Float;
                    let sample = Sample {
                        ts: ts.iter().map(&mut noisy).collect(),
                        patch: patch.iter().map(&mut noisy).collect(),
                        label: class,
                        object,
                    };
                    split.push(sample)?;
                    made += 1;
                }
            }
        }
        // Interleave classes so file order carries no label information.
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut rng);
        *split = split.subset(&order);
    }
    let [train, test] = splits;
    Ok(SynthData { train, test })
}
