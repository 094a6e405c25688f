//! Samples, file formats, preprocessing and splitting.

pub mod dataset;
pub mod preprocess;
pub mod raw;
pub mod split;
pub mod synth;


pub use dataset::{Bounds, Dataset, Sample};
pub use split::{object_split, Split};
pub use synth::{synth_generate, SynthConfig, SynthData};

use crate::error::Result;

/// Splits `ds` by object and min-max normalizes both sides with bounds
/// fitted on the training side.
pub fn prepare(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let split = object_split(&ds.labels(), &ds.samples.iter().map(|s| s.object).collect::<Vec<_>>(), train_fraction, seed)?;
    let mut train = ds.subset(&split.train);
    let mut test = ds.subset(&split.test);
    preprocess::normalize(&mut train, &mut test)?;
    Ok((train, test))
}
