//! Training, evaluation, the stacked-input baseline and branch ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{argmax, Dims, FusionModel, Head, HeadParams, LossValues, LossWeights, Variant};
use crate::grad::{Adam, Float, ParamStore, Tape, Tensor};
use crate::metrics::MetricsReport;

/// Model size presets; the dataset fixes the input layout and class count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// `d = 64`, CNN widths divided by 8.
    #[default]
    Reduced,
    /// `d = 1024`, full CNN widths.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Where the best model is written whenever the epoch loss improves.
    pub checkpoint: Option<PathBuf>,
    pub profile: Profile,
    /// Overrides the profile's GRU hidden size.
    pub hidden: Option<usize>,
    /// Overrides the profile's CNN width divisor.
    pub width_divisor: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            epochs: 400,
            batch_size: 32,
            seed: 0,
            alpha1: 0.3,
            alpha2: 0.3,
            checkpoint: None,
            profile: Profile::Reduced,
            hidden: None,
            width_divisor: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if self.hidden == Some(0) || self.width_divisor == Some(0) {
            return Err(Error::Invalid("dimension overrides must be positive".into()));
        }
        self.weights().map(|_| ())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha1, self.alpha2)
    }

    /// Model dims for a dataset's layout.
    pub fn dims(&self, ds: &Dataset) -> Result<Dims> {
        let mut base = match self.profile {
            Profile::Reduced => Dims::reduced(ds.classes),
            Profile::Full => Dims::FULL,
        };
        if let Some(h) = self.hidden {
            base.hidden = h;
        }
        if let Some(k) = self.width_divisor {
            base.widths = crate::cnn::CnnWidths::FULL.divided(k);
        }
        let dims = ds.model_dims(base);
        dims.validate()?;
        Ok(dims)
    }
}

/// Mean losses over the training split after one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub values: LossValues,
}

pub fn loss_log_csv(log: &[EpochLoss]) -> String {
    let cell = |v: Option<f64>| v.map(|v| format!("{v:.9e}")).unwrap_or_default();
    let mut out = String::from("epoch,l1,l2,l_fus,l_total\n");
    for e in log {
        let v = e.values;
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, cell(v.l1), cell(v.l2), cell(v.l_fus), cell(Some(v.total)));
    }
    out
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest training loss.
    pub model: FusionModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLoss>,
}

impl TrainOutcome {
    pub fn best_loss(&self) -> f64 {
        self.log[self.best_epoch - 1].values.total
    }
}

/// Epoch order generator; separate from the parameter initialization stream.
fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Minibatch Adam on the total loss. After every epoch the loss over the
/// whole training split is recorded (in evaluation mode) and the best model
/// so far is kept, and written to the configured checkpoint.
pub fn train(ds: &Dataset, config: &TrainConfig, variant: Variant) -> Result<TrainOutcome> {
    config.validate()?;
    if ds.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut model = FusionModel::new(config.dims(ds)?, variant, config.weights()?, config.seed)?;
    let adam = Adam::new(config.learning_rate);
    let mut rng = shuffle_rng(config.seed);
    let everything = ds.all();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let values = model.train_step(&ds.batch(chunk), &adam)?;
            if !values.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: values.total,
                });
            }
        }
        let values = model.loss(&everything)?;
        if !values.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: 0,
                loss: values.total,
            });
        }
        info!("epoch {epoch}: l_total {:.6}", values.total);
        log.push(EpochLoss { epoch, values });
        if best.as_ref().is_none_or(|(_, l, _)| values.total < *l) {
            best = Some((epoch, values.total, model.store.clone()));
            if let Some(path) = &config.checkpoint {
                checkpoint::save(&model, path)?;
            }
        }
    }
    let (best_epoch, _, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}

fn check_classes(model: usize, ds: &Dataset) -> Result<()> {
    if model != ds.classes {
        return Err(Error::ClassMismatch {
            model,
            data: ds.classes,
        });
    }
    Ok(())
}

/// Scores the model's own prediction head (the fused one for the full model).
pub fn evaluate(ds: &Dataset, model: &FusionModel) -> Result<MetricsReport> {
    evaluate_head(ds, model, model.arch.predict_head())
}

pub fn evaluate_head(ds: &Dataset, model: &FusionModel, head: Head) -> Result<MetricsReport> {
    check_classes(model.dims().classes, ds)?;
    let preds: Vec<usize> = model.predict_with_head(&ds.all(), head)?.iter().map(|p| p.class).collect();
    MetricsReport::from_predictions(ds.classes, &ds.labels(), &preds)
}

/// Trains a single-branch model with its own head and scores it.
pub fn ablation(train_ds: &Dataset, test_ds: &Dataset, config: &TrainConfig, variant: Variant) -> Result<(MetricsReport, TrainOutcome)> {
    let outcome = train(train_ds, config, variant)?;
    Ok((evaluate(test_ds, &outcome.model)?, outcome))
}

/// A softmax classifier on the flattened `patch ‖ series` vector.
#[derive(Clone, Debug)]
pub struct StackedBaseline {
    pub head: HeadParams,
    pub store: ParamStore,
}

fn stacked_inputs(ds: &Dataset, indices: &[usize]) -> Tensor {
    let len = ds.patch_len() + ds.ts_len();
    let mut data = Vec::with_capacity(indices.len() * len);
    for &i in indices {
        data.extend_from_slice(&ds.samples[i].patch);
        data.extend_from_slice(&ds.samples[i].ts);
    }
    Tensor::new([indices.len(), len], data).expect("dataset layout")
}

impl StackedBaseline {
    pub fn new(input: usize, classes: usize, seed: u64) -> Self {
        let head = HeadParams::new("stacked", input, classes);
        let mut store = ParamStore::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        StackedBaseline { head, store }
    }

    fn loss(&self, ds: &Dataset, indices: &[usize]) -> Result<(Tape, crate::grad::Var)> {
        let mut tape = Tape::new();
        let x = tape.input(stacked_inputs(ds, indices));
        let probs = self.head.forward(&mut tape, &self.store, x)?;
        let labels: Vec<usize> = indices.iter().map(|&i| ds.samples[i].label).collect();
        let loss = tape.cross_entropy(probs, &labels)?;
        Ok((tape, loss))
    }

    pub fn predict(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let all: Vec<usize> = (0..ds.len()).collect();
        let x = tape.input(stacked_inputs(ds, &all));
        let probs = self.head.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(probs).data().chunks(ds.classes).map(argmax).collect())
    }
}

/// Trains the stacked baseline with the same epochs, batches and optimizer
/// as the model, and scores it on the test split.
pub fn baseline_stacked(train_ds: &Dataset, test_ds: &Dataset, config: &TrainConfig) -> Result<MetricsReport> {
    config.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    if (train_ds.ts_len(), train_ds.patch_len()) != (test_ds.ts_len(), test_ds.patch_len()) {
        return Err(Error::Invalid("train and test splits have different layouts".into()));
    }
    check_classes(train_ds.classes, test_ds)?;
    let mut model = StackedBaseline::new(train_ds.patch_len() + train_ds.ts_len(), train_ds.classes, config.seed);
    let adam = Adam::new(config.learning_rate);
    let mut rng = shuffle_rng(config.seed);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (tape, loss) = model.loss(train_ds, chunk)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            tape.backward_into(loss, &mut model.store)?;
            adam.step(&mut model.store);
        }
    }
    MetricsReport::from_predictions(test_ds.classes, &test_ds.labels(), &model.predict(test_ds)?)
}

pub fn write_loss_log(log: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, loss_log_csv(log))?;
    Ok(())
}

/// Randomizes the given heads' parameters in place.
pub fn randomize_heads(model: &mut FusionModel, heads: &[Head], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &h in heads {
        if let Some(params) = model.arch.head(h).cloned() {
            params.init(&mut model.store, &mut rng);
            let b = model.store.value_mut(&params.b())?;
            for v in b.data_mut() {
                *v = rand::Rng::random_range(&mut rng, -1.0..1.0) as Float;
            }
        }
    }
    Ok(())
}
