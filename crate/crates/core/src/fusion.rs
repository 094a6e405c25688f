//! The full model: both branches, three softmax heads and the weighted loss
//!
//! ```text
//! L_total = alpha1 * L1(rnn_feat) + alpha2 * L2(cnn_feat) + L_fus([rnn_feat, cnn_feat])
//! ```
//!
//! Only the fused head (head 3) is used for prediction; heads 1 and 2 exist
//! to keep each branch's features discriminative on their own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cnn::{CnnParams, CnnWidths, Mode, StatUpdate};
use crate::error::{dim_err, Error, Result};
use crate::grad::{Adam, Float, ParamStore, Tape, Tensor, Var};
use crate::init::uniform;
use crate::rnn::RnnBranch;

/// Sizes of one model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    /// GRU hidden size `d`.
    pub hidden: usize,
    pub classes: usize,
    /// Patch channels.
    pub channels: usize,
    /// Patch side.
    pub patch: usize,
    /// Time-series length `N`.
    pub dates: usize,
    /// Variables per date.
    pub variables: usize,
    pub widths: CnnWidths,
}

impl Dims {
    pub const FULL: Dims = Dims {
        hidden: 1024,
        classes: 13,
        channels: 5,
        patch: 25,
        dates: 34,
        variables: 16,
        widths: CnnWidths::FULL,
    };

    /// Desk-scale profile: `d = 64`, CNN widths divided by 8, 8 dates.
    pub fn reduced(classes: usize) -> Dims {
        Dims {
            hidden: 64,
            classes,
            dates: 8,
            widths: CnnWidths::FULL.divided(8),
            ..Dims::FULL
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if [self.hidden, self.channels, self.patch, self.dates, self.variables].contains(&0) {
            return Err(Error::Invalid(format!("dimensions must be positive: {self:?}")));
        }
        CnnParams::new(self.channels, self.patch, self.widths).map(|_| ())
    }

    /// Length of the flattened `patch ‖ series` vector.
    pub fn stacked_len(&self) -> usize {
        self.channels * self.patch * self.patch + self.dates * self.variables
    }
}

/// Which branches a model has.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Fusion,
    /// Temporal branch and head 1 only.
    RnnOnly,
    /// Spatial branch and head 2 only.
    CnnOnly,
}

impl Variant {
    pub(crate) fn code(self) -> u8 {
        match self {
            Variant::Fusion => 0,
            Variant::RnnOnly => 1,
            Variant::CnnOnly => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Variant> {
        match code {
            0 => Some(Variant::Fusion),
            1 => Some(Variant::RnnOnly),
            2 => Some(Variant::CnnOnly),
            _ => None,
        }
    }
}

/// Weights of the two auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha1: 0.3,
            alpha2: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        for a in [alpha1, alpha2] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Invalid(format!("loss weight {a} outside [0, 1]")));
            }
        }
        Ok(LossWeights { alpha1, alpha2 })
    }
}

/// One of the three classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Rnn,
    Cnn,
    Fusion,
}

/// `softmax(feat W + b)` over `classes` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    prefix: String,
    pub in_dim: usize,
    pub classes: usize,
}

impl HeadParams {
    pub fn new(prefix: impl Into<String>, in_dim: usize, classes: usize) -> Self {
        HeadParams {
            prefix: prefix.into(),
            in_dim,
            classes,
        }
    }

    pub fn w(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn b(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn names(&self) -> Vec<String> {
        vec![self.w(), self.b()]
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        store.insert(self.w(), uniform(&[self.in_dim, self.classes], bound, rng));
        store.insert(self.b(), Tensor::zeros([self.classes]));
    }

    /// `feat` is `[batch, in_dim]`; returns `[batch, classes]` probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feat: Var) -> Result<Var> {
        let shape = tape.shape(feat);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return dim_err(
                "head_forward",
                format!("expected [batch, {}], got {shape:?}", self.in_dim),
            );
        }
        let w = tape.param(store, &self.w())?;
        let b = tape.param(store, &self.b())?;
        let logits = tape.matmul(feat, w)?;
        let logits = tape.add_bias(logits, b)?;
        tape.softmax(logits)
    }
}

/// Model inputs for a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch, dates, variables]`.
    pub ts: Tensor,
    /// `[batch, channels, patch, patch]`.
    pub patch: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, dims: &Dims) -> Result<()> {
        let b = self.len();
        if self.ts.shape() != [b, dims.dates, dims.variables] {
            return dim_err(
                "batch",
                format!(
                    "series shape {:?}, expected [{b}, {}, {}]",
                    self.ts.shape(),
                    dims.dates,
                    dims.variables
                ),
            );
        }
        if self.patch.shape() != [b, dims.channels, dims.patch, dims.patch] {
            return dim_err(
                "batch",
                format!(
                    "patch shape {:?}, expected [{b}, {}, {p}, {p}]",
                    self.patch.shape(),
                    dims.channels,
                    p = dims.patch
                ),
            );
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= dims.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: dims.classes,
            });
        }
        Ok(())
    }
}

/// Tape handles of one forward pass. Absent branches are `None`.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, d]`.
    pub rnn_feat: Option<Var>,
    /// `[batch, widths.out]`.
    pub cnn_feat: Option<Var>,
    /// Attention weights, `[batch, dates]`.
    pub attention: Option<Var>,
    /// Probabilities of heads 1, 2 and 3, `[batch, classes]` each.
    pub probs: [Option<Var>; 3],
    pub stat_updates: Vec<StatUpdate>,
}

impl Forward {
    pub fn head(&self, head: Head) -> Option<Var> {
        self.probs[head as usize]
    }
}

/// Loss handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Losses {
    pub total: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub l_fus: Option<Var>,
    pub forward: Forward,
}

/// Scalar loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l_fus: Option<f64>,
    pub total: f64,
}

impl LossValues {
    fn read(tape: &Tape, losses: &Losses) -> LossValues {
        let get = |v: Option<Var>| v.map(|v| tape.scalar_value(v));
        LossValues {
            l1: get(losses.l1),
            l2: get(losses.l2),
            l_fus: get(losses.l_fus),
            total: tape.scalar_value(losses.total),
        }
    }

    /// Sample-weighted mean of per-batch values.
    pub fn weighted_mean(parts: &[(LossValues, usize)]) -> LossValues {
        let n: usize = parts.iter().map(|(_, k)| k).sum();
        let avg = |f: &dyn Fn(&LossValues) -> Option<f64>| -> Option<f64> {
            let mut s = 0.0;
            for (v, k) in parts {
                s += f(v)? * *k as f64;
            }
            Some(s / n as f64)
        };
        LossValues {
            l1: avg(&|v| v.l1),
            l2: avg(&|v| v.l2),
            l_fus: avg(&|v| v.l_fus),
            total: avg(&|v| Some(v.total)).unwrap_or(f64::NAN),
        }
    }
}

/// Predicted class and the probabilities it was read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<Float>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[Float]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Parameter layout of a model, independent of any parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub dims: Dims,
    pub variant: Variant,
    pub rnn: Option<RnnBranch>,
    pub cnn: Option<CnnParams>,
    /// Heads 1, 2, 3; absent heads are `None`.
    pub heads: [Option<HeadParams>; 3],
}

impl Architecture {
    pub fn new(dims: Dims, variant: Variant) -> Result<Self> {
        dims.validate()?;
        let rnn = (variant != Variant::CnnOnly)
            .then(|| RnnBranch::new(dims.variables, dims.hidden))
            .transpose()?;
        let cnn = (variant != Variant::RnnOnly)
            .then(|| CnnParams::new(dims.channels, dims.patch, dims.widths))
            .transpose()?;
        let c = dims.classes;
        let heads = [
            rnn.as_ref().map(|_| HeadParams::new("head1", dims.hidden, c)),
            cnn.as_ref().map(|_| HeadParams::new("head2", dims.widths.out, c)),
            (variant == Variant::Fusion)
                .then(|| HeadParams::new("head3", dims.hidden + dims.widths.out, c)),
        ];
        Ok(Architecture {
            dims,
            variant,
            rnn,
            cnn,
            heads,
        })
    }

    pub fn head(&self, head: Head) -> Option<&HeadParams> {
        self.heads[head as usize].as_ref()
    }

    /// The head used for prediction.
    pub fn predict_head(&self) -> Head {
        match self.variant {
            Variant::Fusion => Head::Fusion,
            Variant::RnnOnly => Head::Rnn,
            Variant::CnnOnly => Head::Cnn,
        }
    }

    /// Fresh parameters; the draw order is fixed so a seed fully
    /// determines them.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if let Some(rnn) = &self.rnn {
            rnn.init(&mut store, &mut rng);
        }
        if let Some(cnn) = &self.cnn {
            cnn.init(&mut store, &mut rng);
        }
        for head in self.heads.iter().flatten() {
            head.init(&mut store, &mut rng);
        }
        store
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, mode: Mode) -> Result<Forward> {
        batch.check(&self.dims)?;
        let mut out = Forward {
            rnn_feat: None,
            cnn_feat: None,
            attention: None,
            probs: [None; 3],
            stat_updates: Vec::new(),
        };
        if let Some(rnn) = &self.rnn {
            let ts = tape.input(batch.ts.clone());
            let pooled = rnn.features(tape, store, ts)?;
            out.rnn_feat = Some(pooled.feature);
            out.attention = Some(pooled.weights);
        }
        if let Some(cnn) = &self.cnn {
            let patch = tape.input(batch.patch.clone());
            let features = cnn.features(tape, store, patch, mode)?;
            out.cnn_feat = Some(features.feature);
            out.stat_updates = features.stat_updates;
        }
        let feats = [out.rnn_feat, out.cnn_feat];
        for (i, head) in self.heads.iter().enumerate() {
            let Some(head) = head else { continue };
            let feat = match i {
                0 | 1 => feats[i].expect("head present only with its branch"),
                _ => {
                    let (r, c) = (feats[0].expect("fusion"), feats[1].expect("fusion"));
                    tape.concat(&[r, c], 1)?
                }
            };
            out.probs[i] = Some(head.forward(tape, store, feat)?);
        }
        Ok(out)
    }

    /// `alpha1 L1 + alpha2 L2 + L_fus` for the fusion model; the single
    /// head's cross-entropy for the ablations.
    pub fn losses(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        weights: LossWeights,
        mode: Mode,
    ) -> Result<Losses> {
        let forward = self.forward(tape, store, batch, mode)?;
        let mut ce = |p: Option<Var>| p.map(|p| tape.cross_entropy(p, &batch.labels)).transpose();
        let (l1, l2, l_fus) = (ce(forward.probs[0])?, ce(forward.probs[1])?, ce(forward.probs[2])?);
        let total = match self.variant {
            Variant::Fusion => {
                let (l1, l2, l_fus) = (l1.expect("fusion"), l2.expect("fusion"), l_fus.expect("fusion"));
                let a = tape.scale(l1, weights.alpha1 as Float);
                let b = tape.scale(l2, weights.alpha2 as Float);
                let aux = tape.add(a, b)?;
                tape.add(aux, l_fus)?
            }
            Variant::RnnOnly => l1.expect("rnn head"),
            Variant::CnnOnly => l2.expect("cnn head"),
        };
        Ok(Losses {
            total,
            l1,
            l2,
            l_fus,
            forward,
        })
    }
}

/// Parameters and architecture of a trainable model.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub arch: Architecture,
    pub store: ParamStore,
    pub weights: LossWeights,
    pub seed: u64,
}

/// Batches larger than this are split when evaluating.
const EVAL_CHUNK: usize = 64;

impl FusionModel {
    pub fn new(dims: Dims, variant: Variant, weights: LossWeights, seed: u64) -> Result<Self> {
        let arch = Architecture::new(dims, variant)?;
        let store = arch.init(seed);
        Ok(FusionModel {
            arch,
            store,
            weights,
            seed,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.arch.dims
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    /// One Adam step on the batch's total loss, with batch statistics and
    /// running-statistic updates.
    pub fn train_step(&mut self, batch: &Batch, adam: &Adam) -> Result<LossValues> {
        let mut tape = Tape::new();
        let losses = self.arch.losses(&mut tape, &self.store, batch, self.weights, Mode::Train)?;
        let values = LossValues::read(&tape, &losses);
        if !values.total.is_finite() {
            return Ok(values);
        }
        tape.backward_into(losses.total, &mut self.store)?;
        for update in &losses.forward.stat_updates {
            update.apply(&mut self.store)?;
        }
        adam.step(&mut self.store);
        Ok(values)
    }

    /// Mean losses in evaluation mode.
    pub fn loss(&self, batch: &Batch) -> Result<LossValues> {
        let mut parts = Vec::new();
        for chunk in split(batch, EVAL_CHUNK) {
            let mut tape = Tape::new();
            let losses = self.arch.losses(&mut tape, &self.store, &chunk, self.weights, Mode::Eval)?;
            parts.push((LossValues::read(&tape, &losses), chunk.len()));
        }
        Ok(LossValues::weighted_mean(&parts))
    }

    /// Predictions of the model's own head: the fused head for the full
    /// model.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<Prediction>> {
        self.predict_with_head(batch, self.arch.predict_head())
    }

    pub fn predict_with_head(&self, batch: &Batch, head: Head) -> Result<Vec<Prediction>> {
        if self.arch.head(head).is_none() {
            return Err(Error::Invalid(format!("model has no {head:?} head")));
        }
        let classes = self.arch.dims.classes;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in split(batch, EVAL_CHUNK) {
            let mut tape = Tape::new();
            let forward = self.arch.forward(&mut tape, &self.store, &chunk, Mode::Eval)?;
            let probs = forward.head(head).expect("checked above");
            for row in tape.value(probs).data().chunks(classes) {
                out.push(Prediction {
                    class: argmax(row),
                    probs: row.to_vec(),
                });
            }
        }
        Ok(out)
    }
}

/// Splits a batch into consecutive pieces of at most `size` samples.
pub fn split(batch: &Batch, size: usize) -> Vec<Batch> {
    let n = batch.len();
    if n <= size {
        return vec![batch.clone()];
    }
    let ts_row = batch.ts.len() / n;
    let patch_row = batch.patch.len() / n;
    (0..n)
        .step_by(size)
        .map(|start| {
            let end = (start + size).min(n);
            let k = end - start;
            let mut ts_shape = batch.ts.shape().to_vec();
            let mut patch_shape = batch.patch.shape().to_vec();
            ts_shape[0] = k;
            patch_shape[0] = k;
            Batch {
                ts: Tensor::new(ts_shape, batch.ts.data()[start * ts_row..end * ts_row].to_vec())
                    .expect("slice of a valid tensor"),
                patch: Tensor::new(
                    patch_shape,
                    batch.patch.data()[start * patch_row..end * patch_row].to_vec(),
                )
                .expect("slice of a valid tensor"),
                labels: batch.labels[start..end].to_vec(),
            }
        })
        .collect()
}
