//! Spatial branch: a small multi-resolution CNN over the image patch.
//!
//! ```text
//! patch C x P x P
//!   block1  7x7 valid        -> W1 x (P-6) x (P-6)
//!   maxpool 3, stride 2      -> W1 x S x S
//!   block2a 3x3 valid        -> W2 x (S-2) x (S-2)
//!   block2b 3x3 same on 2a   -> W2 x (S-2) x (S-2)
//!   concat(2a, 2b)           -> 2*W2 x (S-2) x (S-2)
//!   block3  1x1              -> W3 x (S-2) x (S-2)
//!   global average pool      -> W3
//! ```
//!
//! Each block is convolution, ReLU, then batch normalization.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::grad::{BatchMoments, Float, NormStats, Padding, ParamStore, Tape, Tensor, Var};
use crate::init::uniform;

pub const BN_EPSILON: Float = 1e-5;
/// Weight of the old running statistic in the moving average.
pub const BN_MOMENTUM: Float = 0.9;

pub const POOL_WINDOW: usize = 3;
pub const POOL_STRIDE: usize = 2;

/// Batch-normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics untouched.
    Frozen,
    /// Running statistics.
    Eval,
}

/// Pending moving-average update for one block's running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub moments: BatchMoments,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (name, observed) in [
            (&self.mean_name, &self.moments.mean),
            (&self.var_name, &self.moments.var),
        ] {
            let buf = store.buffer_mut(name)?;
            for (r, &o) in buf.data_mut().iter_mut().zip(observed) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * o;
            }
        }
        Ok(())
    }
}

/// Convolution, ReLU and batch normalization, with stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams {
    prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvBlockParams {
    pub fn new(prefix: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, padding: Padding) -> Self {
        ConvBlockParams {
            prefix: prefix.into(),
            c_in,
            c_out,
            kernel,
            padding,
        }
    }

    pub fn kernels(&self) -> String {
        format!("{}.kernel", self.prefix)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn gamma(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    pub fn beta(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn running_mean(&self) -> String {
        format!("{}.running_mean", self.prefix)
    }

    pub fn running_var(&self) -> String {
        format!("{}.running_var", self.prefix)
    }

    pub fn names(&self) -> Vec<String> {
        vec![self.kernels(), self.bias(), self.gamma(), self.beta()]
    }

    /// Kernels uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; zero bias,
    /// unit scale, zero shift; running mean 0 and variance 1.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.c_in * self.kernel * self.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        store.insert(
            self.kernels(),
            uniform(&[self.c_out, self.c_in, self.kernel, self.kernel], bound, rng),
        );
        store.insert(self.bias(), Tensor::zeros([self.c_out]));
        store.insert(self.gamma(), Tensor::full([self.c_out], 1.0));
        store.insert(self.beta(), Tensor::zeros([self.c_out]));
        store.insert_buffer(self.running_mean(), Tensor::zeros([self.c_out]));
        store.insert_buffer(self.running_var(), Tensor::full([self.c_out], 1.0));
    }

    /// `x` is `[batch, c_in, H, W]`. In [`Mode::Train`] the returned update
    /// must be applied by the caller once the step is done.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<StatUpdate>)> {
        let k = tape.param(store, &self.kernels())?;
        let b = tape.param(store, &self.bias())?;
        let y = tape.conv2d(x, k, b, self.padding, 1)?;
        let y = tape.relu(y);
        let gamma = tape.param(store, &self.gamma())?;
        let beta = tape.param(store, &self.beta())?;
        let stats = match mode {
            Mode::Eval => NormStats::Running {
                mean: store.buffer(&self.running_mean())?.data(),
                var: store.buffer(&self.running_var())?.data(),
            },
            Mode::Train | Mode::Frozen => NormStats::Batch,
        };
        let (y, moments) = tape.batch_norm(y, gamma, beta, stats, BN_EPSILON)?;
        let update = match (mode, moments) {
            (Mode::Train, Some(moments)) => Some(StatUpdate {
                mean_name: self.running_mean(),
                var_name: self.running_var(),
                moments,
            }),
            _ => None,
        };
        Ok((y, update))
    }
}

/// Feature-map counts of the three block stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CnnWidths {
    /// Maps after the 7x7 block.
    pub first: usize,
    /// Maps of each 3x3 block.
    pub second: usize,
    /// Maps after the 1x1 block; the feature length.
    pub out: usize,
}

impl CnnWidths {
    pub const FULL: CnnWidths = CnnWidths {
        first: 256,
        second: 512,
        out: 512,
    };

    /// All widths divided by `factor` (at least one map each).
    pub fn divided(self, factor: usize) -> CnnWidths {
        CnnWidths {
            first: (self.first / factor).max(1),
            second: (self.second / factor).max(1),
            out: (self.out / factor).max(1),
        }
    }
}

/// The four conv blocks of the spatial branch.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub channels: usize,
    pub patch: usize,
    pub widths: CnnWidths,
    pub block1: ConvBlockParams,
    pub block2a: ConvBlockParams,
    pub block2b: ConvBlockParams,
    pub block3: ConvBlockParams,
}

/// Output of [`CnnParams::features`] with every intermediate map.
#[derive(Clone, Debug)]
pub struct CnnOutput {
    /// `[batch, widths.out]`.
    pub feature: Var,
    pub block1: Var,
    pub pooled: Var,
    pub block2a: Var,
    pub block2b: Var,
    pub concat: Var,
    /// Map fed to global average pooling.
    pub pre_pool: Var,
    pub stat_updates: Vec<StatUpdate>,
}

impl CnnParams {
    pub fn new(channels: usize, patch: usize, widths: CnnWidths) -> Result<Self> {
        if channels == 0 || widths.first == 0 || widths.second == 0 || widths.out == 0 {
            return Err(Error::Invalid("CNN channel counts must be positive".into()));
        }
        let p = CnnParams {
            channels,
            patch,
            widths,
            block1: ConvBlockParams::new("cnn.block1", channels, widths.first, 7, Padding::Valid),
            block2a: ConvBlockParams::new("cnn.block2a", widths.first, widths.second, 3, Padding::Valid),
            block2b: ConvBlockParams::new("cnn.block2b", widths.second, widths.second, 3, Padding::Same),
            block3: ConvBlockParams::new("cnn.block3", 2 * widths.second, widths.out, 1, Padding::Valid),
        };
        if patch < 7 || p.pooled_side().is_none_or(|s| s < 3) {
            return Err(Error::Invalid(format!(
                "patch size {patch} too small for the 7x7 / pool / 3x3 chain"
            )));
        }
        Ok(p)
    }

    fn pooled_side(&self) -> Option<usize> {
        let s = self.patch.checked_sub(6)?;
        Some(s.checked_sub(POOL_WINDOW)? / POOL_STRIDE + 1)
    }

    /// Side of the final map before global pooling (7 for 25x25 patches).
    pub fn final_side(&self) -> usize {
        self.pooled_side().expect("validated in new") - 2
    }

    pub fn blocks(&self) -> [&ConvBlockParams; 4] {
        [&self.block1, &self.block2a, &self.block2b, &self.block3]
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks().iter().flat_map(|b| b.names()).collect()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for b in self.blocks() {
            b.init(store, rng);
        }
    }

    /// `patch` is `[batch, channels, P, P]`.
    pub fn features(&self, tape: &mut Tape, store: &ParamStore, patch: Var, mode: Mode) -> Result<CnnOutput> {
        let shape = tape.shape(patch);
        if shape.len() != 4 || shape[1..] != [self.channels, self.patch, self.patch] {
            return dim_err(
                "cnn_features",
                format!(
                    "expected [batch, {}, {}, {}], got {shape:?}",
                    self.channels, self.patch, self.patch
                ),
            );
        }
        let batch = shape[0];
        let mut updates = Vec::new();
        let mut run = |tape: &mut Tape, block: &ConvBlockParams, x: Var| -> Result<Var> {
            let (y, u) = block.forward(tape, store, x, mode)?;
            updates.extend(u);
            Ok(y)
        };
        let block1 = run(tape, &self.block1, patch)?;
        let pooled = tape.maxpool2d(block1, POOL_WINDOW, POOL_STRIDE)?;
        let block2a = run(tape, &self.block2a, pooled)?;
        let block2b = run(tape, &self.block2b, block2a)?;
        let concat = tape.concat(&[block2a, block2b], 1)?;
        let pre_pool = run(tape, &self.block3, concat)?;
        let feature = tape.global_avg_pool(pre_pool)?;

        let side = self.final_side();
        debug_assert_eq!(tape.shape(concat), &[batch, 2 * self.widths.second, side, side]);
        debug_assert_eq!(tape.shape(pre_pool), &[batch, self.widths.out, side, side]);
        Ok(CnnOutput {
            feature,
            block1,
            pooled,
            block2a,
            block2b,
            concat,
            pre_pool,
            stat_updates: updates,
        })
    }
}
