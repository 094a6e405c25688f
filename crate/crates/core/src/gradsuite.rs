//! The reduced gradient-check suite: every tape op on small random inputs,
//! then the branches and the full loss at `d = 8`.
//!
//! Every probed coordinate must pass; there is no pass-fraction allowance.
//! At most [`MAX_UNRESOLVED`] of them may be too noisy to resolve the
//! tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::{CnnParams, CnnWidths, ConvBlockParams, Mode};
use crate::error::Result;
use crate::fusion::{Batch, Dims, FusionModel, LossWeights, Variant};
use crate::grad::{grad_check, Fragment, GradCheckConfig, GradCheckReport, NormStats, Padding, ParamStore, Tape, Tensor, Var};
use crate::init::uniform;
use crate::rnn::RnnBranch;

/// Largest relative error accepted by the suite: `1e-2` in 32-bit builds,
/// `1e-6` with the `f64` feature.
pub fn suite_tolerance() -> f64 {
    if cfg!(feature = "f64") {
        1e-6
    } else {
        1e-2
    }
}

#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Largest fraction of probed coordinates that may be unresolved.
pub const MAX_UNRESOLVED: f64 = 0.1;

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        let r = &self.report;
        r.checked() > 0
            && r.failed() == 0
            && r.max_rel_error() < r.tolerance
            && r.unresolved() as f64 <= MAX_UNRESOLVED * r.checked() as f64
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, 1.0, &mut rng(seed))
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate has
/// its own weight.
fn projected(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = tape.input(random(tape.shape(out), seed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn store_of(entries: &[(&str, &[usize])], seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        s.insert(*name, random(shape, seed + i as u64));
    }
    s
}

/// Moves batch-norm parameters and running statistics off their identity
/// initialization so the check exercises every term.
fn perturb_norm(store: &mut ParamStore, block: &ConvBlockParams, seed: u64) -> Result<()> {
    let mut r = rng(seed);
    let c = block.c_out;
    *store.value_mut(&block.gamma())? = Tensor::from_fn([c], |_| r.random_range(0.5..1.5));
    *store.value_mut(&block.beta())? = Tensor::from_fn([c], |_| r.random_range(-1.0..1.0));
    *store.value_mut(&block.bias())? = Tensor::from_fn([c], |_| r.random_range(-1.0..1.0));
    *store.buffer_mut(&block.running_mean())? = Tensor::from_fn([c], |_| r.random_range(0.0..0.5));
    *store.buffer_mut(&block.running_var())? = Tensor::from_fn([c], |_| r.random_range(0.5..2.0));
    Ok(())
}

struct Runner {
    base: GradCheckConfig,
    checks: Vec<SuiteCheck>,
}

impl Runner {
    fn run(&mut self, name: impl Into<String>, f: &dyn Fragment, store: &ParamStore, samples: usize) -> Result<()> {
        let config = GradCheckConfig {
            samples_per_param: samples,
            ..self.base.clone()
        };
        self.checks.push(SuiteCheck {
            name: name.into(),
            report: grad_check(f, store, &config)?,
        });
        Ok(())
    }
}

pub fn reduced_suite() -> Result<Vec<SuiteCheck>> {
    reduced_suite_with(&GradCheckConfig {
        tolerance: suite_tolerance(),
        ..GradCheckConfig::default()
    })
}

/// The suite with another step, tolerance or seed; the per-check sample
/// counts are fixed.
pub fn reduced_suite_with(base: &GradCheckConfig) -> Result<Vec<SuiteCheck>> {
    let mut r = Runner {
        base: base.clone(),
        checks: Vec::new(),
    };

    let store = store_of(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5])], 20);
    let f = |t: &mut Tape, s: &ParamStore| {
        let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
        let y = t.matmul(x, w)?;
        let y = t.add_bias(y, b)?;
        projected(t, y, 1)
    };
    r.run("op matmul + add_bias", &f, &store, 24)?;

    let store = store_of(&[("a", &[2, 3, 4]), ("b", &[2, 3, 4]), ("c", &[2, 2, 4])], 21);
    let f = |t: &mut Tape, s: &ParamStore| {
        let (a, b, c) = (t.param(s, "a")?, t.param(s, "b")?, t.param(s, "c")?);
        let m = t.mul(a, b)?;
        let d = t.sub(m, b)?;
        let e = t.add(d, a)?;
        let e = t.scale(e, 0.7);
        let cat = t.concat(&[e, c], 1)?;
        let steps: Vec<Var> = (0..5).map(|i| t.select_step(cat, 4 - i)).collect::<Result<_>>()?;
        let st = t.stack_steps(&steps)?;
        let flat = t.reshape(st, &[10, 4])?;
        projected(t, flat, 2)
    };
    r.run("op add/sub/mul/scale/concat/select/stack/reshape", &f, &store, 24)?;

    let store = store_of(&[("x", &[4, 5])], 22);
    let f = |t: &mut Tape, s: &ParamStore| {
        let x = t.param(s, "x")?;
        let (a, b, c) = (t.tanh(x), t.sigmoid(x), t.relu(x));
        let ab = t.mul(a, b)?;
        let y = t.add(ab, c)?;
        projected(t, y, 3)
    };
    r.run("op tanh/sigmoid/relu", &f, &store, 24)?;

    let store = store_of(&[("logits", &[3, 4]), ("seq", &[3, 4, 2])], 23);
    let f = |t: &mut Tape, s: &ParamStore| {
        let (l, q) = (t.param(s, "logits")?, t.param(s, "seq")?);
        let p = t.softmax(l)?;
        let ws = t.weighted_sum(p, q)?;
        let ce = t.cross_entropy(p, &[0, 3, 1])?;
        let proj = projected(t, ws, 4)?;
        t.add(ce, proj)
    };
    r.run("op softmax/cross_entropy/weighted_sum", &f, &store, 24)?;

    let store = store_of(&[("x", &[2, 2, 7, 7]), ("k", &[3, 2, 3, 3]), ("b", &[3])], 24);
    for (padding, stride) in [(Padding::Valid, 1), (Padding::Same, 1), (Padding::Valid, 2)] {
        let f = move |t: &mut Tape, s: &ParamStore| {
            let (x, k, b) = (t.param(s, "x")?, t.param(s, "k")?, t.param(s, "b")?);
            let y = t.conv2d(x, k, b, padding, stride)?;
            let y = t.tanh(y);
            let p = t.maxpool2d(y, 2, 1)?;
            let g = t.global_avg_pool(p)?;
            projected(t, g, 5)
        };
        r.run(format!("op conv2d ({padding:?}, stride {stride}) + maxpool + gap"), &f, &store, 24)?;
    }

    let store = store_of(&[("x", &[3, 2, 3, 3]), ("g", &[2]), ("b", &[2])], 25);
    let (mean, var) = ([0.1, -0.3], [0.8, 1.7]);
    for running in [false, true] {
        let f = move |t: &mut Tape, s: &ParamStore| {
            let (x, g, b) = (t.param(s, "x")?, t.param(s, "g")?, t.param(s, "b")?);
            let stats = if running {
                NormStats::Running { mean: &mean, var: &var }
            } else {
                NormStats::Batch
            };
            let (y, _) = t.batch_norm(x, g, b, stats, 1e-5)?;
            projected(t, y, 6)
        };
        let which = if running { "running" } else { "batch" };
        r.run(format!("op batch_norm ({which} statistics)"), &f, &store, 24)?;
    }

    // GRU + attention branch: N = 5 dates, 4 input variables, d = 8.
    let branch = RnnBranch::new(4, 8)?;
    let mut store = ParamStore::new();
    branch.init(&mut store, &mut rng(26));
    store.insert("ts", random(&[2, 5, 4], 27));
    let f = |t: &mut Tape, s: &ParamStore| {
        let ts = t.param(s, "ts")?;
        let pooled = branch.features(t, s, ts)?;
        projected(t, pooled.feature, 7)
    };
    r.run("rnn branch (N=5, B=4, d=8)", &f, &store, 12)?;

    // CNN branch on one 13x13 patch, the smallest the block chain accepts.
    let cnn = CnnParams::new(5, 13, CnnWidths::FULL.divided(16))?;
    let mut store = ParamStore::new();
    cnn.init(&mut store, &mut rng(28));
    for (i, b) in cnn.blocks().into_iter().enumerate() {
        perturb_norm(&mut store, b, 29 + i as u64)?;
    }
    store.insert("patch", random(&[1, 5, 13, 13], 33));
    for mode in [Mode::Eval, Mode::Frozen] {
        let f = |t: &mut Tape, s: &ParamStore| {
            let x = t.param(s, "patch")?;
            let out = cnn.features(t, s, x, mode)?;
            projected(t, out.feature, 8)
        };
        r.run(format!("cnn branch (P=13, widths/16, {mode:?} norm)"), &f, &store, 12)?;
    }

    // Full three-head loss with d = 8.
    let dims = Dims {
        hidden: 8,
        classes: 4,
        dates: 5,
        variables: 4,
        patch: 13,
        widths: CnnWidths::FULL.divided(16),
        ..Dims::FULL
    };
    let model = FusionModel::new(dims, Variant::Fusion, LossWeights::default(), 34)?;
    let batch = Batch {
        ts: random(&[1, dims.dates, dims.variables], 35),
        patch: random(&[1, dims.channels, dims.patch, dims.patch], 36),
        labels: vec![3],
    };
    for mode in [Mode::Eval, Mode::Frozen] {
        let f = |t: &mut Tape, s: &ParamStore| Ok(model.arch.losses(t, s, &batch, model.weights, mode)?.total);
        r.run(format!("fusion loss (d=8, P=13, {mode:?} norm)"), &f, &model.store, 8)?;
    }
    Ok(r.checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suite_passes() {
        let checks = reduced_suite().unwrap();
        assert!(checks.len() >= 14);
        for c in &checks {
            assert!(c.passed(), "{}: {:?}", c.name, c.report);
        }
    }
}
