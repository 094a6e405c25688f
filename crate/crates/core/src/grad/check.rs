//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Float;
use crate::error::{Error, Result};

/// A deterministic scalar function of the parameters in a store.
pub trait Fragment {
    fn loss(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var>;

    /// Whether evaluating the fragment mutates batch-norm running
    /// statistics. Such fragments cannot be probed.
    fn updates_stats(&self) -> bool {
        false
    }
}

impl<F> Fragment for F
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    fn loss(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        self(tape, store)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Largest acceptable relative error per coordinate.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients near
    /// zero are compared absolutely.
    pub abs_floor: f64,
    /// Coordinates probed per parameter; smaller tensors are probed fully.
    pub samples_per_param: usize,
    /// Times the step is quartered when a probe crosses a kink (see
    /// [`Tape::branch_signature`]) before the coordinate is skipped.
    pub max_refinements: usize,
    /// Fraction of probed coordinates that must pass.
    pub min_pass_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: default_step(),
            tolerance: default_tolerance(),
            abs_floor: default_abs_floor(),
            samples_per_param: 16,
            max_refinements: 3,
            min_pass_fraction: 1.0,
            seed: 0,
        }
    }
}

/// Central-difference step matched to the scalar precision.
pub fn default_step() -> f64 {
    if cfg!(feature = "f64") {
        1e-3
    } else {
        1e-2
    }
}

/// Per-coordinate relative tolerance for single-op checks.
pub fn default_tolerance() -> f64 {
    if cfg!(feature = "f64") {
        1e-6
    } else {
        1e-3
    }
}

/// Denominator floor matched to the scalar precision.
pub fn default_abs_floor() -> f64 {
    if cfg!(feature = "f64") {
        1e-6
    } else {
        1e-2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub failed: usize,
    /// Coordinates whose every probe straddled a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Largest relative error before the noise slack is subtracted.
    pub max_raw_error: f64,
    /// Largest noise slack as a fraction of the error denominator; the
    /// check can only resolve errors well above this.
    pub max_slack_ratio: f64,
    /// Coordinates whose noise slack exceeds the tolerance, so that the
    /// comparison cannot resolve an error of the tolerated size.
    pub unresolved: usize,
    /// The coordinate with the largest raw error.
    pub worst: Option<Probe>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub half_step: f64,
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub min_pass_fraction: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn failed(&self) -> usize {
        self.params.iter().map(|p| p.failed).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_raw_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_raw_error).fold(0.0, f64::max)
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    pub fn max_slack_ratio(&self) -> f64 {
        self.params.iter().map(|p| p.max_slack_ratio).fold(0.0, f64::max)
    }

    pub fn pass_fraction(&self) -> f64 {
        let n = self.checked();
        if n == 0 {
            1.0
        } else {
            1.0 - self.failed() as f64 / n as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.pass_fraction() >= self.min_pass_fraction
    }
}

/// Relative error with a denominator floor, after forgiving `slack` of
/// absolute disagreement.
pub fn relative_error(analytic: f64, numeric: f64, slack: f64, abs_floor: f64) -> f64 {
    ((analytic - numeric).abs() - slack).max(0.0) / analytic.abs().max(numeric.abs()).max(abs_floor)
}

fn eval(fragment: &dyn Fragment, store: &ParamStore) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let loss = fragment.loss(&mut tape, store)?;
    Ok((tape.scalar_value(loss), tape.branch_signature()))
}

/// Loss evaluations used to estimate noise.
const NOISE_POINTS: usize = 9;
/// Spacing of the noise probes as a fraction of the difference step.
const NOISE_SPACING: f64 = 1.0 / 64.0;
/// Disagreement forgiven, in standard deviations of the difference quotient.
const NOISE_SIGMAS: f64 = 4.0;

/// Standard deviation of the rounding noise in the loss along coordinate
/// `i`, by the difference-table method of Moré and Wild: the loss is
/// evaluated at closely spaced points, where its smooth variation is nearly
/// linear, and third differences remove that variation and leave the noise.
/// The spacing follows the difference step so that the perturbation reaches
/// the same downstream roundings as the difference probes.
fn noise_level(fragment: &dyn Fragment, probe: &mut ParamStore, name: &str, i: usize, half_step: f64) -> Result<f64> {
    let x = probe.value(name)?.data()[i];
    let delta = half_step * NOISE_SPACING;
    let mut d = Vec::with_capacity(NOISE_POINTS);
    for j in 0..NOISE_POINTS {
        let offset = (j as f64 - (NOISE_POINTS / 2) as f64) * delta;
        probe.value_mut(name)?.data_mut()[i] = (x as f64 + offset) as Float;
        d.push(eval(fragment, probe)?.0);
    }
    probe.value_mut(name)?.data_mut()[i] = x;
    for _ in 0..3 {
        d = d.windows(2).map(|w| w[1] - w[0]).collect();
    }
    // E[(third difference)^2] = 20 sigma^2 for independent noise.
    let mean_sq = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    Ok((mean_sq / 20.0).sqrt())
}

/// A derivative estimate whose noise has deviation `noise_gain` times the
/// loss noise.
struct Estimate {
    value: f64,
    half_step: f64,
    noise_gain: f64,
}

/// Central differences at half steps `h` and `h / 2` combined by Richardson
/// extrapolation, which cancels the `h^2` truncation term. The step is
/// quartered while any probe leaves the smooth piece containing the
/// unperturbed point.
fn central_difference(
    fragment: &dyn Fragment,
    probe: &mut ParamStore,
    name: &str,
    i: usize,
    base_signature: u64,
    config: &GradCheckConfig,
) -> Result<Option<Estimate>> {
    let x = probe.value(name)?.data()[i];
    let mut step = config.step;
    'refine: for _ in 0..=config.max_refinements {
        let mut quotients = [(0.0, 0.0); 2];
        for (k, h) in [step, step / 2.0].into_iter().enumerate() {
            let plus = x + h as Float;
            let minus = x - h as Float;
            probe.value_mut(name)?.data_mut()[i] = plus;
            let (lp, sp) = eval(fragment, probe)?;
            probe.value_mut(name)?.data_mut()[i] = minus;
            let (lm, sm) = eval(fragment, probe)?;
            probe.value_mut(name)?.data_mut()[i] = x;
            if sp != base_signature || sm != base_signature {
                step /= 4.0;
                continue 'refine;
            }
            let width = plus as f64 - minus as f64;
            quotients[k] = ((lp - lm) / width, width);
        }
        let [(d1, w1), (d2, w2)] = quotients;
        let r2 = (w1 / w2).powi(2);
        let value = (r2 * d2 - d1) / (r2 - 1.0);
        // each quotient carries noise sigma * sqrt(2) / width
        let noise_gain = (r2 * r2 * 2.0 / (w2 * w2) + 2.0 / (w1 * w1)).sqrt() / (r2 - 1.0);
        return Ok(Some(Estimate {
            value,
            half_step: w1 / 2.0,
            noise_gain,
        }));
    }
    Ok(None)
}

/// Compares tape gradients of `fragment` against central differences at
/// sampled coordinates of every parameter in `store`.
pub fn grad_check(
    fragment: &dyn Fragment,
    store: &ParamStore,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if fragment.updates_stats() {
        return Err(Error::StatefulFragment);
    }
    let mut tape = Tape::new();
    let loss = fragment.loss(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let base_signature = tape.branch_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = store.clone();
    let mut params = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.value(&name)?.len();
        let analytic: Vec<Float> = tape
            .params()
            .find(|(p, _)| *p == name)
            .and_then(|(_, v)| grads.get(v))
            .map(<[Float]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= config.samples_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.samples_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            failed: 0,
            skipped: 0,
            max_rel_error: 0.0,
            max_raw_error: 0.0,
            max_slack_ratio: 0.0,
            unresolved: 0,
            worst: None,
        };
        for i in coords {
            let Some(estimate) = central_difference(fragment, &mut probe, &name, i, base_signature, config)? else {
                check.skipped += 1;
                continue;
            };
            let (numeric, step) = (estimate.value, estimate.half_step);
            let sigma = noise_level(fragment, &mut probe, &name, i, step)?;
            let slack = NOISE_SIGMAS * sigma * estimate.noise_gain;
            let a = analytic[i] as f64;
            let err = relative_error(a, numeric, slack, config.abs_floor);
            let denom = a.abs().max(numeric.abs()).max(config.abs_floor);
            let raw = relative_error(a, numeric, 0.0, config.abs_floor);
            if check.worst.is_none() || raw > check.max_raw_error {
                check.worst = Some(Probe {
                    index: i,
                    analytic: a,
                    numeric,
                    half_step: step,
                    slack,
                });
            }
            check.max_raw_error = check.max_raw_error.max(raw);
            check.max_slack_ratio = check.max_slack_ratio.max(slack / denom);
            if slack / denom > config.tolerance {
                check.unresolved += 1;
            }
            check.checked += 1;
            if !(err <= config.tolerance) {
                check.failed += 1;
            }
            check.max_rel_error = check.max_rel_error.max(err);
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: config.tolerance,
        min_pass_fraction: config.min_pass_fraction,
    })
}
