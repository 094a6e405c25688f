//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The training criteria (5 to 8) share their runs: the seed-0 fusion model
//! trained for criterion 5 is reused by 6, 7 and as one of the five seeds of 8.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use m3fusion::cnn::{CnnParams, CnnWidths, Mode};
use m3fusion::data::preprocess::gapfill_linear;
use m3fusion::data::{object_split, synth_generate, Dataset, Sample, SynthConfig, SynthData};
use m3fusion::fusion::{Architecture, Batch, Dims, FusionModel, Head, LossWeights, Variant};
use m3fusion::grad::{Float, ParamStore, Tape, Tensor};
use m3fusion::gradsuite;
use m3fusion::rnn::RnnBranch;
use m3fusion::train::{self, randomize_heads, TrainConfig, TrainOutcome};
use m3fusion::Result;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale) as Float)
}

fn gradient_fidelity() -> Result<Verdict> {
    let start = Instant::now();
    let checks = gradsuite::reduced_suite()?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max);
    let ok = failed.is_empty() && elapsed < Duration::from_secs(120);
    Ok(verdict(
        ok,
        format!(
            "{} checks, max rel {worst:.2e} < {:.0e}, {:.1}s; failing: {failed:?}",
            checks.len(),
            gradsuite::suite_tolerance(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn shape_contract() -> Result<Verdict> {
    let start = Instant::now();
    let dims = Dims::FULL;
    let arch = Architecture::new(dims, Variant::Fusion)?;
    let store = arch.init(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = Batch {
        ts: random(&[1, dims.dates, dims.variables], 1.0, &mut rng),
        patch: random(&[1, dims.channels, dims.patch, dims.patch], 1.0, &mut rng),
        labels: vec![0],
    };
    let mut tape = Tape::new();
    let fwd = arch.forward(&mut tape, &store, &batch, Mode::Eval)?;
    let rnn = tape.shape(fwd.rnn_feat.expect("fusion has an rnn branch")).to_vec();
    let cnn = tape.shape(fwd.cnn_feat.expect("fusion has a cnn branch")).to_vec();
    let fusion_in = arch.head(Head::Fusion).expect("fusion head").in_dim;

    let cnn_params = CnnParams::new(dims.channels, dims.patch, CnnWidths::FULL)?;
    let x = tape.input(batch.patch.clone());
    let out = cnn_params.features(&mut tape, &store, x, Mode::Eval)?;
    let pre_pool = tape.shape(out.pre_pool).to_vec();

    let layout = Dataset::new(dims.dates, dims.variables, dims.patch, dims.channels, dims.classes);
    let stacked = layout.patch_len() + layout.ts_len();

    let ok = rnn == [1, 1024]
        && cnn == [1, 512]
        && fusion_in == 1536
        && pre_pool == [1, 512, 7, 7]
        && stacked == 3669
        && dims.stacked_len() == 3669;
    Ok(verdict(
        ok,
        format!(
            "rnn {rnn:?}, cnn {cnn:?}, fusion in {fusion_in}, pre-pool {pre_pool:?}, stacked {stacked} ({:.2}s)",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn attention_normalization() -> Result<Verdict> {
    const GROUPS: usize = 10;
    const PER_GROUP: usize = 100;
    let (dates, vars, d) = (8, 16, 16);
    let branch = RnnBranch::new(vars, d)?;
    let (mut worst_sum, mut min_weight, mut worst_escape) = (0.0f64, f64::INFINITY, 0.0f64);
    for g in 0..GROUPS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + g as u64);
        let mut store = ParamStore::new();
        branch.init(&mut store, &mut rng);
        // Larger inputs saturate the GRU and sharpen the attention.
        let scale = 1.0 + g as f64;
        let mut tape = Tape::new();
        let ts = tape.input(random(&[PER_GROUP, dates, vars], scale, &mut rng));
        let h0 = tape.input(Tensor::zeros([PER_GROUP, d]));
        let h = branch.gru.sequence(&mut tape, &store, ts, h0)?;
        let pooled = branch.attention.pool(&mut tape, &store, h)?;
        let (h, lambda, feat) = (tape.value(h), tape.value(pooled.weights), tape.value(pooled.feature));
        for s in 0..PER_GROUP {
            let row = &lambda.data()[s * dates..(s + 1) * dates];
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
            min_weight = row.iter().fold(min_weight, |m, &v| m.min(v as f64));
            for k in 0..d {
                let column = (0..dates).map(|t| h.data()[(s * dates + t) * d + k] as f64);
                let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let f = feat.data()[s * d + k] as f64;
                worst_escape = worst_escape.max(lo - f).max(f - hi);
            }
        }
    }
    let ok = worst_sum <= 1e-5 && min_weight > 0.0 && worst_escape <= 0.0;
    Ok(verdict(
        ok,
        format!(
            "{} inputs: max |sum - 1| {worst_sum:.1e}, min weight {min_weight:.2e}, max escape from H range {worst_escape:.1e}",
            GROUPS * PER_GROUP
        ),
    ))
}

fn loss_arithmetic() -> Result<Verdict> {
    let dims = Dims {
        hidden: 8,
        classes: 13,
        dates: 4,
        variables: 3,
        patch: 13,
        channels: 2,
        widths: CnnWidths::FULL.divided(32),
    };
    let mut model = FusionModel::new(dims, Variant::Fusion, LossWeights::new(0.3, 0.3)?, 3)?;
    for head in model.arch.heads.clone().iter().flatten() {
        for name in [head.w(), head.b()] {
            model.store.value_mut(&name)?.data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = Batch {
        ts: random(&[6, dims.dates, dims.variables], 1.0, &mut rng),
        patch: random(&[6, dims.channels, dims.patch, dims.patch], 1.0, &mut rng),
        labels: (0..6).map(|_| rng.random_range(0..13)).collect(),
    };
    let total = model.loss(&batch)?.total;
    let expected = 1.6 * 13f64.ln();
    Ok(verdict(
        (total - expected).abs() < 1e-4,
        format!("L_total {total:.6} vs 1.6 ln 13 = {expected:.6}"),
    ))
}

fn pipeline_correctness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut ramp_err = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..40);
        let (a, slope) = (rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        mask[0] = true;
        mask[n - 1] = true;
        let ramp: Vec<f64> = (0..n).map(|i| a + slope * i as f64).collect();
        let holed: Vec<Float> = ramp.iter().zip(&mask).map(|(&v, &m)| if m { v as Float } else { -999.0 }).collect();
        let filled = gapfill_linear(&holed, &mask)?;
        for (f, r) in filled.iter().zip(&ramp) {
            ramp_err = ramp_err.max((*f as f64 - r).abs() / (1.0 + r.abs()));
        }
    }
    // Float rounding of the ramp values themselves is the only allowed error.
    let ramps_ok = ramp_err < 4.0 * Float::EPSILON as f64;

    let data = synth_generate(&SynthConfig {
        train_per_class: 30,
        test_per_class: 0,
        ..SynthConfig::default()
    })?;
    let mut ds = data.train;
    ds.samples[0].ts[0] = -0.0;
    ds.samples[1].patch[3] = Float::MIN_POSITIVE / 2.0;
    let mut bytes = Vec::new();
    ds.write(&mut bytes)?;
    let back = Dataset::read(&mut bytes.as_slice())?;
    let bits = |s: &[Sample]| -> Vec<u64> {
        s.iter()
            .flat_map(|x| x.ts.iter().chain(&x.patch).map(|v| v.to_bits() as u64))
            .collect()
    };
    let mut again = Vec::new();
    back.write(&mut again)?;
    let roundtrip_ok = back == ds && bits(&back.samples) == bits(&ds.samples) && again == bytes;

    let labels = ds.labels();
    let objects: Vec<u32> = ds.samples.iter().map(|s| s.object).collect();
    let split = object_split(&labels, &objects, 0.3, 5)?;
    let disjoint = split.train_objects.is_disjoint(&split.test_objects)
        && split.train.iter().all(|i| !split.test.contains(i))
        && split.train.len() + split.test.len() == ds.len();
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&l, o) in labels.iter().zip(&objects) {
        let e = per_class.entry(l).or_default();
        e.1 += 1;
        if split.train_objects.contains(o) {
            e.0 += 1;
        }
    }
    // Counts are per sample; every object here has the same size.
    let object_size = SynthConfig::default().object_size;
    let fractions_ok = per_class.values().all(|&(train, all)| {
        let (train, all) = (train / object_size, all / object_size);
        train == ((all as f64 * 0.3).round() as usize).clamp(1, all)
    });
    let ok = ramps_ok && roundtrip_ok && disjoint && fractions_ok;
    Ok(verdict(
        ok,
        format!(
            "gapfill max rel err {ramp_err:.1e}, round trip {roundtrip_ok}, disjoint {disjoint}, 30% per class {fractions_ok}"
        ),
    ))
}

/// Criterion-5 setup for one seed: the default synthetic data drawn with
/// that seed, reduced dims, 40 epochs.
fn setup(seed: u64) -> Result<(SynthData, TrainConfig)> {
    let data = synth_generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    let config = TrainConfig {
        epochs: 40,
        seed,
        ..TrainConfig::default()
    };
    Ok((data, config))
}

struct Runs {
    data: SynthData,
    fusion: TrainOutcome,
    fusion_accuracy: f64,
}

fn fusion_beats_ablation() -> Result<(Verdict, Runs)> {
    let start = Instant::now();
    let (data, config) = setup(0)?;
    let (fusion, fusion_out) = train::ablation(&data.train, &data.test, &config, Variant::Fusion)?;
    let (rnn, _) = train::ablation(&data.train, &data.test, &config, Variant::RnnOnly)?;
    let (cnn, _) = train::ablation(&data.train, &data.test, &config, Variant::CnnOnly)?;
    let elapsed = start.elapsed();
    let (f, r, c) = (fusion.accuracy, rnn.accuracy, cnn.accuracy);
    let ok = f >= 0.90 && f - r >= 0.05 && f - c >= 0.05 && elapsed < Duration::from_secs(15 * 60);
    let v = verdict(
        ok,
        format!(
            "fusion {:.2}%, rnn-only {:.2}%, cnn-only {:.2}% ({:.0}s)",
            100.0 * f,
            100.0 * r,
            100.0 * c,
            elapsed.as_secs_f64()
        ),
    );
    Ok((
        v,
        Runs {
            data,
            fusion: fusion_out,
            fusion_accuracy: f,
        },
    ))
}

fn auxiliary_heads(runs: &Runs) -> Result<Verdict> {
    let chance = 1.0 / runs.data.test.classes as f64;
    let h1 = train::evaluate_head(&runs.data.test, &runs.fusion.model, Head::Rnn)?.accuracy;
    let h2 = train::evaluate_head(&runs.data.test, &runs.fusion.model, Head::Cnn)?.accuracy;
    let bar = chance + 0.10;
    Ok(verdict(
        h1 > bar && h2 > bar,
        format!("head1 {:.2}%, head2 {:.2}% (bar {:.2}%)", 100.0 * h1, 100.0 * h2, 100.0 * bar),
    ))
}

fn inference_isolation(runs: &Runs) -> Result<Verdict> {
    let test = runs.data.test.all();
    let before: Vec<usize> = runs.fusion.model.predict(&test)?.iter().map(|p| p.class).collect();
    let mut model = runs.fusion.model.clone();
    randomize_heads(&mut model, &[Head::Rnn, Head::Cnn], 77)?;
    let changed = ["head1.w", "head2.w"]
        .iter()
        .all(|n| model.store.value(n).ok() != runs.fusion.model.store.value(n).ok());
    let after: Vec<usize> = model.predict(&test)?.iter().map(|p| p.class).collect();
    let eval_before = train::evaluate(&runs.data.test, &runs.fusion.model)?;
    let eval_after = train::evaluate(&runs.data.test, &model)?;
    let diffs = before.iter().zip(&after).filter(|(a, b)| a != b).count();
    Ok(verdict(
        changed && diffs == 0 && eval_before == eval_after,
        format!("heads changed {changed}, {diffs} of {} predictions differ", before.len()),
    ))
}

fn determinism(runs: &Runs) -> Result<Verdict> {
    // Two complete runs of one short configuration on the criterion-5 data.
    let short = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let a = train::train(&runs.data.train, &short, Variant::Fusion)?;
    let b = train::train(&runs.data.train, &short, Variant::Fusion)?;
    let identical = train::loss_log_csv(&a.log) == train::loss_log_csv(&b.log) && a.model.store == b.model.store;

    let mut accuracies = vec![runs.fusion_accuracy];
    for seed in 1..5 {
        let (data, config) = setup(seed)?;
        let (report, _) = train::ablation(&data.train, &data.test, &config, Variant::Fusion)?;
        accuracies.push(report.accuracy);
    }
    let lo = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = 100.0 * (hi - lo);
    let shown: Vec<String> = accuracies.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
    Ok(verdict(
        identical && spread <= 4.0,
        format!("identical logs {identical}; seeds 0..4 accuracy [{}], spread {spread:.2} points", shown.join(", ")),
    ))
}

fn report(number: usize, name: &str, result: Result<Verdict>, all: &mut bool) {
    let (passed, detail) = match result {
        Ok(v) => (v.passed, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    *all &= passed;
    println!("[{}] {number}. {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn main() -> ExitCode {
    let mut all = true;
    report(1, "gradient fidelity", gradient_fidelity(), &mut all);
    report(2, "shape contract", shape_contract(), &mut all);
    report(3, "attention normalization", attention_normalization(), &mut all);
    report(4, "loss arithmetic", loss_arithmetic(), &mut all);
    report(9, "pipeline correctness", pipeline_correctness(), &mut all);
    match fusion_beats_ablation() {
        Ok((v, runs)) => {
            report(5, "fusion beats ablation", Ok(v), &mut all);
            report(6, "auxiliary heads above chance", auxiliary_heads(&runs), &mut all);
            report(7, "inference-path isolation", inference_isolation(&runs), &mut all);
            report(8, "determinism", determinism(&runs), &mut all);
        }
        Err(e) => {
            for (n, name) in [(5, "fusion beats ablation"), (6, "auxiliary heads above chance"), (7, "inference-path isolation"), (8, "determinism")] {
                report(n, name, Err(m3fusion::Error::Invalid(format!("training failed: {e}"))), &mut all);
            }
        }
    }
    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria failed");
        ExitCode::FAILURE
    }
}
