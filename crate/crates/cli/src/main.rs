use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use m3fusion::data::{self, raw, synth_generate, Dataset, SynthConfig};
use m3fusion::fusion::{Head, Variant};
use m3fusion::gradsuite;
use m3fusion::grad::GradCheckConfig;
use m3fusion::metrics::{emit_heatmap, MetricsReport};
use m3fusion::train::{self, Profile, TrainConfig};
use m3fusion::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "m3fusion", version, about = "Train and evaluate the time-series / image-patch fusion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-modality dataset.
    Synth {
        /// Directory receiving train.m3d and test.m3d.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 200)]
        train_per_class: usize,
        #[arg(long, default_value_t = 400)]
        test_per_class: usize,
    },
    /// Split a dataset by object and normalize it with training-split bounds.
    Prep {
        /// A raw-input manifest (.toml) or a dataset file.
        #[arg(long)]
        input: PathBuf,
        /// Directory receiving train.m3d and test.m3d.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and keep the epoch with the lowest training loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = VariantArg::Fusion)]
        variant: VariantArg,
        /// Per-epoch loss CSV.
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score an auxiliary head instead of the model's prediction head.
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
        /// Metrics JSON output.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Confusion heatmap (PPM, with a CSV of counts next to it).
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Train and score the softmax classifier on stacked raw inputs.
    Baseline {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Train the fused model and both single-branch models and compare them.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Directory for per-variant metrics JSON and loss logs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Finite-difference gradient checks; exits nonzero if any check fails.
    Gradcheck {
        /// Run the reduced suite (the only one available from the command line).
        #[arg(long, required = true)]
        reduced: bool,
        /// Override the finite-difference step.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Render a metrics JSON file as a confusion heatmap.
    Heatmap {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Fusion,
    Rnn,
    Cnn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Fusion => Variant::Fusion,
            VariantArg::Rnn => Variant::RnnOnly,
            VariantArg::Cnn => Variant::CnnOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Rnn,
    Cnn,
    Fusion,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Head {
        match h {
            HeadArg::Rnn => Head::Rnn,
            HeadArg::Cnn => Head::Cnn,
            HeadArg::Fusion => Head::Fusion,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Reduced,
    Full,
}

/// Training settings: an optional TOML file, then flags on top of it.
#[derive(Args)]
struct TrainOpts {
    /// TOML file with any of the training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Where the best model is written.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl TrainOpts {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(p) = self.profile {
            c.profile = match p {
                ProfileArg::Reduced => Profile::Reduced,
                ProfileArg::Full => Profile::Full,
            };
        }
        if self.hidden.is_some() {
            c.hidden = self.hidden;
        }
        if self.width_divisor.is_some() {
            c.width_divisor = self.width_divisor;
        }
        if self.checkpoint.is_some() {
            c.checkpoint.clone_from(&self.checkpoint);
        }
        c.validate()?;
        let shown = toml::to_string(&c).map_err(|e| Error::Invalid(e.to_string()))?;
        println!("# resolved configuration\n{shown}");
        println!("seed = {}", c.seed);
        Ok(c)
    }
}

fn write_metrics(report: &MetricsReport, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        fs::write(path, report.to_json())?;
        info!("metrics written to {}", path.display());
    }
    Ok(())
}

fn summary(label: &str, r: &MetricsReport) {
    println!(
        "{label}: accuracy {:.4}, macro F {:.4}, weighted F {:.4} ({} samples)",
        r.accuracy, r.macro_f_measure, r.weighted_f_measure, r.samples
    );
    if !r.empty_classes.is_empty() {
        println!("{label}: classes without test samples: {:?}", r.empty_classes);
    }
}

fn save_splits(out: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(out)?;
    train.save(out.join("train.m3d"))?;
    test.save(out.join("test.m3d"))?;
    println!("wrote {} training and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            noise,
            train_per_class,
            test_per_class,
        } => {
            let config = SynthConfig {
                seed,
                noise,
                train_per_class,
                test_per_class,
                ..SynthConfig::default()
            };
            let d = synth_generate(&config)?;
            save_splits(&out, &d.train, &d.test)?;
        }
        Command::Prep {
            input,
            out,
            train_fraction,
            seed,
        } => {
            let ds = if input.extension().is_some_and(|e| e == "toml") {
                raw::load_raw(&input)?
            } else {
                Dataset::load(&input)?
            };
            let (train, test) = data::prepare(&ds, train_fraction, seed)?;
            save_splits(&out, &train, &test)?;
        }
        Command::Train {
            data,
            variant,
            loss_log,
            opts,
        } => {
            let config = opts.resolve()?;
            if config.checkpoint.is_none() {
                return Err(Error::Invalid("no checkpoint path (use --checkpoint or set it in the config)".into()));
            }
            let ds = Dataset::load(&data)?;
            let outcome = train::train(&ds, &config, variant.into())?;
            if let Some(path) = loss_log {
                train::write_loss_log(&outcome.log, path)?;
            }
            println!("best epoch {} with l_total {:.6}", outcome.best_epoch, outcome.best_loss());
        }
        Command::Eval {
            checkpoint,
            data,
            head,
            metrics,
            heatmap,
        } => {
            let model = checkpoint::load(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let report = match head {
                Some(h) => train::evaluate_head(&ds, &model, h.into())?,
                None => train::evaluate(&ds, &model)?,
            };
            summary("eval", &report);
            write_metrics(&report, metrics.as_deref())?;
            if let Some(path) = heatmap {
                emit_heatmap(&report, path)?;
            }
        }
        Command::Baseline {
            train,
            test,
            metrics,
            opts,
        } => {
            let config = opts.resolve()?;
            let report = train::baseline_stacked(&Dataset::load(&train)?, &Dataset::load(&test)?, &config)?;
            summary("stacked baseline", &report);
            write_metrics(&report, metrics.as_deref())?;
        }
        Command::Ablate { train, test, out, opts } => {
            let config = opts.resolve()?;
            let (train_ds, test_ds) = (Dataset::load(&train)?, Dataset::load(&test)?);
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            for (name, variant) in [("fusion", Variant::Fusion), ("rnn", Variant::RnnOnly), ("cnn", Variant::CnnOnly)] {
                let config = TrainConfig {
                    checkpoint: config.checkpoint.as_ref().map(|p| p.with_extension(format!("{name}.ckpt"))),
                    ..config.clone()
                };
                let (report, outcome) = train::ablation(&train_ds, &test_ds, &config, variant)?;
                summary(name, &report);
                if let Some(dir) = &out {
                    write_metrics(&report, Some(&dir.join(format!("{name}.json"))))?;
                    train::write_loss_log(&outcome.log, dir.join(format!("{name}_loss.csv")))?;
                }
            }
        }
        Command::Gradcheck { reduced: _, step } => {
            let mut base = GradCheckConfig {
                tolerance: gradsuite::suite_tolerance(),
                ..GradCheckConfig::default()
            };
            if let Some(h) = step {
                base.step = h;
            }
            let checks = gradsuite::reduced_suite_with(&base)?;
            let mut ok = true;
            for c in &checks {
                let r = &c.report;
                let pass = c.passed();
                ok &= pass;
                println!(
                    "{} {}: max rel {:.2e} (tol {:.0e}), raw {:.2e}, checked {}, skipped {}, unresolved {}",
                    if pass { "PASS" } else { "FAIL" },
                    c.name,
                    r.max_rel_error(),
                    r.tolerance,
                    r.max_raw_error(),
                    r.checked(),
                    r.skipped(),
                    r.unresolved()
                );
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
        Command::Heatmap { metrics, out } => {
            let report = MetricsReport::from_json(&fs::read_to_string(&metrics)?)?;
            emit_heatmap(&report, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
