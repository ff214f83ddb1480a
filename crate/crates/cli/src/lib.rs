//! Command-line front end. Every subcommand is a thin wrapper over `calibkit`.
//!
//! Exit status: 0 on success (and `--help`), 1 on usage errors, 2 when the
//! inputs fail to load or validate.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use calibkit::caltask::{build_calibration_dataset, export_calibration_dataset, load_calibration_dataset};
use calibkit::calibrator::{apply_calibrator, train_calibrator, train_main_only, train_multitask, MlpCalibrator, MultiTaskModel};
use calibkit::dataset::{load_labeled_dataset, save_labeled_dataset};
use calibkit::dynamics::{self, classify_states, compute_trajectory, StateThresholds};
use calibkit::metrics::{compute_metrics, reliability_diagram, Binning, DEFAULT_BINS};
use calibkit::posthoc::{self, apply_temperature, ensemble_average, fit_temperature};
use calibkit::record::{load_prediction_set_inferred, write_prediction_set, PredictionSet};
use calibkit::report;
use calibkit::synth::{self, SyntheticKind, SyntheticSpec, ToyConfig};
use calibkit::{Activation, TrainConfig, TrainMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "calibkit", version, about = "Calibration metrics, post-hoc scaling and learned calibrators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print accuracy, confidence, ECE and confidence on correct/wrong predictions.
    Metrics(MetricsArgs),
    /// Write reliability-diagram bins as CSV, optionally as an SVG bar chart.
    Reliability(ReliabilityArgs),
    /// Fit a temperature on a validation log with logits.
    FitTemperature(FitTemperatureArgs),
    /// Divide logits by a temperature and recompute probabilities.
    ApplyTemperature(ApplyTemperatureArgs),
    /// Average the probabilities of several logs over the same ids.
    Ensemble(EnsembleArgs),
    /// Turn a validation log into a correct/wrong calibration dataset.
    BuildCaltask(BuildCaltaskArgs),
    /// Train an MLP correctness predictor on a calibration dataset.
    TrainCalibrator(TrainCalibratorArgs),
    /// Replace each record's confidence with a calibrator's output.
    ApplyCalibrator(ApplyCalibratorArgs),
    /// Train a shared-trunk model on the main task plus the calibration task.
    TrainMultitask(TrainMultitaskArgs),
    /// Compute a metric trajectory over `step_<n>.<ext>` checkpoint logs.
    Dynamics(DynamicsArgs),
    /// Generate seeded synthetic data.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BinningArg {
    EqualMass,
    EqualWidth,
}

impl From<BinningArg> for Binning {
    fn from(b: BinningArg) -> Self {
        match b {
            BinningArg::EqualMass => Binning::EqualMass,
            BinningArg::EqualWidth => Binning::EqualWidth,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfidenceArg {
    /// The record's `confidence` field when present, else max probability.
    Auto,
    /// Always the max probability.
    MaxProb,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct BinArgs {
    /// Number of bins.
    #[arg(long, default_value_t = DEFAULT_BINS, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    bins: usize,
    #[arg(long, value_enum, default_value = "equal-mass")]
    binning: BinningArg,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Prediction log.
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    bins: BinArgs,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Format values as percentages.
    #[arg(long)]
    percent: bool,
    #[arg(long, value_enum, default_value = "auto")]
    confidence: ConfidenceArg,
}

#[derive(Debug, Args)]
struct ReliabilityArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    bins: BinArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw the bins as an SVG bar chart.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long)]
    percent: bool,
    #[arg(long, value_enum, default_value = "auto")]
    confidence: ConfidenceArg,
}

#[derive(Debug, Args)]
struct FitTemperatureArgs {
    /// Validation log; every record needs logits.
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value_t = posthoc::DEFAULT_T_MIN)]
    t_min: f64,
    #[arg(long, default_value_t = posthoc::DEFAULT_T_MAX)]
    t_max: f64,
    /// Stop once the bracket is narrower than this in T.
    #[arg(long, default_value_t = posthoc::DEFAULT_TOL)]
    tol: f64,
}

#[derive(Debug, Args)]
struct ApplyTemperatureArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    t: f64,
    /// Output log; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    /// Member logs, all over the same ids in the same order.
    #[arg(required = true, num_args = 1..)]
    files: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildCaltaskArgs {
    /// Validation log.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Keep every example instead of downsampling the majority class.
    #[arg(long)]
    no_balance: bool,
}

/// Comma-separated hidden-layer widths.
#[derive(Debug, Clone)]
struct Widths(Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    s.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("`{w}` is not a positive width")),
            Ok(v) => Ok(v),
        })
        .collect::<Result<_, _>>()
        .map(Widths)
}

#[derive(Debug, Clone, Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    seed: u64,
    /// Label-smoothing epsilon applied to training targets.
    #[arg(long, default_value_t = 0.0)]
    label_smoothing: f64,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
}

#[derive(Debug, Args)]
struct TrainCalibratorArgs {
    /// Calibration dataset with features.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated hidden widths, e.g. `64` or `128,64`.
    #[arg(long, default_value = "64", value_parser = parse_widths)]
    hidden: Widths,
    #[command(flatten)]
    optim: OptimArgs,
    /// Model destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ApplyCalibratorArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MultitaskMode {
    Iterative,
    Simultaneous,
}

#[derive(Debug, Args)]
struct TrainMultitaskArgs {
    #[arg(long, value_enum, default_value = "simultaneous")]
    mode: MultitaskMode,
    /// Labeled main-task dataset.
    #[arg(long)]
    main: PathBuf,
    /// Calibration dataset whose features are main-task inputs; when
    /// omitted, only the main task is trained.
    #[arg(long)]
    cal: Option<PathBuf>,
    /// Labeled dataset to predict after training.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Prediction log for `--eval`; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Log raw inputs instead of last-hidden activations as `--eval` features,
    /// so the log can feed `build-caltask` for a later multitask run.
    #[arg(long)]
    input_features: bool,
    /// Comma-separated trunk widths.
    #[arg(long, default_value = "64", value_parser = parse_widths)]
    hidden: Widths,
    /// Learning rate for calibration epochs in iterative mode.
    #[arg(long)]
    cal_lr: Option<f64>,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct DynamicsArgs {
    /// Directory of `step_<n>.<ext>` logs.
    #[arg(long)]
    dir: PathBuf,
    #[command(flatten)]
    bins: BinArgs,
    /// Trailing window for the slope fits.
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 0.001)]
    acc_eps: f64,
    #[arg(long, default_value_t = 0.001)]
    conf_eps: f64,
    /// Trajectory CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    percent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum SynthKindArg {
    Calibrated,
    Overconfident,
    PredictableCorrectness,
    GaussianMixture,
    /// Train a toy classifier on a Gaussian mixture and log held-out
    /// predictions per step into `--out-dir`.
    ToyRun,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKindArg,
    /// Number of records (training points for `toy-run`).
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    seed: u64,
    /// Logit sharpening factor for `overconfident`.
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Class offset for `predictable-correctness`.
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    /// Minimum center distance for `gaussian-mixture` and `toy-run`.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Output file (all kinds except `toy-run`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint directory for `toy-run`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `toy-run`: held-out points.
    #[arg(long, default_value_t = 1000)]
    heldout: usize,
    /// `toy-run`: comma-separated hidden widths.
    #[arg(long, default_value = "64", value_parser = parse_widths)]
    hidden: Widths,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// `toy-run`: log every this many updates.
    #[arg(long, default_value_t = 1)]
    log_every: usize,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
    /// `toy-run`: store last-hidden activations as record features.
    #[arg(long)]
    features: bool,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_DATA
        }
    }
}

fn load_set(path: &Path, confidence: ConfidenceArg) -> Result<PredictionSet> {
    let set = load_prediction_set_inferred(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match confidence {
        ConfidenceArg::Auto => set,
        ConfidenceArg::MaxProb => set.without_overrides(),
    })
}

fn load_plain(path: &Path) -> Result<PredictionSet> {
    load_set(path, ConfidenceArg::Auto)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit_set(set: &PredictionSet, dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(p) => calibkit::save_prediction_set(set, p)?,
        None => write_prediction_set(set, &mut *out)?,
    }
    Ok(())
}

fn emit_text(text: &str, dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    match dest {
        Some(p) => write_text(p, text),
        None => Ok(out.write_all(text.as_bytes())?),
    }
}

fn train_config(o: &OptimArgs, mode: TrainMode, cal_lr: Option<f64>) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        cal_learning_rate: cal_lr,
        epochs: o.epochs,
        batch_size: o.batch_size,
        seed: o.seed,
        label_smoothing_epsilon: o.label_smoothing,
        mode,
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Metrics(a) => {
            let set = load_set(&a.input, a.confidence)?;
            let m = compute_metrics(&set, a.bins.bins, a.bins.binning.into())?;
            writeln!(out, "{}", report::metrics_summary(&m, a.percent))?;
            if let Some(p) = &a.csv {
                write_text(p, &report::metrics_csv(&m, a.percent))?;
            }
        }
        Command::Reliability(a) => {
            let set = load_set(&a.input, a.confidence)?;
            let bins = reliability_diagram(&set, a.bins.bins, a.bins.binning.into())?;
            emit_text(&report::reliability_csv(&bins, a.percent), a.out.as_deref(), out)?;
            if let Some(p) = &a.svg {
                write_text(p, &report::reliability_svg(&bins))?;
            }
        }
        Command::FitTemperature(a) => {
            let set = load_plain(&a.val)?;
            let fit = fit_temperature(&set, a.t_min, a.t_max, a.tol)?;
            writeln!(
                out,
                "T={} nll_before={} nll_after={} iterations={}",
                fit.temperature, fit.nll_before, fit.nll_after, fit.iterations
            )?;
        }
        Command::ApplyTemperature(a) => {
            let set = load_plain(&a.input)?;
            emit_set(&apply_temperature(&set, a.t)?, a.out.as_deref(), out)?;
        }
        Command::Ensemble(a) => {
            let sets = a.files.iter().map(|p| load_plain(p)).collect::<Result<Vec<_>>>()?;
            emit_set(&ensemble_average(&sets)?, a.out.as_deref(), out)?;
        }
        Command::BuildCaltask(a) => {
            let set = load_plain(&a.input)?;
            let ds = build_calibration_dataset(&set, a.seed, !a.no_balance)?;
            export_calibration_dataset(&ds, &a.out)?;
            writeln!(out, "positive={} negative={}", ds.positive_count(), ds.negative_count())?;
        }
        Command::TrainCalibrator(a) => {
            let ds = load_calibration_dataset(&a.data)?;
            let d = ds
                .feature_dim()
                .ok_or_else(|| anyhow::anyhow!("calibration dataset has no features"))?;
            let mut dims = vec![d];
            dims.extend(&a.hidden.0);
            dims.push(1);
            let init = MlpCalibrator::init(&dims, a.optim.activation.into(), a.optim.seed)?;
            let cfg = train_config(&a.optim, TrainMode::Extrinsic, None);
            let (model, losses) = train_calibrator(&init, &ds, &cfg)?;
            model.save(&a.out)?;
            writeln!(out, "final_loss={}", losses.last().copied().unwrap_or(f64::NAN))?;
        }
        Command::ApplyCalibrator(a) => {
            let model = MlpCalibrator::load(&a.model)?;
            let set = load_plain(&a.input)?;
            emit_set(&apply_calibrator(&model, &set)?, a.out.as_deref(), out)?;
        }
        Command::TrainMultitask(a) => {
            let main = load_labeled_dataset(&a.main)?;
            let mode = match a.mode {
                MultitaskMode::Iterative => TrainMode::Iterative,
                MultitaskMode::Simultaneous => TrainMode::Simultaneous,
            };
            let init = MultiTaskModel::init(
                main.dim(),
                &a.hidden.0,
                main.num_classes(),
                a.optim.activation.into(),
                a.optim.seed,
            )?;
            let cfg = train_config(&a.optim, mode, a.cal_lr);
            let model = match &a.cal {
                Some(p) => train_multitask(&init, &main, &load_calibration_dataset(p)?, &cfg)?.0,
                None => train_main_only(&init, &main, &cfg)?.0,
            };
            if let Some(p) = &a.model_out {
                model.save(p)?;
            }
            if let Some(p) = &a.eval {
                let eval = load_labeled_dataset(p)?;
                let preds = if a.input_features { model.predict_with_inputs(&eval)? } else { model.predict(&eval)? };
                emit_set(&preds, a.out.as_deref(), out)?;
            }
        }
        Command::Dynamics(a) => {
            let checkpoints = dynamics::load_checkpoints(&a.dir)?;
            let traj = compute_trajectory(&checkpoints, a.bins.bins, a.bins.binning.into())?;
            let th = StateThresholds {
                window: a.window,
                acc_slope_eps: a.acc_eps,
                conf_slope_eps: a.conf_eps,
            };
            let states = classify_states(&traj, &th)?;
            emit_text(&report::trajectory_csv(&traj, Some(&states), a.percent), a.out.as_deref(), out)?;
            if a.out.is_some() {
                let t = states.transition_step.map_or("-".to_string(), |s| s.to_string());
                writeln!(
                    out,
                    "transition_step={t} conf_monotone_fraction={:.6} cerr_neg_monotone_fraction={:.6}",
                    states.conf_monotone_fraction, states.cerr_neg_monotone_fraction
                )?;
            }
        }
        Command::Synth(a) => synth_command(a, out)?,
    }
    Ok(())
}

fn synth_command(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let kind = match a.kind {
        SynthKindArg::Calibrated => SyntheticKind::Calibrated,
        SynthKindArg::Overconfident => SyntheticKind::Overconfident { scale: a.scale },
        SynthKindArg::PredictableCorrectness => SyntheticKind::PredictableCorrectness {
            dim: a.dim,
            margin: a.margin,
        },
        SynthKindArg::GaussianMixture | SynthKindArg::ToyRun => SyntheticKind::GaussianMixture {
            dim: a.dim,
            separation: a.separation,
        },
    };
    if a.kind == SynthKindArg::ToyRun {
        let dir = a
            .out_dir
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("toy-run needs --out-dir"))?;
        // one draw split into training and held-out points
        let all = synth::gen_gaussian_mixture(a.n + a.heldout, a.classes, a.dim, a.seed, a.separation)?;
        let (train, heldout) = all.split_at(a.n);
        let mut arch = vec![a.dim];
        arch.extend(&a.hidden.0);
        arch.push(a.classes);
        let cfg = ToyConfig {
            arch,
            activation: a.activation.into(),
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            log_every: a.log_every,
            seed: a.seed,
            log_features: a.features,
        };
        let checkpoints = synth::train_toy_classifier(&train, &heldout, &cfg)?;
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (step, set) in &checkpoints {
            calibkit::save_prediction_set(set, dir.join(format!("step_{step}.jsonl")))?;
        }
        writeln!(out, "checkpoints={}", checkpoints.len())?;
        return Ok(());
    }
    let spec = SyntheticSpec {
        n: a.n,
        num_classes: a.classes,
        seed: a.seed,
        kind,
    };
    match spec.generate()? {
        synth::Synthetic::Predictions(set) => emit_set(&set, a.out.as_deref(), out)?,
        synth::Synthetic::Labeled(ds) => match &a.out {
            Some(p) => save_labeled_dataset(&ds, p)?,
            None => anyhow::bail!("gaussian-mixture needs --out"),
        },
    }
    Ok(())
}
