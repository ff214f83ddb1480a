//! Learnable calibration.
//!
//! * [`MlpCalibrator`]: an extrinsic feed-forward correctness predictor whose
//!   logistic output replaces the main model's confidence.
//! * [`MultiTaskModel`]: a shared trunk with a main classification head and a
//!   calibration head, trained either alternately (one main epoch, then one
//!   calibration epoch) or simultaneously (summed losses per step).
//!
//! All training is plain mini-batch gradient descent, `w <- w - lr * mean_grad`,
//! with seeded per-epoch shuffling.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::caltask::CalibrationDataset;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self, Activation, Gradients, LineReader, Mlp};
use crate::posthoc::smooth_targets;
use crate::record::{LabelSpace, PredictionRecord, PredictionSet};
use crate::rng::Rng;

pub const DEFAULT_HIDDEN: usize = 64;

const CALIBRATOR_HEADER: &str = "calibkit-calibrator v1";
const MULTITASK_HEADER: &str = "calibkit-multitask v1";

/// Keeps logistic outputs strictly inside (0, 1) after rounding.
fn open_unit(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    #[default]
    Extrinsic,
    Iterative,
    Simultaneous,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Extrinsic => "extrinsic",
            TrainMode::Iterative => "iterative",
            TrainMode::Simultaneous => "simultaneous",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extrinsic" => Ok(TrainMode::Extrinsic),
            "iterative" => Ok(TrainMode::Iterative),
            "simultaneous" => Ok(TrainMode::Simultaneous),
            other => Err(Error::InvalidArgument(format!("unknown training mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate for the calibration epochs of iterative training;
    /// defaults to `learning_rate`. Simultaneous training uses a single rate.
    pub cal_learning_rate: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing_epsilon: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            cal_learning_rate: None,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            label_smoothing_epsilon: 0.0,
            mode: TrainMode::Extrinsic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        if !lr_ok(self.learning_rate) || !self.cal_learning_rate.is_none_or(lr_ok) {
            return Err(Error::InvalidArgument("learning rates must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_epsilon) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing epsilon {} outside [0, 1)",
                self.label_smoothing_epsilon
            )));
        }
        Ok(())
    }

    fn cal_lr(&self) -> f64 {
        self.cal_learning_rate.unwrap_or(self.learning_rate)
    }

    /// Smoothed binary target for a correctness bit.
    fn correctness_target(&self, correct: bool) -> f64 {
        smooth_targets(usize::from(correct), 2, self.label_smoothing_epsilon).expect("validated")[1]
    }

    fn class_target(&self, label: usize, k: usize) -> Vec<f64> {
        smooth_targets(label, k, self.label_smoothing_epsilon).expect("validated")
    }
}

/// Extrinsic correctness predictor: hidden layers then a single logistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCalibrator {
    net: Mlp,
}

/// Default architecture `[d, 64, 1]`.
pub fn default_dims(input_dim: usize) -> Vec<usize> {
    vec![input_dim, DEFAULT_HIDDEN, 1]
}

pub fn init_mlp(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<MlpCalibrator> {
    MlpCalibrator::init(layer_dims, activation, seed)
}

impl MlpCalibrator {
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let net = Mlp::init(layer_dims, activation, false, &mut Rng::new(seed))?;
        Ok(Self { net })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        Self::check_dims(net.dims())?;
        Ok(Self { net })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.last() != Some(&1) {
            return Err(Error::InvalidArgument(format!(
                "calibrator dims must end in 1, got {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        self.net.check_input(features)?;
        Ok(self.net.forward(features)[0])
    }

    /// Predicted probability that the main model's prediction is correct.
    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        Ok(open_unit(math::logistic(self.logit(features)?)))
    }

    /// Mean binary cross-entropy and its parameter gradient over `batch`.
    pub fn loss_and_gradients(&self, batch: &[(&[f64], f64)]) -> (f64, Gradients) {
        let mut grads = self.net.zero_gradients();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (x, t) in batch {
            let trace = self.net.forward_trace(x);
            let (l, dz) = nn::bce_with_logit(trace.output[0], *t);
            loss += l;
            self.net.backward(&trace, &[dz * scale], &mut grads);
        }
        (loss * scale, grads)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CALIBRATOR_HEADER}\n");
        self.net.write_block(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader::new(text);
        lines.expect(CALIBRATOR_HEADER)?;
        let net = Mlp::read_block(&mut lines)?;
        lines.finish()?;
        Self::from_mlp(net).map_err(|e| lines.err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn forward(m: &MlpCalibrator, features: &[f64]) -> Result<f64> {
    m.forward(features)
}

fn feature_rows(ds: &CalibrationDataset, dim: usize) -> Result<Vec<&[f64]>> {
    ds.examples()
        .iter()
        .map(|e| {
            let f = e
                .features
                .as_deref()
                .ok_or_else(|| Error::MissingFeatures(e.id.clone()))?;
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.len(),
                });
            }
            Ok(f)
        })
        .collect()
}

/// Trains an extrinsic calibrator on the calibration dataset.
///
/// Returns the trained copy and one mean per-example loss per epoch, each
/// accumulated from the batch losses seen during that epoch.
pub fn train_calibrator(
    m: &MlpCalibrator,
    ds: &CalibrationDataset,
    cfg: &TrainConfig,
) -> Result<(MlpCalibrator, Vec<f64>)> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Extrinsic {
        return Err(Error::InvalidArgument(format!(
            "train_calibrator needs extrinsic mode, got {}",
            cfg.mode
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs = feature_rows(ds, m.input_dim())?;
    let targets: Vec<f64> = ds
        .examples()
        .iter()
        .map(|e| cfg.correctness_target(e.correct))
        .collect();

    let mut model = m.clone();
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], f64)> = chunk.iter().map(|&i| (xs[i], targets[i])).collect();
            let (loss, grads) = model.loss_and_gradients(&batch);
            epoch_loss += loss * chunk.len() as f64;
            model.net.descend(&grads, cfg.learning_rate);
        }
        trace.push(epoch_loss / ds.len() as f64);
    }
    Ok((model, trace))
}

/// Replaces each record's confidence with the calibrator's output. Probabilities
/// and labels are untouched, so accuracy does not change.
pub fn apply_calibrator(m: &MlpCalibrator, set: &PredictionSet) -> Result<PredictionSet> {
    set.map_records(|r| {
        let f = r
            .features
            .as_deref()
            .ok_or_else(|| Error::MissingFeatures(r.id.clone()))?;
        let mut out = r.clone();
        out.override_confidence = Some(m.forward(f)?);
        Ok(out)
    })
}

/// Shared trunk with a main classification head and a calibration head.
///
/// The calibration head reads the trunk representation concatenated with the
/// main head's softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub trunk: Mlp,
    pub main_head: Mlp,
    pub cal_head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskOutput {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Probability that the main prediction is correct.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskGradients {
    pub trunk: Gradients,
    pub main_head: Gradients,
    pub cal_head: Gradients,
}

impl MultiTaskGradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.trunk.flat();
        v.extend(self.main_head.flat());
        v.extend(self.cal_head.flat());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiTaskLosses {
    /// Mean main-task loss per epoch.
    pub main: Vec<f64>,
    /// Mean calibration-task loss per epoch.
    pub cal: Vec<f64>,
}

impl MultiTaskModel {
    /// `hidden` lists trunk widths; the trunk output width is the last entry.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidArgument("trunk needs at least one hidden layer".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut rng = Rng::new(seed);
        let mut trunk_dims = vec![input_dim];
        trunk_dims.extend_from_slice(hidden);
        let h = *hidden.last().expect("non-empty");
        let trunk = Mlp::init(&trunk_dims, activation, true, &mut rng)?;
        let main_head = Mlp::init(&[h, num_classes], activation, false, &mut rng)?;
        let cal_head = Mlp::init(&[h + num_classes, 1], activation, false, &mut rng)?;
        Self::from_parts(trunk, main_head, cal_head)
    }

    pub fn from_parts(trunk: Mlp, main_head: Mlp, cal_head: Mlp) -> Result<Self> {
        let h = trunk.output_dim();
        let k = main_head.output_dim();
        if main_head.input_dim() != h || cal_head.input_dim() != h + k || cal_head.output_dim() != 1 {
            return Err(Error::InvalidArgument(format!(
                "inconsistent multitask shapes: trunk {:?}, main {:?}, cal {:?}",
                trunk.dims(),
                main_head.dims(),
                cal_head.dims()
            )));
        }
        Ok(Self {
            trunk,
            main_head,
            cal_head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.main_head.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<MultiTaskOutput> {
        self.trunk.check_input(x)?;
        let hidden = self.trunk.forward(x);
        let logits = self.main_head.forward(&hidden);
        let probs = math::softmax(&logits);
        let cal_in: Vec<f64> = hidden.iter().chain(&probs).copied().collect();
        let confidence = open_unit(math::logistic(self.cal_head.forward(&cal_in)[0]));
        Ok(MultiTaskOutput {
            hidden,
            logits,
            probs,
            confidence,
        })
    }

    pub fn zero_gradients(&self) -> MultiTaskGradients {
        MultiTaskGradients {
            trunk: self.trunk.zero_gradients(),
            main_head: self.main_head.zero_gradients(),
            cal_head: self.cal_head.zero_gradients(),
        }
    }

    /// Adds `scale * d(main cross-entropy)/d params` for one example; returns the loss.
    pub fn accumulate_main(&self, x: &[f64], target: &[f64], scale: f64, g: &mut MultiTaskGradients) -> f64 {
        let t_trunk = self.trunk.forward_trace(x);
        let t_main = self.main_head.forward_trace(&t_trunk.output);
        let (loss, mut dz) = nn::softmax_cross_entropy(&t_main.output, target);
        dz.iter_mut().for_each(|d| *d *= scale);
        let dh = self.main_head.backward(&t_main, &dz, &mut g.main_head);
        self.trunk.backward(&t_trunk, &dh, &mut g.trunk);
        loss
    }

    /// Adds `scale * d(calibration BCE)/d params` for one example; returns the
    /// loss. The gradient flows through the softmax input into the main head
    /// and trunk.
    pub fn accumulate_cal(&self, x: &[f64], target: f64, scale: f64, g: &mut MultiTaskGradients) -> f64 {
        let t_trunk = self.trunk.forward_trace(x);
        let hidden = &t_trunk.output;
        let t_main = self.main_head.forward_trace(hidden);
        let probs = math::softmax(&t_main.output);
        let cal_in: Vec<f64> = hidden.iter().chain(&probs).copied().collect();
        let t_cal = self.cal_head.forward_trace(&cal_in);
        let (loss, ds) = nn::bce_with_logit(t_cal.output[0], target);
        let d_in = self.cal_head.backward(&t_cal, &[ds * scale], &mut g.cal_head);
        let (d_hidden, d_probs) = d_in.split_at(hidden.len());
        let dz = nn::softmax_vjp(&probs, d_probs);
        let dh_main = self.main_head.backward(&t_main, &dz, &mut g.main_head);
        let dh: Vec<f64> = d_hidden.iter().zip(&dh_main).map(|(a, b)| a + b).collect();
        self.trunk.backward(&t_trunk, &dh, &mut g.trunk);
        loss
    }

    fn descend(&mut self, g: &MultiTaskGradients, lr: f64) {
        self.trunk.descend(&g.trunk, lr);
        self.main_head.descend(&g.main_head, lr);
        self.cal_head.descend(&g.cal_head, lr);
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = self.trunk.params();
        v.extend(self.main_head.params());
        v.extend(self.cal_head.params());
        v
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let (a, rest) = params.split_at(self.trunk.num_params().min(params.len()));
        let (b, c) = rest.split_at(self.main_head.num_params().min(rest.len()));
        self.trunk.set_params(a)?;
        self.main_head.set_params(b)?;
        self.cal_head.set_params(c)
    }

    /// Predictions on `data`: main-head probabilities and logits, trunk features,
    /// and the calibration head's output as the override confidence.
    pub fn predict(&self, data: &LabeledDataset) -> Result<PredictionSet> {
        self.predict_impl(data, false)
    }

    /// Like [`predict`](Self::predict) but keeps the raw inputs as features,
    /// which is what a calibration dataset for [`train_multitask`] needs.
    pub fn predict_with_inputs(&self, data: &LabeledDataset) -> Result<PredictionSet> {
        self.predict_impl(data, true)
    }

    fn predict_impl(&self, data: &LabeledDataset, keep_inputs: bool) -> Result<PredictionSet> {
        if data.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: data.num_classes(),
            });
        }
        let records = data
            .points()
            .iter()
            .map(|p| {
                let out = self.forward(&p.features)?;
                Ok(PredictionRecord::new(p.id.clone(), out.probs, p.label)
                    .with_logits(out.logits)
                    .with_features(if keep_inputs { p.features.clone() } else { out.hidden })
                    .with_confidence(out.confidence))
            })
            .collect::<Result<Vec<_>>>()?;
        PredictionSet::new(LabelSpace::new(data.num_classes())?, records)
    }

    /// Fraction of `data` whose main-head argmax equals the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut hits = 0usize;
        for p in data.points() {
            let out = self.forward(&p.features)?;
            hits += usize::from(math::argmax(&out.probs) == p.label);
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MULTITASK_HEADER}\n[trunk]\n");
        self.trunk.write_block(&mut out);
        out.push_str("[main_head]\n");
        self.main_head.write_block(&mut out);
        out.push_str("[cal_head]\n");
        self.cal_head.write_block(&mut out);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = LineReader::new(text);
        lines.expect(MULTITASK_HEADER)?;
        lines.expect("[trunk]")?;
        let trunk = Mlp::read_block(&mut lines)?;
        lines.expect("[main_head]")?;
        let main_head = Mlp::read_block(&mut lines)?;
        lines.expect("[cal_head]")?;
        let cal_head = Mlp::read_block(&mut lines)?;
        lines.finish()?;
        Self::from_parts(trunk, main_head, cal_head).map_err(|e| lines.err(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

const MAIN_STREAM: u64 = 0;
const CAL_STREAM: u64 = 1;

struct Prepared<'a> {
    main_x: Vec<&'a [f64]>,
    main_t: Vec<Vec<f64>>,
    cal_x: Vec<&'a [f64]>,
    cal_t: Vec<f64>,
}

fn prepare<'a>(
    model: &MultiTaskModel,
    main_data: &'a LabeledDataset,
    cal_data: Option<&'a CalibrationDataset>,
    cfg: &TrainConfig,
) -> Result<Prepared<'a>> {
    cfg.validate()?;
    if main_data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if main_data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: main_data.dim(),
        });
    }
    if main_data.num_classes() != model.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: model.num_classes(),
            got: main_data.num_classes(),
        });
    }
    let k = model.num_classes();
    let main_x = main_data.points().iter().map(|p| p.features.as_slice()).collect();
    let main_t = main_data
        .points()
        .iter()
        .map(|p| cfg.class_target(p.label, k))
        .collect();
    let (cal_x, cal_t) = match cal_data {
        Some(cd) => {
            if cd.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let xs = feature_rows(cd, model.input_dim())?;
            let ts = cd.examples().iter().map(|e| cfg.correctness_target(e.correct)).collect();
            (xs, ts)
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok(Prepared {
        main_x,
        main_t,
        cal_x,
        cal_t,
    })
}

fn main_epoch(model: &mut MultiTaskModel, data: &Prepared<'_>, order: &[usize], batch: usize, lr: f64) -> f64 {
    let mut total = 0.0;
    let mut g = model.zero_gradients();
    for chunk in order.chunks(batch) {
        g.trunk.clear();
        g.main_head.clear();
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            total += model.accumulate_main(data.main_x[i], &data.main_t[i], scale, &mut g);
        }
        model.trunk.descend(&g.trunk, lr);
        model.main_head.descend(&g.main_head, lr);
    }
    total / order.len() as f64
}

fn cal_epoch(model: &mut MultiTaskModel, data: &Prepared<'_>, order: &[usize], batch: usize, lr: f64) -> f64 {
    let mut total = 0.0;
    let mut g = model.zero_gradients();
    for chunk in order.chunks(batch) {
        g.trunk.clear();
        g.main_head.clear();
        g.cal_head.clear();
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            total += model.accumulate_cal(data.cal_x[i], data.cal_t[i], scale, &mut g);
        }
        model.descend(&g, lr);
    }
    total / order.len() as f64
}

/// Main-task-only training with the same schedule and shuffle stream as the
/// main phase of [`train_multitask`]; the calibration head is left untouched.
pub fn train_main_only(
    model: &MultiTaskModel,
    main_data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(MultiTaskModel, Vec<f64>)> {
    let data = prepare(model, main_data, None, cfg)?;
    let mut model = model.clone();
    let mut rng = Rng::with_stream(cfg.seed, MAIN_STREAM);
    let mut order: Vec<usize> = (0..main_data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        losses.push(main_epoch(&mut model, &data, &order, cfg.batch_size, cfg.learning_rate));
    }
    Ok((model, losses))
}

/// Intrinsic calibration training on the main task plus the calibration task.
///
/// `cal_data` features are main-model inputs (same dimension as `main_data`).
/// * iterative: per epoch pair, one main epoch then one calibration epoch
///   (the latter at `cal_learning_rate`).
/// * simultaneous: each step minimizes mean main loss + mean calibration
///   loss on paired batches; the smaller dataset is cycled so the larger one
///   is covered once per epoch.
pub fn train_multitask(
    model: &MultiTaskModel,
    main_data: &LabeledDataset,
    cal_data: &CalibrationDataset,
    cfg: &TrainConfig,
) -> Result<(MultiTaskModel, MultiTaskLosses)> {
    if cfg.mode == TrainMode::Extrinsic {
        return Err(Error::InvalidArgument(
            "train_multitask needs iterative or simultaneous mode".into(),
        ));
    }
    let data = prepare(model, main_data, Some(cal_data), cfg)?;
    let mut model = model.clone();
    let mut main_rng = Rng::with_stream(cfg.seed, MAIN_STREAM);
    let mut cal_rng = Rng::with_stream(cfg.seed, CAL_STREAM);
    let mut main_order: Vec<usize> = (0..data.main_x.len()).collect();
    let mut cal_order: Vec<usize> = (0..data.cal_x.len()).collect();
    let mut losses = MultiTaskLosses::default();

    for _ in 0..cfg.epochs {
        main_rng.shuffle(&mut main_order);
        cal_rng.shuffle(&mut cal_order);
        match cfg.mode {
            TrainMode::Iterative => {
                losses
                    .main
                    .push(main_epoch(&mut model, &data, &main_order, cfg.batch_size, cfg.learning_rate));
                losses
                    .cal
                    .push(cal_epoch(&mut model, &data, &cal_order, cfg.batch_size, cfg.cal_lr()));
            }
            TrainMode::Simultaneous => {
                let (m, c) = simultaneous_epoch(&mut model, &data, &main_order, &cal_order, cfg);
                losses.main.push(m);
                losses.cal.push(c);
            }
            TrainMode::Extrinsic => unreachable!("rejected above"),
        }
    }
    Ok((model, losses))
}

fn simultaneous_epoch(
    model: &mut MultiTaskModel,
    data: &Prepared<'_>,
    main_order: &[usize],
    cal_order: &[usize],
    cfg: &TrainConfig,
) -> (f64, f64) {
    let n = main_order.len().max(cal_order.len());
    let b = cfg.batch_size;
    let mut g = model.zero_gradients();
    let (mut main_total, mut cal_total) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let len = b.min(n - start);
        g.trunk.clear();
        g.main_head.clear();
        g.cal_head.clear();
        let scale = 1.0 / len as f64;
        for j in start..start + len {
            let mi = main_order[j % main_order.len()];
            main_total += model.accumulate_main(data.main_x[mi], &data.main_t[mi], scale, &mut g);
        }
        for j in start..start + len {
            let ci = cal_order[j % cal_order.len()];
            cal_total += model.accumulate_cal(data.cal_x[ci], data.cal_t[ci], scale, &mut g);
        }
        model.descend(&g, cfg.learning_rate);
        start += len;
    }
    (main_total / n as f64, cal_total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caltask::CalibrationExample;
    use crate::dataset::LabeledPoint;

    #[test]
    fn dims_must_end_in_one() {
        assert!(init_mlp(&[4, 8, 2], Activation::Relu, 0).is_err());
        let m = init_mlp(&[4, 8, 1], Activation::Relu, 0).unwrap();
        assert_eq!(m.net().layers().len(), 2);
        assert_eq!(m, init_mlp(&[4, 8, 1], Activation::Relu, 0).unwrap());
        assert_ne!(m, init_mlp(&[4, 8, 1], Activation::Relu, 1).unwrap());
    }

    #[test]
    fn zero_weights_give_half() {
        let m = MlpCalibrator::from_mlp(Mlp::zeros(&[3, 5, 1], Activation::Relu, false).unwrap()).unwrap();
        assert_eq!(forward(&m, &[1.0, -2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn single_linear_layer() {
        let mut net = Mlp::zeros(&[2, 1], Activation::Relu, false).unwrap();
        net.layers_mut()[0].weights = vec![1.0, 0.0];
        let m = MlpCalibrator::from_mlp(net).unwrap();
        let p = m.forward(&[2.0, 7.0]).unwrap();
        assert!((p - 0.880797).abs() < 1e-6);
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Relu, false).unwrap();
        net.layers_mut()[0].weights = vec![1.0];
        let m = MlpCalibrator::from_mlp(net).unwrap();
        let hi = m.forward(&[1000.0]).unwrap();
        let lo = m.forward(&[-1000.0]).unwrap();
        assert!(hi < 1.0 && hi > 0.5);
        assert!(lo > 0.0 && lo < 0.5);
    }

    fn tiny_caltask() -> CalibrationDataset {
        let examples = (0..20)
            .map(|i| {
                let correct = i % 3 != 0;
                CalibrationExample {
                    id: format!("e{i}"),
                    input_ref: format!("e{i}"),
                    prediction: 0,
                    correct,
                    label: None,
                    features: Some(vec![if correct { 1.0 } else { -1.0 }, i as f64 / 20.0]),
                }
            })
            .collect();
        CalibrationDataset::new(examples).unwrap()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let m = init_mlp(&[2, 4, 1], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            batch_size: 4,
            ..Default::default()
        };
        let (trained, trace) = train_calibrator(&m, &tiny_caltask(), &cfg).unwrap();
        assert_eq!(trained, m);
        assert_eq!(trace.len(), 5);
        assert!(trace.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{trace:?}");
    }

    #[test]
    fn training_rejects_bad_input() {
        let m = init_mlp(&[2, 4, 1], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_calibrator(&m, &CalibrationDataset::default(), &cfg),
            Err(Error::EmptyDataset)
        ));
        let no_features = CalibrationDataset::new(vec![CalibrationExample {
            id: "nf".into(),
            input_ref: "nf".into(),
            prediction: 0,
            correct: true,
            label: None,
            features: None,
        }])
        .unwrap();
        assert!(matches!(train_calibrator(&m, &no_features, &cfg), Err(Error::MissingFeatures(id)) if id == "nf"));
        let iterative = TrainConfig {
            mode: TrainMode::Iterative,
            ..Default::default()
        };
        assert!(train_calibrator(&m, &tiny_caltask(), &iterative).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let m = init_mlp(&[2, 8, 1], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 5,
            ..Default::default()
        };
        let (_, trace) = train_calibrator(&m, &tiny_caltask(), &cfg).unwrap();
        assert!(trace.last().unwrap() < &(trace[0] * 0.5), "{trace:?}");
    }

    #[test]
    fn text_round_trip() {
        let m = init_mlp(&[3, 4, 1], Activation::Relu, 9).unwrap();
        assert_eq!(MlpCalibrator::from_text(&m.to_text()).unwrap(), m);
        assert!(MlpCalibrator::from_text("garbage").is_err());
        let truncated: String = m.to_text().lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(MlpCalibrator::from_text(&truncated).is_err());

        let mt = MultiTaskModel::init(3, &[5], 2, Activation::Tanh, 1).unwrap();
        assert_eq!(MultiTaskModel::from_text(&mt.to_text()).unwrap(), mt);
    }

    #[test]
    fn multitask_outputs_on_simplex() {
        let mt = MultiTaskModel::init(3, &[6, 5], 4, Activation::Relu, 2).unwrap();
        let out = mt.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(out.confidence > 0.0 && out.confidence < 1.0);
        assert_eq!(out.hidden.len(), 5);
    }

    #[test]
    fn multitask_rejects_extrinsic_mode_and_empty_data() {
        let mt = MultiTaskModel::init(2, &[4], 2, Activation::Tanh, 0).unwrap();
        let main = LabeledDataset::new(
            2,
            2,
            vec![LabeledPoint {
                id: "p".into(),
                features: vec![0.0, 1.0],
                label: 1,
            }],
        )
        .unwrap();
        let cfg = TrainConfig::default();
        assert!(train_multitask(&mt, &main, &tiny_caltask(), &cfg).is_err());
        let cfg = TrainConfig {
            mode: TrainMode::Simultaneous,
            ..Default::default()
        };
        assert!(matches!(
            train_multitask(&mt, &main, &CalibrationDataset::default(), &cfg),
            Err(Error::EmptyDataset)
        ));
        let empty = LabeledDataset::new(2, 2, vec![]).unwrap();
        assert!(matches!(
            train_multitask(&mt, &empty, &tiny_caltask(), &cfg),
            Err(Error::EmptyDataset)
        ));
        let wide = LabeledDataset::new(
            2,
            3,
            vec![LabeledPoint {
                id: "p".into(),
                features: vec![0.0, 1.0, 2.0],
                label: 1,
            }],
        )
        .unwrap();
        assert!(matches!(
            train_multitask(&mt, &wide, &tiny_caltask(), &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
