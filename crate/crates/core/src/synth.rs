//! Seeded synthetic data: calibrated and overconfident prediction sets, a
//! predictable-correctness fixture, Gaussian mixtures, and a toy softmax MLP
//! whose held-out predictions are logged at regular steps.

use crate::dataset::{LabeledDataset, LabeledPoint};
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{self, Activation, Mlp};
use crate::record::{LabelSpace, PredictionRecord, PredictionSet, Split};
use crate::rng::Rng;

/// Confidence assigned to the predicted class by [`gen_predictable_correctness`].
pub const PREDICTABLE_CONFIDENCE: f64 = 0.95;
/// Probability that a [`gen_predictable_correctness`] prediction is correct.
pub const PREDICTABLE_CORRECT_RATE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticKind {
    Calibrated,
    /// Logits sharpened by `scale > 1`.
    Overconfident { scale: f64 },
    PredictableCorrectness { dim: usize, margin: f64 },
    GaussianMixture { dim: usize, separation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub kind: SyntheticKind,
}

/// Output of [`SyntheticSpec::generate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Synthetic {
    Predictions(PredictionSet),
    Labeled(LabeledDataset),
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        match self.kind {
            SyntheticKind::Calibrated => Ok(()),
            SyntheticKind::Overconfident { scale } if scale > 1.0 && scale.is_finite() => Ok(()),
            SyntheticKind::Overconfident { scale } => Err(Error::InvalidArgument(format!(
                "overconfidence scale must exceed 1, got {scale}"
            ))),
            SyntheticKind::PredictableCorrectness { dim, margin } => {
                if self.num_classes != 2 {
                    return Err(Error::InvalidArgument("predictable-correctness sets are binary".into()));
                }
                if dim == 0 || margin.is_nan() || margin <= 0.0 {
                    return Err(Error::InvalidArgument("need dim >= 1 and margin > 0".into()));
                }
                Ok(())
            }
            SyntheticKind::GaussianMixture { dim, separation } => {
                if dim == 0 || separation.is_nan() || separation <= 0.0 || !separation.is_finite() {
                    return Err(Error::InvalidArgument("need dim >= 1 and separation > 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn generate(&self) -> Result<Synthetic> {
        self.validate()?;
        let (n, k, seed) = (self.n, self.num_classes, self.seed);
        Ok(match self.kind {
            SyntheticKind::Calibrated => Synthetic::Predictions(gen_calibrated(n, k, seed)),
            SyntheticKind::Overconfident { scale } => {
                Synthetic::Predictions(gen_overconfident(n, k, seed, scale)?)
            }
            SyntheticKind::PredictableCorrectness { dim, margin } => {
                Synthetic::Predictions(gen_predictable_correctness(n, dim, seed, margin)?)
            }
            SyntheticKind::GaussianMixture { dim, separation } => {
                Synthetic::Labeled(gen_gaussian_mixture(n, k, dim, seed, separation)?)
            }
        })
    }
}

fn sharpened_set(n: usize, k: usize, seed: u64, scale: f64) -> PredictionSet {
    let mut rng = Rng::new(seed);
    let kf = k as f64;
    let records = (0..n)
        .map(|i| {
            let c = 1.0 / kf + (1.0 - 1.0 / kf) * rng.uniform_open();
            let predicted = rng.below(k);
            let label = if rng.uniform() < c {
                predicted
            } else {
                let other = rng.below(k - 1);
                if other >= predicted {
                    other + 1
                } else {
                    other
                }
            };
            let rest = (1.0 - c) / (kf - 1.0);
            let logits: Vec<f64> = (0..k)
                .map(|j| scale * if j == predicted { c.ln() } else { rest.ln() })
                .collect();
            PredictionRecord::new(format!("s{i}"), math::softmax(&logits), label).with_logits(logits)
        })
        .collect();
    PredictionSet::new(LabelSpace::new(k).expect("k >= 2"), records).expect("generated records are valid")
}

/// Perfectly calibrated predictions.
///
/// Per record: confidence `c ~ U(1/K, 1)`, a uniformly chosen predicted class
/// gets `c` and the rest share `1 - c`; the gold label equals the prediction
/// with probability exactly `c`. Logits are `ln(probs)`.
pub fn gen_calibrated(n: usize, k: usize, seed: u64) -> PredictionSet {
    assert!(k >= 2, "need at least 2 classes");
    sharpened_set(n, k, seed, 1.0)
}

/// As [`gen_calibrated`] (same draws for the same seed) but publishes
/// `softmax(scale * ln(p))`; labels still follow the calibrated `p`.
pub fn gen_overconfident(n: usize, k: usize, seed: u64, scale: f64) -> Result<PredictionSet> {
    if !(scale > 1.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "overconfidence scale must exceed 1, got {scale}"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    Ok(sharpened_set(n, k, seed, scale))
}

/// Binary predictions with constant 0.95 confidence whose correctness is
/// linearly decodable from the features: correct records sit at `+margin * u`,
/// wrong ones at `-margin * u`, plus unit Gaussian noise, for a seeded unit
/// direction `u`.
pub fn gen_predictable_correctness(n: usize, dim: usize, seed: u64, margin: f64) -> Result<PredictionSet> {
    if dim == 0 || margin.is_nan() || margin <= 0.0 {
        return Err(Error::InvalidArgument("need dim >= 1 and margin > 0".into()));
    }
    let mut rng = Rng::new(seed);
    let direction = unit_vector(&mut rng, dim);
    let p = PREDICTABLE_CONFIDENCE;
    let records = (0..n)
        .map(|i| {
            let predicted = rng.below(2);
            let correct = rng.bernoulli(PREDICTABLE_CORRECT_RATE);
            let sign = if correct { 1.0 } else { -1.0 };
            let features: Vec<f64> = direction
                .iter()
                .map(|u| sign * margin * u + rng.normal())
                .collect();
            let mut probs = vec![1.0 - p; 2];
            probs[predicted] = p;
            let logits: Vec<f64> = probs.iter().map(|q| q.ln()).collect();
            let label = if correct { predicted } else { 1 - predicted };
            PredictionRecord::new(format!("pc{i}"), probs, label)
                .with_logits(logits)
                .with_features(features)
        })
        .collect();
    PredictionSet::new(LabelSpace::new(2)?, records)
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Class centers placed by seeded rejection sampling in a cube so every pair
/// is at least `separation` apart.
pub fn mixture_centers(k: usize, dim: usize, separation: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut side = separation * (k as f64).max(2.0);
    loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut attempts = 0;
        while centers.len() < k && attempts < 10_000 {
            attempts += 1;
            let c: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-side / 2.0, side / 2.0)).collect();
            if centers.iter().all(|o| distance(o, &c) >= separation) {
                centers.push(c);
            }
        }
        if centers.len() == k {
            return centers;
        }
        side *= 1.5;
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `n` points from `k` unit-variance Gaussian classes with uniform priors.
pub fn gen_gaussian_mixture(n: usize, k: usize, dim: usize, seed: u64, separation: f64) -> Result<LabeledDataset> {
    if k < 2 || dim == 0 {
        return Err(Error::InvalidArgument("need k >= 2 and dim >= 1".into()));
    }
    if separation.is_nan() || separation <= 0.0 || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!("separation must be positive, got {separation}")));
    }
    let mut rng = Rng::new(seed);
    let centers = mixture_centers(k, dim, separation, &mut rng);
    let points = (0..n)
        .map(|i| {
            let label = rng.below(k);
            let features = centers[label].iter().map(|c| c + rng.normal()).collect();
            LabeledPoint {
                id: format!("g{i}"),
                features,
                label,
            }
        })
        .collect();
    LabeledDataset::new(k, dim, points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Full layer sizes `[D, hidden..., K]`.
    pub arch: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Log held-out predictions after every `log_every` updates.
    pub log_every: usize,
    pub seed: u64,
    /// Store last-hidden-layer activations as record features.
    pub log_features: bool,
}

impl ToyConfig {
    pub fn new(arch: Vec<usize>) -> Self {
        Self {
            arch,
            activation: Activation::Relu,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            log_every: 1,
            seed: 0,
            log_features: true,
        }
    }
}

/// Trains a softmax MLP with cross-entropy by mini-batch gradient descent and
/// returns `(step, held-out predictions)` every `log_every` updates.
pub fn train_toy_classifier(
    train: &LabeledDataset,
    heldout: &LabeledDataset,
    cfg: &ToyConfig,
) -> Result<Vec<(u64, PredictionSet)>> {
    let arch = &cfg.arch;
    if arch.len() < 2 || arch[0] != train.dim() || *arch.last().unwrap() != train.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "arch {arch:?} must run from input dim {} to {} classes",
            train.dim(),
            train.num_classes()
        )));
    }
    if heldout.dim() != train.dim() || heldout.num_classes() != train.num_classes() {
        return Err(Error::InvalidArgument("held-out set shape differs from training set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidArgument("epochs, batch size and log interval must be positive".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = train.num_classes();
    let mut net = Mlp::init(arch, cfg.activation, false, &mut Rng::with_stream(cfg.seed, 0))?;
    let mut shuffle = Rng::with_stream(cfg.seed, 1);
    let targets: Vec<Vec<f64>> = train
        .points()
        .iter()
        .map(|p| {
            let mut t = vec![0.0; k];
            t[p.label] = 1.0;
            t
        })
        .collect();
    let space = LabelSpace::new(k)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads = net.zero_gradients();
    let mut step = 0u64;
    let mut checkpoints = Vec::new();
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            grads.clear();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let trace = net.forward_trace(&train.points()[i].features);
                let (_, mut dz) = nn::softmax_cross_entropy(&trace.output, &targets[i]);
                dz.iter_mut().for_each(|d| *d *= scale);
                net.backward(&trace, &dz, &mut grads);
            }
            net.descend(&grads, cfg.learning_rate);
            step += 1;
            if step.is_multiple_of(cfg.log_every as u64) {
                checkpoints.push((step, snapshot(&net, heldout, &space, step, cfg.log_features)?));
            }
        }
    }
    Ok(checkpoints)
}

fn snapshot(net: &Mlp, data: &LabeledDataset, space: &LabelSpace, step: u64, features: bool) -> Result<PredictionSet> {
    let records = data
        .points()
        .iter()
        .map(|p| {
            let trace = net.forward_trace(&p.features);
            let logits = trace.output.clone();
            let mut r = PredictionRecord::new(p.id.clone(), math::softmax(&logits), p.label).with_logits(logits);
            if features {
                r.features = Some(trace.last_hidden().to_vec());
            }
            r.step = Some(step);
            r.split = Some(Split::Test);
            r
        })
        .collect();
    PredictionSet::new(space.clone(), records)
}
