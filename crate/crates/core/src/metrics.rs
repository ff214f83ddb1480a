//! Accuracy, confidence, ECE, positive/negative calibration errors and entropy.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::record::{PredictionRecord, PredictionSet};

pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Binning {
    /// Bins hold (nearly) equal numbers of records.
    #[default]
    EqualMass,
    /// `B` bins of width `1/B` over `[0, 1]`.
    EqualWidth,
}

impl fmt::Display for Binning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Binning::EqualMass => "equal-mass",
            Binning::EqualWidth => "equal-width",
        })
    }
}

impl FromStr for Binning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-mass" | "equal_mass" => Ok(Binning::EqualMass),
            "equal-width" | "equal_width" => Ok(Binning::EqualWidth),
            other => Err(Error::InvalidArgument(format!(
                "unknown binning `{other}` (expected equal-mass or equal-width)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    pub acc: f64,
    pub conf: f64,
    pub ece: f64,
    /// Mean confidence over correct predictions.
    pub conf_pos: Option<f64>,
    /// Mean confidence over wrong predictions.
    pub conf_neg: Option<f64>,
    /// `1 - conf_pos`: under-confidence on correct predictions.
    pub cerr_pos: Option<f64>,
    /// `conf_neg`: over-confidence on wrong predictions.
    pub cerr_neg: Option<f64>,
    /// Mean predictive entropy of `probs`, in nats.
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_conf: f64,
    pub accuracy: f64,
}

impl ReliabilityBin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_conf).abs()
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    math::entropy(probs)
}

pub fn compute_metrics(set: &PredictionSet, bins: usize, binning: Binning) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let n = set.len();
    let mut correct = 0usize;
    let mut conf_sum = 0.0;
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut entropy_sum = 0.0;
    for r in set.records() {
        let c = r.confidence();
        conf_sum += c;
        if r.is_correct() {
            correct += 1;
            pos_sum += c;
        } else {
            neg_sum += c;
        }
        entropy_sum += math::entropy(&r.probs);
    }
    let wrong = n - correct;
    let conf_pos = (correct > 0).then(|| pos_sum / correct as f64);
    let conf_neg = (wrong > 0).then(|| neg_sum / wrong as f64);
    Ok(MetricsReport {
        n,
        acc: correct as f64 / n as f64,
        conf: conf_sum / n as f64,
        ece: ece(set, bins, binning)?,
        conf_pos,
        conf_neg,
        cerr_pos: conf_pos.map(|c| 1.0 - c),
        cerr_neg: conf_neg,
        mean_entropy: entropy_sum / n as f64,
    })
}

pub fn ece(set: &PredictionSet, bins: usize, binning: Binning) -> Result<f64> {
    let diagram = reliability_diagram(set, bins, binning)?;
    Ok(ece_from_bins(&diagram, set.len()))
}

/// `sum_b (count_b / n) |accuracy_b - mean_conf_b|`, summed in bin order.
pub fn ece_from_bins(bins: &[ReliabilityBin], n: usize) -> f64 {
    bins.iter()
        .map(|b| (b.count as f64 / n as f64) * b.gap())
        .sum()
}

pub fn reliability_diagram(
    set: &PredictionSet,
    bins: usize,
    binning: Binning,
) -> Result<Vec<ReliabilityBin>> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let records = set.records();
    Ok(match binning {
        Binning::EqualMass => equal_mass(records, bins),
        Binning::EqualWidth => equal_width(records, bins),
    })
}

fn summarize(members: impl Iterator<Item = (f64, bool)>, lo: f64, hi: f64) -> ReliabilityBin {
    let mut count = 0usize;
    let mut conf_sum = 0.0;
    let mut hits = 0usize;
    for (c, ok) in members {
        count += 1;
        conf_sum += c;
        hits += ok as usize;
    }
    ReliabilityBin {
        lo,
        hi,
        count,
        mean_conf: conf_sum / count as f64,
        accuracy: hits as f64 / count as f64,
    }
}

fn equal_mass(records: &[PredictionRecord], bins: usize) -> Vec<ReliabilityBin> {
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .map(|r| (r.confidence(), r.is_correct()))
        .collect();
    // stable: ties keep input order
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = scored.len();
    let groups = bins.min(n);
    let base = n / groups;
    let extra = n % groups;
    let mut out = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let size = base + usize::from(g < extra);
        let chunk = &scored[start..start + size];
        out.push(summarize(
            chunk.iter().copied(),
            chunk[0].0,
            chunk[size - 1].0,
        ));
        start += size;
    }
    out
}

/// Bin index for confidence `c`: `[0, 1/B]`, then `(i/B, (i+1)/B]`.
fn width_index(c: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut idx = ((c * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx + 1 < bins && c > (idx + 1) as f64 / b {
        idx += 1;
    }
    while idx > 0 && c <= idx as f64 / b {
        idx -= 1;
    }
    idx
}

fn equal_width(records: &[PredictionRecord], bins: usize) -> Vec<ReliabilityBin> {
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
    for r in records {
        let c = r.confidence();
        members[width_index(c, bins)].push((c, r.is_correct()));
    }
    let b = bins as f64;
    members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(i, m)| summarize(m.into_iter(), i as f64 / b, (i + 1) as f64 / b))
        .collect()
}
