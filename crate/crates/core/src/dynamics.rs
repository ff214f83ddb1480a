//! Metric trajectories over training checkpoints and under-/over-fitted state
//! labelling.
//!
//! A point is over-fitted when, over its trailing window, accuracy is flat
//! (least-squares slope at most `acc_slope_eps` per checkpoint) while
//! confidence still rises (slope above `conf_slope_eps`); under-fitted while
//! accuracy is still rising.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, Binning};
use crate::record::{load_prediction_set_inferred, PredictionSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub acc: f64,
    pub conf: f64,
    pub ece: f64,
    pub cerr_pos: Option<f64>,
    pub cerr_neg: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitState {
    UnderFitted,
    OverFitted,
    Indeterminate,
}

impl fmt::Display for FitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitState::UnderFitted => "under_fitted",
            FitState::OverFitted => "over_fitted",
            FitState::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateReport {
    pub labels: Vec<FitState>,
    /// First step labelled over-fitted.
    pub transition_step: Option<u64>,
    /// Fraction of consecutive pairs with non-decreasing confidence.
    pub conf_monotone_fraction: f64,
    /// Same, over the points where `cerr_neg` is defined.
    pub cerr_neg_monotone_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateThresholds {
    pub window: usize,
    pub acc_slope_eps: f64,
    pub conf_slope_eps: f64,
}

impl Default for StateThresholds {
    fn default() -> Self {
        Self {
            window: 5,
            acc_slope_eps: 0.001,
            conf_slope_eps: 0.001,
        }
    }
}

pub fn compute_trajectory(
    checkpoints: &[(u64, PredictionSet)],
    bins: usize,
    binning: Binning,
) -> Result<Vec<TrajectoryPoint>> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("no checkpoints".into()));
    }
    for w in checkpoints.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::InvalidArgument(format!(
                "checkpoint steps must strictly increase: {} follows {}",
                w[1].0, w[0].0
            )));
        }
    }
    checkpoints
        .iter()
        .map(|(step, set)| {
            let m = compute_metrics(set, bins, binning).map_err(|e| match e {
                Error::EmptySet => Error::InvalidArgument(format!("checkpoint at step {step}: empty prediction set")),
                other => other,
            })?;
            Ok(TrajectoryPoint {
                step: *step,
                acc: m.acc,
                conf: m.conf,
                ece: m.ece,
                cerr_pos: m.cerr_pos,
                cerr_neg: m.cerr_neg,
            })
        })
        .collect()
}

/// Least-squares slope of `ys` against `0, 1, ..., n-1`.
fn index_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

fn monotone_fraction(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let rising = values.windows(2).filter(|w| w[1] >= w[0]).count();
    rising as f64 / (values.len() - 1) as f64
}

pub fn classify_states(traj: &[TrajectoryPoint], th: &StateThresholds) -> Result<StateReport> {
    if th.window < 2 {
        return Err(Error::InvalidArgument(format!("window must be at least 2, got {}", th.window)));
    }
    if traj.len() < th.window {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {} points, window needs {}",
            traj.len(),
            th.window
        )));
    }
    let acc: Vec<f64> = traj.iter().map(|p| p.acc).collect();
    let conf: Vec<f64> = traj.iter().map(|p| p.conf).collect();
    let mut labels = Vec::with_capacity(traj.len());
    for end in th.window..=traj.len() {
        let range = end - th.window..end;
        let acc_slope = index_slope(&acc[range.clone()]);
        let conf_slope = index_slope(&conf[range]);
        labels.push(if acc_slope > th.acc_slope_eps {
            FitState::UnderFitted
        } else if conf_slope > th.conf_slope_eps {
            FitState::OverFitted
        } else {
            FitState::Indeterminate
        });
    }
    let first = labels[0];
    let mut all = vec![first; th.window - 1];
    all.extend(labels);

    let transition_step = all
        .iter()
        .position(|s| *s == FitState::OverFitted)
        .map(|i| traj[i].step);
    let cerr_neg: Vec<f64> = traj.iter().filter_map(|p| p.cerr_neg).collect();
    Ok(StateReport {
        labels: all,
        transition_step,
        conf_monotone_fraction: monotone_fraction(&conf),
        cerr_neg_monotone_fraction: monotone_fraction(&cerr_neg),
    })
}

/// Parses `step_<n>.<ext>` into `n`.
pub fn checkpoint_step(file_name: &str) -> Option<u64> {
    let rest = file_name.strip_prefix("step_")?;
    let digits = rest.split('.').next()?;
    if digits.is_empty() || !rest[digits.len()..].starts_with('.') {
        return None;
    }
    digits.parse().ok()
}

/// Loads every `step_<n>.<ext>` log in `dir`, ordered by step.
pub fn load_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<(u64, PredictionSet)>> {
    let dir = dir.as_ref();
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(step) = name.to_str().and_then(checkpoint_step) {
            found.push((step, entry.path()));
        }
    }
    found.sort_by_key(|(s, _)| *s);
    if let Some(w) = found.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidArgument(format!(
            "two checkpoint files for step {}: {} and {}",
            w[0].0,
            w[0].1.display(),
            w[1].1.display()
        )));
    }
    found
        .into_iter()
        .map(|(s, p)| Ok((s, load_prediction_set_inferred(&p)?)))
        .collect()
}
