//! Unlearnable calibration: temperature scaling, label smoothing targets and
//! deep-ensemble averaging.

use crate::error::{Error, Result};
use crate::math;
use crate::record::{PredictionRecord, PredictionSet};

pub const DEFAULT_T_MIN: f64 = 0.05;
pub const DEFAULT_T_MAX: f64 = 20.0;
pub const DEFAULT_TOL: f64 = 1e-4;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// Mean NLL at `T = 1`.
    pub nll_before: f64,
    /// Mean NLL at the fitted temperature.
    pub nll_after: f64,
    pub iterations: usize,
}

fn logits_of(r: &PredictionRecord) -> Result<&[f64]> {
    r.logits
        .as_deref()
        .ok_or_else(|| Error::MissingLogits(r.id.clone()))
}

/// Mean negative log-likelihood of `softmax(logits / t)` at the gold labels.
pub fn temperature_nll(set: &PredictionSet, t: f64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut total = 0.0;
    let mut scaled = Vec::with_capacity(set.num_classes());
    for r in set.records() {
        let z = logits_of(r)?;
        scaled.clear();
        scaled.extend(z.iter().map(|v| v / t));
        total += math::logsumexp(&scaled) - scaled[r.label];
    }
    Ok(total / set.len() as f64)
}

/// Fits a single temperature by golden-section search over `ln T` in
/// `[t_min, t_max]`, stopping once the bracket is narrower than `tol` in `T`.
///
/// When `T = 1` lies in the interval and beats the search result, `T = 1` is
/// returned, so `nll_after <= nll_before` whenever the interval allows it.
pub fn fit_temperature(val: &PredictionSet, t_min: f64, t_max: f64, tol: f64) -> Result<TemperatureFit> {
    if val.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(r) = val.records().iter().find(|r| r.logits.is_none()) {
        return Err(Error::MissingLogits(r.id.clone()));
    }
    if !(t_min > 0.0 && t_min <= t_max && t_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "temperature interval [{t_min}, {t_max}] must satisfy 0 < t_min <= t_max"
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }

    let nll = |t: f64| temperature_nll(val, t);
    let nll_before = nll(1.0)?;

    let (mut a, mut b) = (t_min.ln(), t_max.ln());
    let mut iterations = 0;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = nll(c.exp())?;
    let mut fd = nll(d.exp())?;
    while b.exp() - a.exp() > tol {
        iterations += 1;
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = nll(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = nll(d.exp())?;
        }
    }
    let mut temperature = (0.5 * (a + b)).exp().clamp(t_min, t_max);
    let mut nll_after = nll(temperature)?;
    if (t_min..=t_max).contains(&1.0) && nll_before < nll_after {
        temperature = 1.0;
        nll_after = nll_before;
    }
    Ok(TemperatureFit {
        temperature,
        nll_before,
        nll_after,
        iterations,
    })
}

/// Rescales every record to `probs = softmax(logits / t)`.
///
/// The stored logits are divided by `t` as well, so the output still
/// satisfies `softmax(logits) == probs` and reloads cleanly.
pub fn apply_temperature(set: &PredictionSet, t: f64) -> Result<PredictionSet> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidTemperature(t));
    }
    set.map_records(|r| {
        let z = logits_of(r)?;
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let mut out = r.clone();
        out.probs = math::softmax(&scaled);
        out.logits = Some(scaled);
        Ok(out)
    })
}

/// Label-smoothed target: `1 - eps + eps/K` at `label`, `eps/K` elsewhere.
pub fn smooth_targets(label: usize, k: usize, epsilon: f64) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    if label >= k {
        return Err(Error::InvalidArgument(format!("label {label} outside [0, {k})")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing epsilon {epsilon} outside [0, 1)"
        )));
    }
    let off = epsilon / k as f64;
    let mut t = vec![off; k];
    t[label] = 1.0 - epsilon + off;
    Ok(t)
}

/// Per-record arithmetic mean of the members' probability vectors.
///
/// Logits, features and override confidences are dropped; ids, labels,
/// steps and splits come from the first member.
pub fn ensemble_average(sets: &[PredictionSet]) -> Result<PredictionSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
    let k = first.num_classes();
    for (m, s) in sets.iter().enumerate().skip(1) {
        if s.num_classes() != k {
            return Err(Error::Mismatch(format!(
                "member {m} has {} classes, member 0 has {k}",
                s.num_classes()
            )));
        }
        if s.len() != first.len() {
            return Err(Error::Mismatch(format!(
                "member {m} has {} records, member 0 has {}",
                s.len(),
                first.len()
            )));
        }
        for (a, b) in first.records().iter().zip(s.records()) {
            if a.id != b.id {
                return Err(Error::Mismatch(format!(
                    "member {m}: id `{}` where member 0 has `{}`",
                    b.id, a.id
                )));
            }
            if a.label != b.label {
                return Err(Error::Mismatch(format!(
                    "member {m}: record `{}` has label {} but member 0 has {}",
                    a.id, b.label, a.label
                )));
            }
        }
    }
    let m = sets.len() as f64;
    let records = (0..first.len())
        .map(|i| {
            let base = &first.records()[i];
            let mut probs = vec![0.0; k];
            for s in sets {
                for (acc, p) in probs.iter_mut().zip(&s.records()[i].probs) {
                    *acc += p;
                }
            }
            probs.iter_mut().for_each(|p| *p /= m);
            PredictionRecord {
                id: base.id.clone(),
                probs,
                label: base.label,
                logits: None,
                features: None,
                override_confidence: None,
                step: base.step,
                split: base.split,
            }
        })
        .collect();
    PredictionSet::new(first.label_space().clone(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::LabelSpace;

    fn logit_set(rows: &[(&[f64], usize)]) -> PredictionSet {
        let k = rows[0].0.len();
        let records = rows
            .iter()
            .enumerate()
            .map(|(i, (z, y))| {
                PredictionRecord::new(format!("r{i}"), math::softmax(z), *y).with_logits(z.to_vec())
            })
            .collect();
        PredictionSet::new(LabelSpace::new(k).unwrap(), records).unwrap()
    }

    #[test]
    fn identity_temperature() {
        let set = logit_set(&[(&[2.0, 0.0], 0), (&[0.3, 1.1], 0), (&[-1.0, 4.0], 1)]);
        let out = apply_temperature(&set, 1.0).unwrap();
        for (a, b) in set.records().iter().zip(out.records()) {
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn closed_form_softmax_at_t2() {
        let set = logit_set(&[(&[2.0, 0.0], 0)]);
        let out = apply_temperature(&set, 2.0).unwrap();
        let e = std::f64::consts::E;
        let p = &out.records()[0].probs;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731059).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn bad_temperature_and_missing_logits() {
        let set = logit_set(&[(&[2.0, 0.0], 0)]);
        assert!(matches!(apply_temperature(&set, 0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(apply_temperature(&set, -1.0), Err(Error::InvalidTemperature(_))));
        let bare = PredictionSet::new(
            LabelSpace::new(2).unwrap(),
            vec![PredictionRecord::new("no-logits", vec![0.5, 0.5], 0)],
        )
        .unwrap();
        match apply_temperature(&bare, 2.0) {
            Err(Error::MissingLogits(id)) => assert_eq!(id, "no-logits"),
            other => panic!("{other:?}"),
        }
        match fit_temperature(&bare, 0.05, 20.0, 1e-4) {
            Err(Error::MissingLogits(id)) => assert_eq!(id, "no-logits"),
            other => panic!("{other:?}"),
        }
        let empty = PredictionSet::new(LabelSpace::new(2).unwrap(), vec![]).unwrap();
        assert!(matches!(fit_temperature(&empty, 0.05, 20.0, 1e-4), Err(Error::EmptySet)));
    }

    #[test]
    fn degenerate_interval() {
        let set = logit_set(&[(&[2.0, 0.0], 0), (&[0.3, 1.1], 0)]);
        let fit = fit_temperature(&set, 1.0, 1.0, 1e-4).unwrap();
        assert_eq!(fit.temperature, 1.0);
        assert_eq!(fit.nll_after, fit.nll_before);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn argmax_preserved_across_temperatures() {
        let set = logit_set(&[
            (&[2.0, 0.0, -1.0], 0),
            (&[0.3, 1.1, 1.0], 2),
            (&[-1.0, 4.0, 3.9], 1),
        ]);
        for t in [0.1, 1.0, 10.0] {
            let out = apply_temperature(&set, t).unwrap();
            for (a, b) in set.records().iter().zip(out.records()) {
                assert_eq!(a.prediction(), b.prediction());
                assert_eq!(a.is_correct(), b.is_correct());
            }
        }
    }

    #[test]
    fn smoothing_values() {
        assert_eq!(smooth_targets(0, 2, 0.0).unwrap(), vec![1.0, 0.0]);
        let t = smooth_targets(1, 4, 0.1).unwrap();
        for (a, b) in t.iter().zip([0.025, 0.925, 0.025, 0.025]) {
            assert!((a - b).abs() < 1e-12);
        }
        let t = smooth_targets(0, 2, 0.2).unwrap();
        assert!((t[0] - 0.9).abs() < 1e-12 && (t[1] - 0.1).abs() < 1e-12);
        assert!(smooth_targets(2, 2, 0.1).is_err());
        assert!(smooth_targets(0, 2, 1.0).is_err());
        assert!(smooth_targets(0, 2, -0.1).is_err());
    }

    #[test]
    fn smoothing_keeps_argmax() {
        for eps in [0.0, 0.1, 0.5, 0.9] {
            for k in 2..6 {
                for label in 0..k {
                    let t = smooth_targets(label, k, eps).unwrap();
                    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert_eq!(math::argmax(&t), label);
                }
            }
        }
    }

    #[test]
    fn ensemble_cases() {
        let a = PredictionSet::new(
            LabelSpace::new(2).unwrap(),
            vec![PredictionRecord::new("x", vec![1.0, 0.0], 0)],
        )
        .unwrap();
        let b = PredictionSet::new(
            LabelSpace::new(2).unwrap(),
            vec![PredictionRecord::new("x", vec![0.0, 1.0], 0)],
        )
        .unwrap();
        let single = ensemble_average(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.records()[0].probs, a.records()[0].probs);
        let avg = ensemble_average(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(avg.records()[0].probs, vec![0.5, 0.5]);
        assert!(ensemble_average(&[]).is_err());

        let relabeled = PredictionSet::new(
            LabelSpace::new(2).unwrap(),
            vec![PredictionRecord::new("x", vec![0.0, 1.0], 1)],
        )
        .unwrap();
        assert!(matches!(ensemble_average(&[a.clone(), relabeled]), Err(Error::Mismatch(_))));
        let renamed = PredictionSet::new(
            LabelSpace::new(2).unwrap(),
            vec![PredictionRecord::new("y", vec![0.0, 1.0], 0)],
        )
        .unwrap();
        assert!(matches!(ensemble_average(&[a, renamed]), Err(Error::Mismatch(_))));
    }
}
