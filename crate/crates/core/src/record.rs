//! Prediction records, prediction sets and the line-delimited log format.
//!
//! A log holds one JSON object per line:
//!
//! ```text
//! {"id":"a1","probs":[0.7,0.3],"label":0,"logits":[0.85,0.0],"features":[..],"confidence":0.42,"step":100,"split":"test"}
//! ```
//!
//! Only `id`, `probs` and `label` are required. Unknown keys are rejected.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Tolerance on `|sum(probs) - 1|`.
pub const PROB_SUM_TOL: f64 = 1e-6;
/// Component-wise tolerance between `softmax(logits)` and `probs`.
pub const SOFTMAX_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::LabelSpace(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            class_names: None,
        })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut space = Self::new(names.len())?;
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::LabelSpace(format!("duplicate class name `{name}`")));
            }
        }
        space.class_names = Some(names);
        Ok(space)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Display name for class `index`: the configured name, or the index itself.
    pub fn name_of(&self, index: usize) -> String {
        match &self.class_names {
            Some(names) => names[index].clone(),
            None => index.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    #[default]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One example's predicted distribution and gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub id: String,
    pub probs: Vec<f64>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    /// Confidence supplied by a learned calibrator; takes precedence over `max(probs)`.
    #[serde(
        rename = "confidence",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub override_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, probs: Vec<f64>, label: usize) -> Self {
        Self {
            id: id.into(),
            probs,
            label,
            logits: None,
            features: None,
            override_confidence: None,
            step: None,
            split: None,
        }
    }

    pub fn with_logits(mut self, logits: Vec<f64>) -> Self {
        self.logits = Some(logits);
        self
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.override_confidence = Some(confidence);
        self
    }

    /// Checks the per-record invariants against a class count `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let id = self.id.as_str();
        if self.probs.len() != k {
            return Err(Error::invalid(
                id,
                format!("probs has {} entries, label space has {k}", self.probs.len()),
            ));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(id, "probs must be finite and non-negative"));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(
                id,
                format!("probs sum to {total}, expected 1 within {PROB_SUM_TOL}"),
            ));
        }
        if self.label >= k {
            return Err(Error::invalid(
                id,
                format!("label {} outside [0, {k})", self.label),
            ));
        }
        if let Some(logits) = &self.logits {
            if logits.len() != k {
                return Err(Error::invalid(
                    id,
                    format!("logits has {} entries, label space has {k}", logits.len()),
                ));
            }
            if logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::invalid(id, "logits must be finite"));
            }
            let sm = math::softmax(logits);
            if let Some((i, (a, b))) = sm
                .iter()
                .zip(&self.probs)
                .enumerate()
                .find(|(_, (a, b))| (*a - *b).abs() > SOFTMAX_TOL)
            {
                return Err(Error::invalid(
                    id,
                    format!("softmax(logits)[{i}] = {a} disagrees with probs[{i}] = {b}"),
                ));
            }
        }
        if let Some(features) = &self.features {
            if features.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(id, "features must be finite"));
            }
        }
        if let Some(c) = self.override_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(
                    id,
                    format!("confidence {c} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }

    /// Override confidence if present, otherwise the maximum predicted probability.
    pub fn confidence(&self) -> f64 {
        self.override_confidence
            .unwrap_or_else(|| math::max(&self.probs))
    }

    /// Predicted class (argmax, lowest index on ties).
    pub fn prediction(&self) -> usize {
        math::argmax(&self.probs)
    }

    pub fn is_correct(&self) -> bool {
        self.prediction() == self.label
    }
}

pub fn record_confidence(r: &PredictionRecord) -> f64 {
    r.confidence()
}

pub fn record_correct(r: &PredictionRecord) -> bool {
    r.is_correct()
}

/// A validated, ordered collection of records over one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    label_space: LabelSpace,
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(label_space: LabelSpace, records: Vec<PredictionRecord>) -> Result<Self> {
        let k = label_space.num_classes();
        let mut ids = HashSet::with_capacity(records.len());
        let mut feature_dim = None;
        for r in &records {
            r.validate(k)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if let Some(f) = &r.features {
                match feature_dim {
                    None => feature_dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(Error::invalid(
                            &r.id,
                            format!("features has {} entries, earlier records have {d}", f.len()),
                        ))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self {
            label_space,
            records,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.num_classes()
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<PredictionRecord> {
        self.records
    }

    /// Feature dimension shared by records that carry features.
    pub fn feature_dim(&self) -> Option<usize> {
        self.records
            .iter()
            .find_map(|r| r.features.as_ref().map(Vec::len))
    }

    /// Records at `indices`, in the order given.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records.get(i).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!("index {i} out of range for {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.label_space.clone(), records)
    }

    /// Copy with every override confidence removed, so metrics fall back to `max(probs)`.
    pub fn without_overrides(&self) -> Self {
        let records = self
            .records
            .iter()
            .cloned()
            .map(|mut r| {
                r.override_confidence = None;
                r
            })
            .collect();
        Self {
            label_space: self.label_space.clone(),
            records,
        }
    }

    /// Applies `f` to each record and revalidates the result.
    pub fn map_records<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&PredictionRecord) -> Result<PredictionRecord>,
    {
        let records = self.records.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(self.label_space.clone(), records)
    }
}

/// Parses a log from any reader.
pub fn read_prediction_set<R: BufRead>(reader: R, label_space: LabelSpace) -> Result<PredictionSet> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    PredictionSet::new(label_space, records)
}

pub fn load_prediction_set(path: impl AsRef<Path>, label_space: LabelSpace) -> Result<PredictionSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_prediction_set(BufReader::new(file), label_space)
}

/// Loads a log, taking the class count from the first record. An empty log
/// yields an empty binary set.
pub fn load_prediction_set_inferred(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut k = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        k = Some(r.probs.len());
        break;
    }
    let space = LabelSpace::new(k.unwrap_or(2))?;
    load_prediction_set(path, space)
}

pub fn write_prediction_set<W: Write>(set: &PredictionSet, mut writer: W) -> Result<()> {
    for r in set.records() {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(writer, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_prediction_set(set: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_prediction_set(set, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}
