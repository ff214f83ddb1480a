//! Calibration-task datasets: one `(input, prediction, correct)` triple per
//! validation record, optionally balanced by downsampling, plus the
//! "True or False" prompt rendering used by text-to-text calibrators.
//!
//! File format: a header line followed by one example per line.
//!
//! ```text
//! {"format":"calibkit-caltask","version":1,"positive_count":2,"negative_count":1}
//! {"id":"a","input_ref":"a","prediction":1,"correct":true,"label":1,"features":[0.1,0.2]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::PredictionSet;
use crate::rng::Rng;

pub const FORMAT_TAG: &str = "calibkit-caltask";
pub const FORMAT_VERSION: u32 = 1;

pub const DEFAULT_TEMPLATE: &str =
    "{input}, the model's prediction is {prediction}, is the prediction True or False? It's {mask}.";
pub const DEFAULT_MASK: &str = "<mask>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationExample {
    pub id: String,
    pub input_ref: String,
    /// The main model's original prediction.
    pub prediction: usize,
    pub correct: bool,
    /// Gold label of the source record, kept so `correct` can be rechecked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

impl CalibrationExample {
    fn check(&self) -> Result<()> {
        if let Some(label) = self.label {
            if self.correct != (self.prediction == label) {
                return Err(Error::invalid(
                    &self.id,
                    format!(
                        "correct={} but prediction {} vs label {label}",
                        self.correct, self.prediction
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationDataset {
    examples: Vec<CalibrationExample>,
    positive_count: usize,
    negative_count: usize,
}

impl CalibrationDataset {
    pub fn new(examples: Vec<CalibrationExample>) -> Result<Self> {
        for e in &examples {
            e.check()?;
        }
        let positive_count = examples.iter().filter(|e| e.correct).count();
        Ok(Self {
            negative_count: examples.len() - positive_count,
            positive_count,
            examples,
        })
    }

    pub fn examples(&self) -> &[CalibrationExample] {
        &self.examples
    }

    pub fn positive_count(&self) -> usize {
        self.positive_count
    }

    pub fn negative_count(&self) -> usize {
        self.negative_count
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples
            .iter()
            .find_map(|e| e.features.as_ref().map(Vec::len))
    }
}

/// Builds the calibration-task dataset from a validation set.
///
/// With `balance`, the majority correctness class is downsampled uniformly
/// without replacement (seeded) to the minority size. Retained examples keep
/// source order.
pub fn build_calibration_dataset(val: &PredictionSet, seed: u64, balance: bool) -> Result<CalibrationDataset> {
    if val.is_empty() {
        return Err(Error::EmptySet);
    }
    let all: Vec<CalibrationExample> = val
        .records()
        .iter()
        .map(|r| {
            let prediction = r.prediction();
            CalibrationExample {
                id: r.id.clone(),
                input_ref: r.id.clone(),
                prediction,
                correct: r.is_correct(),
                label: Some(r.label),
                features: r.features.clone(),
            }
        })
        .collect();
    if !balance {
        return CalibrationDataset::new(all);
    }

    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|&i| all[i].correct);
    if pos.is_empty() {
        return Err(Error::EmptyClass("correct"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("wrong"));
    }
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = Rng::new(seed);
    let mut keep: Vec<usize> = rng
        .sample_indices(majority.len(), minority.len())
        .into_iter()
        .map(|j| majority[j])
        .chain(minority)
        .collect();
    keep.sort_unstable();
    let mut slots: Vec<Option<CalibrationExample>> = all.into_iter().map(Some).collect();
    let examples = keep
        .into_iter()
        .map(|i| slots[i].take().expect("indices are distinct"))
        .collect();
    CalibrationDataset::new(examples)
}

/// Substitutes `{input}`, `{prediction}` and `{mask}` in `template`. Each
/// placeholder must appear exactly once; substituted text is not rescanned.
pub fn render_prompt(input: &str, prediction: &str, template: &str, mask: &str) -> Result<String> {
    let slots = [("{input}", input), ("{prediction}", prediction), ("{mask}", mask)];
    let mut positions = Vec::with_capacity(3);
    for (key, value) in slots {
        let found: Vec<usize> = template.match_indices(key).map(|(i, _)| i).collect();
        match found.as_slice() {
            [at] => positions.push((*at, key.len(), value)),
            [] => return Err(Error::Template(format!("missing placeholder {key}"))),
            _ => return Err(Error::Template(format!("placeholder {key} appears {} times", found.len()))),
        }
    }
    positions.sort_by_key(|p| p.0);
    let mut out = String::with_capacity(template.len() + input.len() + prediction.len() + mask.len());
    let mut cursor = 0;
    for (at, len, value) in positions {
        out.push_str(&template[cursor..at]);
        out.push_str(value);
        cursor = at + len;
    }
    out.push_str(&template[cursor..]);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    positive_count: usize,
    negative_count: usize,
}

pub fn write_calibration_dataset<W: Write>(ds: &CalibrationDataset, mut w: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        positive_count: ds.positive_count,
        negative_count: ds.negative_count,
    };
    let io = |e| Error::io("<writer>", e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for e in &ds.examples {
        writeln!(w, "{}", serde_json::to_string(e).expect("examples serialize")).map_err(io)?;
    }
    Ok(())
}

pub fn read_calibration_dataset<R: BufRead>(reader: R) -> Result<CalibrationDataset> {
    let mut header: Option<Header> = None;
    let mut examples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        let line = line.map_err(|e| parse_err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| parse_err(format!("bad header: {e}")))?;
            if h.format != FORMAT_TAG || h.version != FORMAT_VERSION {
                return Err(parse_err(format!(
                    "unsupported format {} v{}",
                    h.format, h.version
                )));
            }
            header = Some(h);
            continue;
        }
        let e: CalibrationExample =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        examples.push(e);
    }
    let header = header.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let ds = CalibrationDataset::new(examples)?;
    if ds.positive_count != header.positive_count || ds.negative_count != header.negative_count {
        return Err(Error::Mismatch(format!(
            "header declares {}/{} correct/wrong examples, file holds {}/{}",
            header.positive_count, header.negative_count, ds.positive_count, ds.negative_count
        )));
    }
    Ok(ds)
}

pub fn export_calibration_dataset(ds: &CalibrationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_calibration_dataset(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_calibration_dataset(path: impl AsRef<Path>) -> Result<CalibrationDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_calibration_dataset(BufReader::new(file))
}
