//! Labeled feature datasets for the toy main task.
//!
//! File format: a header line then one point per line.
//!
//! ```text
//! {"format":"calibkit-labeled","version":1,"num_classes":3,"dim":2}
//! {"id":"p0","features":[0.1,-2.0],"label":2}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "calibkit-labeled";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPoint {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    dim: usize,
    points: Vec<LabeledPoint>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, dim: usize, points: Vec<LabeledPoint>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::LabelSpace(format!("need at least 2 classes, got {num_classes}")));
        }
        for p in &points {
            if p.features.len() != dim {
                return Err(Error::invalid(
                    &p.id,
                    format!("features has {} entries, dataset dim is {dim}", p.features.len()),
                ));
            }
            if p.label >= num_classes {
                return Err(Error::invalid(&p.id, format!("label {} outside [0, {num_classes})", p.label)));
            }
        }
        Ok(Self {
            num_classes,
            dim,
            points,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Splits into the first `n` points and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.points.len());
        let (a, b) = self.points.split_at(n);
        (
            Self {
                num_classes: self.num_classes,
                dim: self.dim,
                points: a.to_vec(),
            },
            Self {
                num_classes: self.num_classes,
                dim: self.dim,
                points: b.to_vec(),
            },
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for p in &self.points {
            counts[p.label] += 1;
        }
        counts
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    num_classes: usize,
    dim: usize,
}

pub fn save_labeled_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        num_classes: ds.num_classes,
        dim: ds.dim,
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for p in &ds.points {
        writeln!(w, "{}", serde_json::to_string(p).expect("points serialize")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_labeled_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header: Option<Header> = None;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: lineno, message };
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(format!("bad header: {e}")))?;
            if h.format != FORMAT_TAG || h.version != FORMAT_VERSION {
                return Err(parse_err(format!("unsupported format {} v{}", h.format, h.version)));
            }
            header = Some(h);
            continue;
        }
        points.push(serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?);
    }
    let h = header.ok_or_else(|| Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    LabeledDataset::new(h.num_classes, h.dim, points)
}
