//! Observational samples `(y, x, a)`, sample splitting and CSV I/O.
//!
//! The on-disk format is a UTF-8 CSV with header `y,a,x1,...,xd`. Values are
//! written with 17 significant digits so that a write/read cycle reproduces
//! every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Arm {
    Control = 0,
    Treated = 1,
}

impl Arm {
    pub fn from_indicator(a: u8) -> Option<Arm> {
        match a {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    #[inline]
    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treated => 1.0,
        }
    }

    #[inline]
    pub fn is_treated(self) -> bool {
        self == Arm::Treated
    }
}

impl From<Arm> for u8 {
    fn from(a: Arm) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Arm {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        Arm::from_indicator(v).ok_or_else(|| format!("treatment must be 0 or 1, got {v}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: f64,
    pub x: Vec<f64>,
    pub a: Arm,
}

impl Sample {
    /// Builds a sample, rejecting non-finite outcome or covariates.
    pub fn new(y: f64, x: Vec<f64>, a: Arm) -> Result<Self> {
        if !y.is_finite() {
            return Err(Error::NonFinite("outcome".into()));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariate x{}", j + 1)));
        }
        Ok(Sample { y, x, a })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    d: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(d: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.x.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "dataset sample",
                    expected: d,
                    got: s.x.len(),
                });
            }
        }
        Ok(Dataset { d, samples })
    }

    pub fn empty(d: usize) -> Self {
        Dataset { d, samples: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    /// Copies the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            d: self.d,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn arm(&self, arm: Arm) -> Dataset {
        Dataset {
            d: self.d,
            samples: self.samples.iter().filter(|s| s.a == arm).cloned().collect(),
        }
    }

    pub fn count_arm(&self, arm: Arm) -> usize {
        self.samples.iter().filter(|s| s.a == arm).count()
    }

    pub fn outcomes(&self, arm: Arm) -> Vec<f64> {
        self.samples.iter().filter(|s| s.a == arm).map(|s| s.y).collect()
    }
}

/// Index sets for Algorithm-style sample splitting: nuisances are fitted on
/// `nuisance_idx`, the comparator on `fit_idx`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPair {
    pub nuisance_idx: Vec<usize>,
    pub fit_idx: Vec<usize>,
}

/// Splits `0..N` into two halves; the nuisance half gets `ceil(N/2)` indices.
/// With `shuffle`, a permutation seeded by `seed` is applied first.
pub fn split_half(data: &Dataset, seed: u64, shuffle: bool) -> Result<SplitPair> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::rng_from(seed, &[0x5117]));
    }
    let cut = n.div_ceil(2);
    let fit_idx = order.split_off(cut);
    Ok(SplitPair { nuisance_idx: order, fit_idx })
}

/// Column names used by [`read_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub outcome: String,
    pub treatment: String,
    /// Covariate columns in order; `None` takes every remaining column in
    /// header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            outcome: "y".into(),
            treatment: "a".into(),
            covariates: None,
        }
    }
}

pub fn read_csv(path: impl AsRef<Path>, schema: &ColumnSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(&text, schema, path)
}

fn parse_csv(text: &str, schema: &ColumnSpec, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::EmptyFile(path.to_path_buf()))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |col: &str| {
        names.iter().position(|n| *n == col).ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: col.to_string(),
        })
    };
    let yi = find(&schema.outcome)?;
    let ai = find(&schema.treatment)?;
    let xi: Vec<usize> = match &schema.covariates {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..names.len()).filter(|&j| j != yi && j != ai).collect(),
    };
    if xi.is_empty() {
        return Err(Error::MissingColumn {
            path: path.to_path_buf(),
            column: "<covariate>".into(),
        });
    }

    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let row = lineno + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != names.len() {
            return Err(parse_err(
                row,
                format!("expected {} fields, found {}", names.len(), cells.len()),
            ));
        }
        let num = |j: usize| -> Result<f64> {
            let v: f64 = cells[j]
                .parse()
                .map_err(|_| parse_err(row, format!("cannot parse `{}` in column `{}`", cells[j], names[j])))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in column `{}`", names[j])));
            }
            Ok(v)
        };
        let y = num(yi)?;
        let a_raw = num(ai)?;
        let a = match a_raw {
            v if v == 0.0 => Arm::Control,
            v if v == 1.0 => Arm::Treated,
            v => return Err(parse_err(row, format!("treatment must be 0 or 1, got {v}"))),
        };
        let x = xi.iter().map(|&j| num(j)).collect::<Result<Vec<_>>>()?;
        samples.push(Sample { y, x, a });
    }
    Dataset::new(xi.len(), samples)
}

/// Renders the dataset in the canonical `y,a,x1..xd` layout.
pub fn to_csv_string(data: &Dataset) -> String {
    let mut out = String::from("y,a");
    for j in 1..=data.d {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for s in &data.samples {
        let _ = write!(out, "{:.16e},{}", s.y, s.a as u8);
        for v in &s.x {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(data)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
