//! Comparison estimators that go through the CCDF contrast
//! `C(y₁, y₀, x) = F₁(y₁|x) − F₀(y₀|x)`: evaluate it on a grid of candidate
//! treated outcomes, project it onto nondecreasing sequences, and read off
//! the root.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::{CcdfFn, ConditionalCdf, NuisanceSet};
use crate::stats;

/// L2 projection onto nondecreasing sequences (pool adjacent violators).
pub fn isotonic_project(values: &[f64]) -> Vec<f64> {
    // Blocks as (sum, count); merged while the last two means decrease.
    let mut sums: Vec<f64> = Vec::with_capacity(values.len());
    let mut counts: Vec<usize> = Vec::with_capacity(values.len());
    for &v in values {
        sums.push(v);
        counts.push(1);
        while sums.len() > 1 {
            let k = sums.len() - 1;
            if sums[k - 1] * counts[k] as f64 > sums[k] * counts[k - 1] as f64 {
                sums[k - 1] += sums[k];
                counts[k - 1] += counts[k];
                sums.pop();
                counts.pop();
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (s, c) in sums.iter().zip(&counts) {
        let m = s / *c as f64;
        out.extend(std::iter::repeat_n(m, *c));
    }
    out
}

/// Equispaced grid of `m` candidate treated outcomes on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

pub const DEFAULT_GRID_POINTS: usize = 1001;

impl GridSpec {
    pub fn new(lo: f64, hi: f64, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 points, got {m}")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("grid bounds must satisfy lo < hi, got [{lo}, {hi}]")));
        }
        Ok(GridSpec { lo, hi, m })
    }

    /// Observed outcome range widened by three standard deviations.
    pub fn from_outcomes(outcomes: &[f64], m: usize) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::invalid("no outcomes to build a grid from"));
        }
        let (mn, mx) = outcomes
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let sd = stats::sample_sd(outcomes);
        let pad = if sd.is_finite() && sd > 0.0 { 3.0 * sd } else { 1.0 };
        GridSpec::new(mn - pad, mx + pad, m)
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.m - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.m)
            .map(|j| if j + 1 == self.m { self.hi } else { self.lo + j as f64 * h })
            .collect()
    }
}

/// Index of the smallest `|v|`; ties go to the lower index.
fn argmin_abs(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in v.iter().enumerate().skip(1) {
        if x.abs() < v[best].abs() {
            best = j;
        }
    }
    best
}

/// Plug-in inversion: contrast from the nuisance CCDFs, projected, and the
/// grid point with the smallest absolute contrast.
pub fn invert_cqc(nuisances: &NuisanceSet, y0: f64, x: &[f64], grid: &GridSpec) -> Result<f64> {
    let contrast = contrast_values(&*nuisances.ccdf0, &*nuisances.ccdf1, y0, x, grid);
    let proj = isotonic_project(&contrast);
    Ok(grid.points()[argmin_abs(&proj)])
}

fn contrast_values(ccdf0: &dyn CcdfFn, ccdf1: &dyn CcdfFn, y0: f64, x: &[f64], grid: &GridSpec) -> Vec<f64> {
    let f0 = ccdf0.eval(y0, x);
    let f1 = ccdf1.condition(x);
    grid.points().iter().map(|&g| f1.cdf(g) - f0).collect()
}

/// S-learner: smallest grid `y₁` whose projected contrast is nonnegative,
/// i.e. the grid version of `inf{y₁ : F̂₁(y₁|x) ≥ F̂₀(y₀|x)}`; `hi` if none.
pub fn s_learner_cqc(ccdf0: &dyn CcdfFn, ccdf1: &dyn CcdfFn, y0: f64, x: &[f64], grid: &GridSpec) -> Result<f64> {
    let proj = isotonic_project(&contrast_values(ccdf0, ccdf1, y0, x, grid));
    let pts = grid.points();
    Ok(proj
        .iter()
        .position(|&v| v >= 0.0)
        .map_or(grid.hi, |j| pts[j]))
}

/// Doubly robust inversion: the contrast is estimated by kernel regression
/// of DR pseudo-outcomes
///
/// ```text
/// φᵢ(y₁, y₀) = (aᵢ/π̂)(1{yᵢ ≤ y₁} − F̂₁(y₁|xᵢ)) + F̂₁(y₁|xᵢ)
///            − ((1−aᵢ)/(1−π̂))(1{yᵢ ≤ y₀} − F̂₀(y₀|xᵢ)) − F̂₀(y₀|xᵢ)
/// ```
///
/// on the covariates of the fitting sample, then projected and inverted.
pub struct DrContrastRegression<'a> {
    data: &'a Dataset,
    f0s: Vec<Box<dyn ConditionalCdf + 'a>>,
    pis: Vec<f64>,
    grid: GridSpec,
    /// Treated pseudo-outcomes on the grid, `n × m` row-major.
    treated_part: Vec<f64>,
}

impl<'a> DrContrastRegression<'a> {
    pub fn new(nuisances: &'a NuisanceSet, data: &'a Dataset, grid: GridSpec) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("contrast regression needs fitting data"));
        }
        let pts = grid.points();
        let m = pts.len();
        let mut pis = Vec::with_capacity(data.len());
        let mut treated_part = vec![0.0; data.len() * m];
        let mut f0s = Vec::with_capacity(data.len());
        for (i, s) in data.iter().enumerate() {
            f0s.push(nuisances.ccdf0.condition(&s.x));
            let pi = nuisances.propensity_at(&s.x)?;
            pis.push(pi);
            let f1 = nuisances.ccdf1.condition(&s.x);
            let w = s.a.indicator() / pi;
            let row = &mut treated_part[i * m..(i + 1) * m];
            for (r, &g) in row.iter_mut().zip(&pts) {
                let f = f1.cdf(g);
                let ind = if s.y <= g { 1.0 } else { 0.0 };
                *r = w * (ind - f) + f;
            }
        }
        Ok(DrContrastRegression {
            data,
            f0s,
            pis,
            grid,
            treated_part,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn weights(&self, x: &[f64], bandwidth: f64) -> Vec<f64> {
        let inv = 1.0 / (2.0 * bandwidth * bandwidth);
        let logw: Vec<f64> = self
            .data
            .iter()
            .map(|s| -s.x.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * inv)
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    /// Estimated contrast on the grid at `(y₀, x)` before projection.
    pub fn contrast(&self, y0: f64, x: &[f64], bandwidth: f64) -> Vec<f64> {
        let m = self.grid.m;
        let w = self.weights(x, bandwidth);
        let mut out = vec![0.0; m];
        let mut control = 0.0;
        for (i, s) in self.data.iter().enumerate() {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let row = &self.treated_part[i * m..(i + 1) * m];
            for (o, r) in out.iter_mut().zip(row) {
                *o += wi * r;
            }
            let f0 = self.f0s[i].cdf(y0);
            let ind = if s.y <= y0 { 1.0 } else { 0.0 };
            control += wi * ((1.0 - s.a.indicator()) / (1.0 - self.pis[i]) * (ind - f0) + f0);
        }
        out.iter_mut().for_each(|o| *o -= control);
        out
    }

    pub fn invert(&self, y0: f64, x: &[f64], bandwidth: f64) -> f64 {
        let proj = isotonic_project(&self.contrast(y0, x, bandwidth));
        let j = argmin_abs(&proj);
        self.grid.lo + j as f64 * self.grid.spacing()
    }
}
