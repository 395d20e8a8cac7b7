//! Statistical instruments for targets where exact TV is out of reach:
//! batch-means moment estimates and binned TV estimates.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::FiniteTarget;
use crate::measures::FiniteDistribution;

pub const MIN_BATCHES: usize = 20;
pub const MIN_GRID_SAMPLES: usize = 10_000;
/// Largest fraction of mass allowed outside the grid.
pub const MAX_OVERFLOW: f64 = 0.01;
pub const DEFAULT_BURN_IN: f64 = 0.2;
pub const DEFAULT_BINS: usize = 50;

/// Row-major sample matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize) -> Self {
        Samples {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Samples {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut s = Samples::with_capacity(dim, rows.len());
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn from_scalars(values: &[f64]) -> Self {
        Samples {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Columns `start..start + width` of every row.
    pub fn columns(&self, start: usize, width: usize) -> Samples {
        let mut out = Samples::with_capacity(width, self.len());
        for r in self.rows() {
            out.data.extend_from_slice(&r[start..start + width]);
        }
        out
    }

    /// Drops the leading `fraction` of rows.
    pub fn after_burn_in(&self, fraction: f64) -> Samples {
        let skip = ((self.len() as f64) * fraction.clamp(0.0, 1.0)).floor() as usize;
        Samples {
            dim: self.dim,
            data: self.data[skip * self.dim..].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Batch-means standard error of each mean entry.
    pub mean_se: Vec<f64>,
    /// Batch-means standard error of each covariance entry.
    pub covariance_se: Vec<Vec<f64>>,
    pub n_samples: usize,
    pub n_batches: usize,
}

impl MomentReport {
    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[i][i]
    }
}

/// Mean and covariance over all rows, with standard errors from
/// `n_batches` contiguous equal batches (a trailing remainder shorter than a
/// batch only enters the point estimates).
pub fn moments(samples: &Samples, n_batches: usize) -> Result<MomentReport> {
    let n = samples.len();
    let d = samples.dim();
    if n_batches < MIN_BATCHES {
        return Err(Error::Parameter(format!(
            "need at least {MIN_BATCHES} batches, got {n_batches}"
        )));
    }
    if n < 10 * n_batches {
        return Err(Error::TooFewSamples(format!(
            "{n} samples for {n_batches} batches, need at least {}",
            10 * n_batches
        )));
    }
    if !samples.all_finite() {
        return Err(Error::Numeric("samples contain non-finite values".into()));
    }

    let mut mean = vec![0.0; d];
    for r in samples.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let batch = n / n_batches;
    let mut batch_mean = vec![vec![0.0; d]; n_batches];
    let mut batch_cov = vec![vec![0.0; d * d]; n_batches];
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for (i, r) in samples.rows().enumerate() {
        for (c, (x, m)) in centred.iter_mut().zip(r.iter().zip(&mean)) {
            *c = x - m;
        }
        let b = i / batch;
        for a in 0..d {
            for c in a..d {
                cov[a * d + c] += centred[a] * centred[c];
            }
        }
        if b < n_batches {
            for a in 0..d {
                batch_mean[b][a] += r[a];
                for c in a..d {
                    batch_cov[b][a * d + c] += centred[a] * centred[c];
                }
            }
        }
    }

    let se = |values: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = values.collect();
        let k = v.len() as f64;
        let m = v.iter().sum::<f64>() / k;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    };

    let mean_se = (0..d)
        .map(|a| se(&mut batch_mean.iter().map(|bm| bm[a] / batch as f64)))
        .collect();
    let mut covariance = vec![vec![0.0; d]; d];
    let mut covariance_se = vec![vec![0.0; d]; d];
    for a in 0..d {
        for c in a..d {
            let v = cov[a * d + c] / n as f64;
            let s = se(&mut batch_cov.iter().map(|bc| bc[a * d + c] / batch as f64));
            covariance[a][c] = v;
            covariance[c][a] = v;
            covariance_se[a][c] = s;
            covariance_se[c][a] = s;
        }
    }
    Ok(MomentReport {
        mean,
        covariance,
        mean_se,
        covariance_se,
        n_samples: n,
        n_batches,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BurnInSensitivity {
    pub fraction: f64,
    pub report: MomentReport,
}

/// Moment estimates after discarding 10%, 20% and 40% of the trace.
pub fn burn_in_sensitivity(samples: &Samples, n_batches: usize) -> Result<Vec<BurnInSensitivity>> {
    [0.1, 0.2, 0.4]
        .into_iter()
        .map(|fraction| {
            Ok(BurnInSensitivity {
                fraction,
                report: moments(&samples.after_burn_in(fraction), n_batches)?,
            })
        })
        .collect()
}

/// Rectangular bins over one or two jointly gridded dimensions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Grid {
    edges: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(edges: Vec<Vec<f64>>) -> Result<Self> {
        if edges.is_empty() || edges.len() > 2 {
            return Err(Error::Parameter(
                "grids cover one or two dimensions jointly".into(),
            ));
        }
        for e in &edges {
            if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Parameter(
                    "bin edges must be strictly increasing".into(),
                ));
            }
        }
        Ok(Grid { edges })
    }

    /// `bins` equal-width bins on `[lo, hi]` in each listed dimension.
    pub fn uniform(ranges: &[(f64, f64)], bins: usize) -> Result<Self> {
        let edges = ranges
            .iter()
            .map(|&(lo, hi)| {
                (0..=bins)
                    .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
                    .collect()
            })
            .collect();
        Self::new(edges)
    }

    /// Default grid: ±5 standard deviations around the mean.
    pub fn around(mean: &[f64], sd: &[f64]) -> Result<Self> {
        let ranges: Vec<(f64, f64)> = mean
            .iter()
            .zip(sd)
            .map(|(m, s)| (m - 5.0 * s, m + 5.0 * s))
            .collect();
        Self::uniform(&ranges, DEFAULT_BINS)
    }

    pub fn edges(&self) -> &[Vec<f64>] {
        &self.edges
    }

    pub fn dims(&self) -> usize {
        self.edges.len()
    }

    pub fn num_cells(&self) -> usize {
        self.edges.iter().map(|e| e.len() - 1).product()
    }

    pub fn cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        for (e, &v) in self.edges.iter().zip(x) {
            let bins = e.len() - 1;
            if !(v >= e[0] && v <= e[bins]) {
                return None;
            }
            let b = e
                .partition_point(|edge| *edge <= v)
                .saturating_sub(1)
                .min(bins - 1);
            idx = idx * bins + b;
        }
        Some(idx)
    }

    fn histogram(&self, s: &Samples) -> Result<(Vec<f64>, f64)> {
        if s.dim() != self.dims() {
            return Err(Error::Dimension {
                expected: self.dims(),
                found: s.dim(),
            });
        }
        if s.len() < MIN_GRID_SAMPLES {
            return Err(Error::TooFewSamples(format!(
                "{} samples, need at least {MIN_GRID_SAMPLES}",
                s.len()
            )));
        }
        let mut counts = vec![0.0; self.num_cells()];
        let mut outside = 0.0;
        for r in s.rows() {
            match self.cell_of(r) {
                Some(c) => counts[c] += 1.0,
                None => outside += 1.0,
            }
        }
        let n = s.len() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        Ok((counts, outside / n))
    }
}

/// What the samples are compared against.
pub enum Reference<'a> {
    Samples(&'a Samples),
    /// Exact probability of each grid cell, row-major; the rest of the mass
    /// lies outside the grid.
    CellMasses(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridTV {
    pub bins: Vec<Vec<f64>>,
    pub tv_estimate: f64,
}

/// Half the L1 distance between binned probabilities, with the mass outside
/// the grid counted as one extra cell.
pub fn grid_tv(samples: &Samples, reference: Reference<'_>, grid: &Grid) -> Result<GridTV> {
    let (a, a_out) = grid.histogram(samples)?;
    let (b, b_out) = match reference {
        Reference::Samples(s) => grid.histogram(s)?,
        Reference::CellMasses(m) => {
            if m.len() != grid.num_cells() {
                return Err(Error::Dimension {
                    expected: grid.num_cells(),
                    found: m.len(),
                });
            }
            let inside: f64 = m.iter().sum();
            let out = (1.0 - inside).max(0.0);
            (m, out)
        }
    };
    for (side, out) in [("first", a_out), ("second", b_out)] {
        if out > MAX_OVERFLOW {
            return Err(Error::Coverage(format!(
                "{:.2}% of the {side} argument's mass lies outside the grid",
                100.0 * out
            )));
        }
    }
    let inner: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let tv = (0.5 * (inner + (a_out - b_out).abs())).clamp(0.0, 1.0);
    Ok(GridTV {
        bins: grid.edges.clone(),
        tv_estimate: tv,
    })
}

/// Normal probability of each bin `[edges[i], edges[i+1]]`.
pub fn normal_bin_masses(mean: f64, sd: f64, edges: &[f64]) -> Result<Vec<f64>> {
    let n = Normal::new(mean, sd).map_err(|e| Error::Parameter(e.to_string()))?;
    Ok(edges
        .windows(2)
        .map(|w| n.cdf(w[1]) - n.cdf(w[0]))
        .collect())
}

/// Empirical distribution of discrete samples over a finite target's states.
pub fn empirical_finite(target: &FiniteTarget, samples: &Samples) -> Result<FiniteDistribution> {
    let mut counts = vec![0.0; target.num_states()];
    let mut sites = vec![0usize; samples.dim()];
    for r in samples.rows() {
        for (s, v) in sites.iter_mut().zip(r) {
            *s = *v as usize;
        }
        let i = target.index_of(&sites).ok_or_else(|| {
            Error::Parameter(format!("sample {r:?} is not a state of the target"))
        })?;
        counts[i] += 1.0;
    }
    FiniteDistribution::from_weights(target.space(), &counts)
}
