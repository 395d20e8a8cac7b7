//! Exact rational counterparts of the float machinery, for small spaces.
//!
//! Denominators grow with every application, so this is meant for spot
//! checks on a handful of states and a few hundred steps.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::{FiniteDistribution, StateSpace, StochasticMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactDistribution {
    probs: Vec<BigRational>,
}

impl ExactDistribution {
    pub fn new(probs: Vec<BigRational>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty distribution".into()));
        }
        if probs.iter().any(|p| p.is_negative()) {
            return Err(Error::InvalidDistribution("negative entry".into()));
        }
        let total: BigRational = probs.iter().sum();
        if !total.is_one() {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        Ok(ExactDistribution { probs })
    }

    /// Normalizes positive integer weights.
    pub fn from_weights(weights: &[u64]) -> Result<Self> {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|&w| ratio(w, total)).collect())
    }

    pub fn point_mass(n: usize, index: usize) -> Self {
        let mut probs = vec![BigRational::zero(); n];
        probs[index] = BigRational::one();
        ExactDistribution { probs }
    }

    pub fn probs(&self) -> &[BigRational] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn to_float(&self, space: StateSpace) -> Result<FiniteDistribution> {
        let probs = self.probs.iter().map(to_f64).collect();
        Ok(FiniteDistribution::from_parts(space, probs))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactMatrix {
    n: usize,
    data: Vec<BigRational>,
}

impl ExactMatrix {
    pub fn new(rows: Vec<Vec<BigRational>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: row.len(),
                });
            }
            if row.iter().any(|p| p.is_negative()) {
                return Err(Error::InvalidMatrix(format!(
                    "row {i} has a negative entry"
                )));
            }
            let total: BigRational = row.iter().sum();
            if !total.is_one() {
                return Err(Error::InvalidMatrix(format!("row {i} sums to {total}")));
            }
            data.extend(row);
        }
        Ok(ExactMatrix { n, data })
    }

    /// Each row is normalized by its own total.
    pub fn from_integer_weights(rows: &[Vec<u64>]) -> Result<Self> {
        let rows = rows
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                if total == 0 {
                    return Err(Error::InvalidMatrix("row of zero weights".into()));
                }
                Ok(row.iter().map(|&w| ratio(w, total)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> &BigRational {
        &self.data[i * self.n + j]
    }

    /// Nearest float matrix; rows are within a few ulps of summing to one.
    pub fn to_float(&self, space: StateSpace) -> Result<StochasticMatrix> {
        if space.size() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                found: space.size(),
            });
        }
        Ok(StochasticMatrix::from_flat(
            space,
            self.data.iter().map(to_f64).collect(),
        ))
    }
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

pub fn apply(m: &ExactMatrix, mu: &ExactDistribution) -> Result<ExactDistribution> {
    if mu.len() != m.n {
        return Err(Error::Dimension {
            expected: m.n,
            found: mu.len(),
        });
    }
    let mut out = vec![BigRational::zero(); m.n];
    for (i, p) in mu.probs.iter().enumerate() {
        if p.is_zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            let t = m.get(i, j);
            if !t.is_zero() {
                *o += p * t;
            }
        }
    }
    Ok(ExactDistribution { probs: out })
}

pub fn tv(a: &ExactDistribution, b: &ExactDistribution) -> Result<BigRational> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let sum: BigRational = a
        .probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / BigRational::from_integer(BigInt::from(2)))
}

/// Solves `pi (P - I) = 0` with `sum(pi) = 1` by Gaussian elimination.
pub fn stationary(m: &ExactMatrix) -> Result<ExactDistribution> {
    let n = m.n;
    // Row j of the system is column j of (P - I); the last row is replaced by
    // the normalization constraint.
    let mut a: Vec<Vec<BigRational>> = (0..n)
        .map(|j| {
            (0..n)
                .map(|i| {
                    if j == n - 1 {
                        BigRational::one()
                    } else if i == j {
                        m.get(i, j) - BigRational::one()
                    } else {
                        m.get(i, j).clone()
                    }
                })
                .collect()
        })
        .collect();
    let mut b = vec![BigRational::zero(); n];
    b[n - 1] = BigRational::one();

    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !a[r][col].is_zero())
            .ok_or_else(|| Error::NonErgodic("stationary system is singular".into()))?;
        a.swap(col, pivot);
        b.swap(col, pivot);
        let inv = a[col][col].recip();
        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let factor = &a[r][col] * &inv;
            for c in col..n {
                let delta = &factor * &a[col][c];
                a[r][c] -= delta;
            }
            let delta = &factor * &b[col];
            b[r] -= delta;
        }
    }
    let probs: Vec<BigRational> = (0..n).map(|i| &b[i] / &a[i][i]).collect();
    ExactDistribution::new(probs)
        .map_err(|e| Error::NonErgodic(format!("stationary solution is not a distribution: {e}")))
}
