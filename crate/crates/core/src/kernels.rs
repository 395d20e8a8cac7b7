//! MCMC step functions: random-walk and independence Metropolis-Hastings,
//! random-scan and systematic-scan Gibbs.
//!
//! Targets are either finite tables over a product of small sites or
//! multivariate Gaussians given by their precision matrix. Densities are kept
//! in log space throughout. On finite targets every kernel can also be
//! rendered to an exact [`StochasticMatrix`].
//!
//! Random draw order, which replay and paired experiments depend on:
//!
//! * MH step: the proposal's draws, then exactly one uniform for the
//!   accept decision (drawn even when the ratio is at least one).
//! * Random-scan Gibbs step: one integer for the site, then the conditional
//!   draw (one uniform on finite targets, one standard normal on Gaussians).
//! * Systematic Gibbs: one conditional draw per site in scan order.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{FiniteDistribution, StateSpace, StochasticMatrix};

/// Largest finite target [`render_matrix`] will enumerate by default.
pub const DEFAULT_RENDER_CAP: usize = 4096;

/// A sampler state: site values on a finite target, or a real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum State {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

impl State {
    pub fn dim(&self) -> usize {
        match self {
            State::Discrete(v) => v.len(),
            State::Continuous(v) => v.len(),
        }
    }

    pub fn as_discrete(&self) -> Option<&[usize]> {
        match self {
            State::Discrete(v) => Some(v),
            State::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            State::Continuous(v) => Some(v),
            State::Discrete(_) => None,
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        match self {
            State::Discrete(v) => v.iter().map(|&s| s as f64).collect(),
            State::Continuous(v) => v.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            State::Discrete(_) => true,
            State::Continuous(v) => v.iter().all(|c| c.is_finite()),
        }
    }

    /// Comma-separated coordinates, used as a label and in CSV output.
    pub fn label(&self) -> String {
        match self {
            State::Discrete(v) => join(v.iter()),
            State::Continuous(v) => join(v.iter()),
        }
    }
}

fn join<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

/// Unnormalized log density on a table indexed by a product of sites.
/// Site values are enumerated row-major, the last site varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteTarget {
    site_sizes: Vec<usize>,
    log_weights: Vec<f64>,
}

impl FiniteTarget {
    pub fn new(site_sizes: Vec<usize>, log_weights: Vec<f64>) -> Result<Self> {
        if site_sizes.is_empty() || site_sizes.contains(&0) {
            return Err(Error::Parameter(
                "every site needs at least one value".into(),
            ));
        }
        let n = site_sizes
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| Error::Parameter("state space size overflows".into()))?;
        if log_weights.len() != n {
            return Err(Error::Dimension {
                expected: n,
                found: log_weights.len(),
            });
        }
        if log_weights
            .iter()
            .any(|w| w.is_nan() || *w == f64::INFINITY)
        {
            return Err(Error::Parameter(
                "log weights must not be NaN or +inf".into(),
            ));
        }
        if log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
            return Err(Error::Parameter("target has no mass".into()));
        }
        Ok(FiniteTarget {
            site_sizes,
            log_weights,
        })
    }

    /// Single-site target with the given (unnormalized, non-negative) weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Parameter(
                "weights must be finite and non-negative".into(),
            ));
        }
        Self::new(
            vec![weights.len()],
            weights.iter().map(|w| w.ln()).collect(),
        )
    }

    /// Product of independent per-site weight vectors.
    pub fn independent(marginals: &[Vec<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let mut log_weights = vec![0.0];
        for m in marginals {
            if m.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Parameter(
                    "weights must be finite and non-negative".into(),
                ));
            }
            log_weights = log_weights
                .iter()
                .flat_map(|lw| m.iter().map(move |w| lw + w.ln()))
                .collect();
        }
        Self::new(sizes, log_weights)
    }

    pub fn site_sizes(&self) -> &[usize] {
        &self.site_sizes
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn num_states(&self) -> usize {
        self.log_weights.len()
    }

    pub fn index_of(&self, sites: &[usize]) -> Option<usize> {
        if sites.len() != self.site_sizes.len() {
            return None;
        }
        let mut idx = 0usize;
        for (&v, &size) in sites.iter().zip(&self.site_sizes) {
            if v >= size {
                return None;
            }
            idx = idx * size + v;
        }
        Some(idx)
    }

    pub fn state_at(&self, mut index: usize) -> Vec<usize> {
        let mut sites = vec![0; self.site_sizes.len()];
        for (slot, &size) in sites.iter_mut().zip(&self.site_sizes).rev() {
            *slot = index % size;
            index /= size;
        }
        sites
    }

    pub fn log_unnorm(&self, sites: &[usize]) -> f64 {
        self.index_of(sites)
            .map_or(f64::NEG_INFINITY, |i| self.log_weights[i])
    }

    pub fn space(&self) -> StateSpace {
        let labels = (0..self.num_states())
            .map(|i| join(self.state_at(i).iter()))
            .collect();
        StateSpace::new(labels).expect("enumerated labels are distinct")
    }

    /// The normalized target as an exact-space distribution.
    pub fn distribution(&self) -> FiniteDistribution {
        let max = self
            .log_weights
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = self.log_weights.iter().map(|w| (w - max).exp()).collect();
        FiniteDistribution::from_weights(self.space(), &weights).expect("target has mass")
    }

    /// Probabilities of each value at `site` given the other sites of `x`.
    pub fn conditional(&self, site: usize, x: &[usize]) -> Result<Vec<f64>> {
        if site >= self.site_sizes.len() || x.len() != self.site_sizes.len() {
            return Err(Error::Parameter(format!("site {site} out of range")));
        }
        let mut y = x.to_vec();
        let logs: Vec<f64> = (0..self.site_sizes[site])
            .map(|v| {
                y[site] = v;
                self.log_unnorm(&y)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Precondition(format!(
                "full conditional at site {site} has no mass"
            )));
        }
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / total).collect())
    }
}

/// Multivariate normal given by mean and precision matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    covariance: DMatrix<f64>,
    cov_factor: DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, precision: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Parameter(
                "Gaussian target needs dimension >= 1".into(),
            ));
        }
        if precision.len() != d || precision.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: precision.len(),
            });
        }
        let q = DMatrix::from_fn(d, d, |i, j| precision[i][j]);
        for i in 0..d {
            for j in 0..i {
                if (q[(i, j)] - q[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Parameter("precision matrix is not symmetric".into()));
                }
            }
        }
        let chol = q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Parameter("precision matrix is not positive definite".into()))?;
        let covariance = chol.inverse();
        let cov_factor = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance factorization failed".into()))?
            .l();
        Ok(GaussianTarget {
            mean: DVector::from_vec(mean),
            precision: q,
            covariance,
            cov_factor,
        })
    }

    /// Zero-mean, unit-variance bivariate normal with correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        if !(rho.abs() < 1.0) {
            return Err(Error::Parameter(format!(
                "correlation {rho} outside (-1, 1)"
            )));
        }
        let s = 1.0 / (1.0 - rho * rho);
        Self::new(vec![0.0, 0.0], vec![vec![s, -rho * s], vec![-rho * s, s]])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn precision(&self) -> Vec<Vec<f64>> {
        to_rows(&self.precision)
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        to_rows(&self.covariance)
    }

    pub fn log_unnorm(&self, x: &[f64]) -> f64 {
        if x.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        let d = self.dim();
        let mut quad = 0.0;
        for i in 0..d {
            let di = x[i] - self.mean[i];
            for j in 0..d {
                quad += di * self.precision[(i, j)] * (x[j] - self.mean[j]);
            }
        }
        -0.5 * quad
    }

    /// Mean and variance of coordinate `site` given the others.
    pub fn conditional(&self, site: usize, x: &[f64]) -> (f64, f64) {
        let qii = self.precision[(site, site)];
        let shift: f64 = (0..self.dim())
            .filter(|&j| j != site)
            .map(|j| self.precision[(site, j)] * (x[j] - self.mean[j]))
            .sum();
        (self.mean[site] - shift / qii, 1.0 / qii)
    }

    pub fn sample_exact<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample(StandardNormal)),
        );
        (&self.mean + &self.cov_factor * z).as_slice().to_vec()
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A user-supplied log density on real vectors. Usable with MH kernels only.
pub trait LogDensity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn log_unnorm(&self, x: &[f64]) -> f64;
}

#[derive(Clone, Debug)]
pub enum Target {
    Finite(FiniteTarget),
    Gaussian(GaussianTarget),
    Custom(Arc<dyn LogDensity>),
}

impl Target {
    pub fn dim(&self) -> usize {
        match self {
            Target::Finite(t) => t.site_sizes.len(),
            Target::Gaussian(t) => t.dim(),
            Target::Custom(t) => t.dim(),
        }
    }

    pub fn log_unnorm(&self, x: &State) -> f64 {
        match (self, x) {
            (Target::Finite(t), State::Discrete(v)) => t.log_unnorm(v),
            (Target::Gaussian(t), State::Continuous(v)) => t.log_unnorm(v),
            (Target::Custom(t), State::Continuous(v)) if v.len() == t.dim() => t.log_unnorm(v),
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn as_finite(&self) -> Option<&FiniteTarget> {
        match self {
            Target::Finite(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianTarget> {
        match self {
            Target::Gaussian(t) => Some(t),
            _ => None,
        }
    }

    /// A state in the support: the heaviest table entry, the Gaussian mean,
    /// or the origin for custom densities.
    pub fn default_state(&self) -> State {
        match self {
            Target::Finite(t) => {
                let best = t.log_weights.iter().enumerate().fold(0, |b, (i, w)| {
                    if *w > t.log_weights[b] {
                        i
                    } else {
                        b
                    }
                });
                State::Discrete(t.state_at(best))
            }
            Target::Gaussian(t) => State::Continuous(t.mean().to_vec()),
            Target::Custom(t) => State::Continuous(vec![0.0; t.dim()]),
        }
    }
}

/// Proposal families. Each can be sampled and has an evaluable log density
/// `log f(y | x)`, so a remote server can score a state it never proposed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Proposal {
    /// Always proposes the current state.
    Identity,
    /// Uniform over every state of a finite target.
    UniformIndependent,
    /// Picks a site uniformly and moves it one step up or down, cyclically.
    NeighborWalk,
    /// Adds isotropic normal noise with the given standard deviation.
    GaussianRandomWalk { scale: f64 },
    /// Exact draw from the full conditional of one site; other sites are kept.
    GibbsSite { site: usize },
}

impl Proposal {
    pub fn is_symmetric(&self) -> bool {
        matches!(
            self,
            Proposal::Identity | Proposal::NeighborWalk | Proposal::GaussianRandomWalk { .. }
        )
    }

    /// Whether the server-side acceptance rule, which scores the server's
    /// state under the proposal centred at the worker's read, leaves the
    /// target invariant. True for proposals whose density ratio between two
    /// candidates does not depend on the centre beyond the kept sites.
    pub fn server_compatible(&self) -> bool {
        matches!(
            self,
            Proposal::Identity | Proposal::UniformIndependent | Proposal::GibbsSite { .. }
        )
    }

    pub fn validate_for(&self, target: &Target) -> Result<()> {
        match (self, target) {
            (Proposal::Identity, _) => Ok(()),
            (Proposal::UniformIndependent | Proposal::NeighborWalk, Target::Finite(_)) => Ok(()),
            (Proposal::GaussianRandomWalk { scale }, Target::Gaussian(_) | Target::Custom(_)) => {
                if scale.is_finite() && *scale > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!(
                        "random-walk scale {scale} must be positive"
                    )))
                }
            }
            (Proposal::GibbsSite { site }, Target::Finite(_) | Target::Gaussian(_)) => {
                if *site < target.dim() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!(
                        "site {site} out of range for dimension {}",
                        target.dim()
                    )))
                }
            }
            (Proposal::GibbsSite { .. }, Target::Custom(_)) => Err(Error::UnsupportedTarget(
                "full conditionals need a finite or Gaussian target".into(),
            )),
            (p, _) => Err(Error::UnsupportedTarget(format!(
                "proposal {p:?} does not apply to this target"
            ))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        target: &Target,
        x: &State,
        rng: &mut R,
    ) -> Result<State> {
        match (self, target, x) {
            (Proposal::Identity, _, _) => Ok(x.clone()),
            (Proposal::UniformIndependent, Target::Finite(t), State::Discrete(_)) => {
                let idx = rng.random_range(0..t.num_states());
                Ok(State::Discrete(t.state_at(idx)))
            }
            (Proposal::NeighborWalk, Target::Finite(t), State::Discrete(v)) => {
                let site = rng.random_range(0..v.len());
                let up = rng.random_bool(0.5);
                let size = t.site_sizes[site];
                let mut y = v.clone();
                y[site] = if up {
                    (v[site] + 1) % size
                } else {
                    (v[site] + size - 1) % size
                };
                Ok(State::Discrete(y))
            }
            (Proposal::GaussianRandomWalk { scale }, _, State::Continuous(v)) => {
                Ok(State::Continuous(
                    v.iter()
                        .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                ))
            }
            (Proposal::GibbsSite { site }, Target::Finite(t), State::Discrete(v)) => {
                let probs = t.conditional(*site, v)?;
                let value = categorical(&probs, rng.random::<f64>());
                let mut y = v.clone();
                y[*site] = value;
                Ok(State::Discrete(y))
            }
            (Proposal::GibbsSite { site }, Target::Gaussian(g), State::Continuous(v)) => {
                if *site >= v.len() {
                    return Err(Error::Parameter(format!("site {site} out of range")));
                }
                let (m, var) = g.conditional(*site, v);
                let mut y = v.clone();
                y[*site] = m + var.sqrt() * rng.sample::<f64, _>(StandardNormal);
                Ok(State::Continuous(y))
            }
            (p, _, _) => Err(Error::UnsupportedTarget(format!(
                "proposal {p:?} cannot move state {}",
                x.label()
            ))),
        }
    }

    /// `log f(y | x)`.
    pub fn log_density(&self, target: &Target, y: &State, x: &State) -> Result<f64> {
        match (self, target, y, x) {
            (Proposal::Identity, _, _, _) => Ok(if y == x { 0.0 } else { f64::NEG_INFINITY }),
            (Proposal::UniformIndependent, Target::Finite(t), State::Discrete(yv), _) => {
                Ok(if t.index_of(yv).is_some() {
                    -(t.num_states() as f64).ln()
                } else {
                    f64::NEG_INFINITY
                })
            }
            (Proposal::NeighborWalk, Target::Finite(_), State::Discrete(_), State::Discrete(_)) => {
                let p: f64 = self
                    .enumerate(target, x)?
                    .into_iter()
                    .filter(|(s, _)| s == y)
                    .map(|(_, p)| p)
                    .sum();
                Ok(p.ln())
            }
            (
                Proposal::GaussianRandomWalk { scale },
                _,
                State::Continuous(yv),
                State::Continuous(xv),
            ) => {
                if yv.len() != xv.len() {
                    return Ok(f64::NEG_INFINITY);
                }
                let var = scale * scale;
                Ok(yv
                    .iter()
                    .zip(xv)
                    .map(|(a, b)| normal_logpdf(*a, *b, var))
                    .sum())
            }
            (
                Proposal::GibbsSite { site },
                Target::Finite(t),
                State::Discrete(yv),
                State::Discrete(xv),
            ) => {
                if !agrees_off_site(yv, xv, *site) {
                    return Ok(f64::NEG_INFINITY);
                }
                let probs = t.conditional(*site, xv)?;
                Ok(probs.get(yv[*site]).map_or(f64::NEG_INFINITY, |p| p.ln()))
            }
            (
                Proposal::GibbsSite { site },
                Target::Gaussian(g),
                State::Continuous(yv),
                State::Continuous(xv),
            ) => {
                if !agrees_off_site(yv, xv, *site) {
                    return Ok(f64::NEG_INFINITY);
                }
                let (m, var) = g.conditional(*site, xv);
                Ok(normal_logpdf(yv[*site], m, var))
            }
            (p, _, _, _) => Err(Error::UnsupportedTarget(format!(
                "proposal {p:?} has no density between these states"
            ))),
        }
    }

    /// Every reachable proposal from `x` with its probability (finite targets).
    pub fn enumerate(&self, target: &Target, x: &State) -> Result<Vec<(State, f64)>> {
        let (t, xv) = match (target, x) {
            (Target::Finite(t), State::Discrete(v)) => (t, v),
            _ => {
                return Err(Error::UnsupportedTarget(
                    "enumeration needs a finite target".into(),
                ))
            }
        };
        let mut out: Vec<(State, f64)> = Vec::new();
        let mut push = |s: Vec<usize>, p: f64| {
            let s = State::Discrete(s);
            match out.iter_mut().find(|(o, _)| *o == s) {
                Some((_, q)) => *q += p,
                None => out.push((s, p)),
            }
        };
        match self {
            Proposal::Identity => push(xv.clone(), 1.0),
            Proposal::UniformIndependent => {
                let p = 1.0 / t.num_states() as f64;
                for i in 0..t.num_states() {
                    push(t.state_at(i), p);
                }
            }
            Proposal::NeighborWalk => {
                let w = 0.5 / xv.len() as f64;
                for (site, &size) in t.site_sizes.iter().enumerate() {
                    for v in [(xv[site] + 1) % size, (xv[site] + size - 1) % size] {
                        let mut y = xv.clone();
                        y[site] = v;
                        push(y, w);
                    }
                }
            }
            Proposal::GibbsSite { site } => {
                for (v, p) in t.conditional(*site, xv)?.into_iter().enumerate() {
                    if p > 0.0 {
                        let mut y = xv.clone();
                        y[*site] = v;
                        push(y, p);
                    }
                }
            }
            Proposal::GaussianRandomWalk { .. } => {
                return Err(Error::UnsupportedTarget(
                    "Gaussian random walk cannot be enumerated".into(),
                ))
            }
        }
        Ok(out)
    }
}

fn agrees_off_site<T: PartialEq>(y: &[T], x: &[T], site: usize) -> bool {
    y.len() == x.len()
        && site < y.len()
        && y.iter()
            .zip(x)
            .enumerate()
            .all(|(i, (a, b))| i == site || a == b)
}

fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let d = y - mean;
    -0.5 * ((2.0 * PI * var).ln() + d * d / var)
}

/// Inverse-CDF draw from a probability vector using one uniform.
fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the last partial sum; take the last supported value.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    MetropolisHastings,
    GibbsSingleSite,
    SystematicGibbs,
}

/// An immutable, shareable description of one Markov step.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    kind: KernelKind,
    target: Arc<Target>,
    proposal: Option<Proposal>,
    site_order: Option<Vec<usize>>,
}

impl KernelSpec {
    pub fn metropolis_hastings(target: Arc<Target>, proposal: Proposal) -> Result<Self> {
        proposal.validate_for(&target)?;
        Ok(KernelSpec {
            kind: KernelKind::MetropolisHastings,
            target,
            proposal: Some(proposal),
            site_order: None,
        })
    }

    /// Random-scan Gibbs: each step updates one uniformly chosen site.
    pub fn gibbs(target: Arc<Target>) -> Result<Self> {
        ensure_conditionals(&target)?;
        Ok(KernelSpec {
            kind: KernelKind::GibbsSingleSite,
            target,
            proposal: None,
            site_order: None,
        })
    }

    /// Systematic-scan Gibbs; `order` must be a permutation of the sites and
    /// defaults to `0..dim`.
    pub fn systematic_gibbs(target: Arc<Target>, order: Option<Vec<usize>>) -> Result<Self> {
        ensure_conditionals(&target)?;
        let dim = target.dim();
        let order = order.unwrap_or_else(|| (0..dim).collect());
        let mut seen = vec![false; dim];
        for &s in &order {
            if s >= dim || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Parameter(format!(
                    "site order {order:?} is not a permutation"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Parameter(format!(
                "site order {order:?} is not a permutation"
            )));
        }
        Ok(KernelSpec {
            kind: KernelKind::SystematicGibbs,
            target,
            proposal: None,
            site_order: Some(order),
        })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn target(&self) -> &Arc<Target> {
        &self.target
    }

    pub fn proposal(&self) -> Option<&Proposal> {
        self.proposal.as_ref()
    }

    pub fn site_order(&self) -> Option<&[usize]> {
        self.site_order.as_deref()
    }

    /// One application of the kernel.
    pub fn step<R: Rng + ?Sized>(&self, x: &State, rng: &mut R) -> Result<Step> {
        match self.kind {
            KernelKind::MetropolisHastings => mh_step(self, x, rng),
            KernelKind::GibbsSingleSite => {
                let site = rng.random_range(0..self.target.dim());
                let state = gibbs_site_step(self, x, site, rng)?;
                let log_density = self.target.log_unnorm(&state);
                Ok(Step {
                    state,
                    log_density,
                    accepted: true,
                })
            }
            KernelKind::SystematicGibbs => {
                let mut state = x.clone();
                for &site in self.site_order.as_deref().unwrap_or_default() {
                    state = gibbs_site_step(self, &state, site, rng)?;
                }
                let log_density = self.target.log_unnorm(&state);
                Ok(Step {
                    state,
                    log_density,
                    accepted: true,
                })
            }
        }
    }
}

fn ensure_conditionals(target: &Target) -> Result<()> {
    match target {
        Target::Finite(_) | Target::Gaussian(_) => Ok(()),
        Target::Custom(_) => Err(Error::UnsupportedTarget(
            "Gibbs kernels need a finite or Gaussian target".into(),
        )),
    }
}

/// Result of one kernel application. `log_density` is the target's log
/// density at `state`, which is what a worker ships to a parameter server.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: State,
    pub log_density: f64,
    pub accepted: bool,
}

/// Log Metropolis-Hastings ratio for moving from `x` to `y`.
pub(crate) fn mh_log_ratio(
    target: &Target,
    proposal: &Proposal,
    x: &State,
    log_x: f64,
    y: &State,
    log_y: f64,
    log_forward: f64,
) -> Result<f64> {
    if log_y == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if proposal.is_symmetric() {
        return Ok(log_y - log_x);
    }
    let log_backward = proposal.log_density(target, x, y)?;
    if log_backward == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_y + log_backward - log_x - log_forward)
}

/// One Metropolis-Hastings step: propose, then accept with probability
/// `min(1, pi(y) f(x|y) / (pi(x) f(y|x)))`.
pub fn mh_step<R: Rng + ?Sized>(spec: &KernelSpec, x: &State, rng: &mut R) -> Result<Step> {
    let proposal = spec
        .proposal
        .as_ref()
        .ok_or_else(|| Error::Parameter("Metropolis-Hastings needs a proposal".into()))?;
    let target = spec.target.as_ref();
    let log_x = target.log_unnorm(x);
    if log_x == f64::NEG_INFINITY {
        return Err(Error::Precondition(format!(
            "current state {} is outside the target support",
            x.label()
        )));
    }
    let y = proposal.sample(target, x, rng)?;
    let log_forward = proposal.log_density(target, &y, x)?;
    if log_forward == f64::NEG_INFINITY {
        return Err(Error::ProposalInconsistency(format!(
            "proposal produced {} which has zero density under itself",
            y.label()
        )));
    }
    let log_y = target.log_unnorm(&y);
    let log_ratio = mh_log_ratio(target, proposal, x, log_x, &y, log_y, log_forward)?;
    if log_ratio.is_nan() {
        return Err(Error::Numeric("Metropolis-Hastings ratio is NaN".into()));
    }
    let u: f64 = rng.random();
    if log_ratio >= 0.0 || u.ln() < log_ratio {
        Ok(Step {
            state: y,
            log_density: log_y,
            accepted: true,
        })
    } else {
        Ok(Step {
            state: x.clone(),
            log_density: log_x,
            accepted: false,
        })
    }
}

/// Replaces coordinate `site` with an exact draw from its full conditional.
pub fn gibbs_site_step<R: Rng + ?Sized>(
    spec: &KernelSpec,
    x: &State,
    site: usize,
    rng: &mut R,
) -> Result<State> {
    let target = spec.target.as_ref();
    if site >= target.dim() {
        return Err(Error::Parameter(format!(
            "site {site} out of range for dimension {}",
            target.dim()
        )));
    }
    ensure_conditionals(target)?;
    Proposal::GibbsSite { site }.sample(target, x, rng)
}

pub fn render_matrix(spec: &KernelSpec) -> Result<StochasticMatrix> {
    render_matrix_with_cap(spec, DEFAULT_RENDER_CAP)
}

/// Exact transition matrix of a kernel on a finite target, states ordered as
/// in [`FiniteTarget::space`].
pub fn render_matrix_with_cap(spec: &KernelSpec, cap: usize) -> Result<StochasticMatrix> {
    let target = spec.target.as_ref();
    let t = target
        .as_finite()
        .ok_or_else(|| Error::UnsupportedTarget("only finite targets render to a matrix".into()))?;
    let n = t.num_states();
    if n > cap {
        return Err(Error::Size { size: n, cap });
    }
    let data = match spec.kind {
        KernelKind::MetropolisHastings => {
            let proposal = spec.proposal.as_ref().expect("MH kernels carry a proposal");
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                let x = State::Discrete(t.state_at(i));
                let log_x = t.log_weights[i];
                for (y, q) in proposal.enumerate(target, &x)? {
                    let j = t
                        .index_of(y.as_discrete().expect("discrete"))
                        .expect("in range");
                    if j == i {
                        data[i * n + i] += q;
                        continue;
                    }
                    let log_y = t.log_weights[j];
                    let log_forward = q.ln();
                    let r = mh_log_ratio(target, proposal, &x, log_x, &y, log_y, log_forward)?;
                    let a = if r >= 0.0 { 1.0 } else { r.exp() };
                    data[i * n + j] += q * a;
                    data[i * n + i] += q * (1.0 - a);
                }
            }
            data
        }
        KernelKind::GibbsSingleSite => {
            let dim = t.site_sizes.len();
            let mut data = vec![0.0; n * n];
            for site in 0..dim {
                for (acc, v) in data.iter_mut().zip(site_matrix(t, site)?) {
                    *acc += v / dim as f64;
                }
            }
            data
        }
        KernelKind::SystematicGibbs => {
            let space = t.space();
            let mut m = StochasticMatrix::identity(space.clone());
            for &site in spec.site_order.as_deref().unwrap_or_default() {
                let g = StochasticMatrix::from_flat(space.clone(), site_matrix(t, site)?);
                m = m.compose(&g)?;
            }
            return Ok(m);
        }
    };
    Ok(StochasticMatrix::from_flat(t.space(), data))
}

fn site_matrix(t: &FiniteTarget, site: usize) -> Result<Vec<f64>> {
    let n = t.num_states();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let x = t.state_at(i);
        for (v, p) in t.conditional(site, &x)?.into_iter().enumerate() {
            let mut y = x.clone();
            y[site] = v;
            let j = t.index_of(&y).expect("in range");
            data[i * n + j] += p;
        }
    }
    Ok(data)
}
