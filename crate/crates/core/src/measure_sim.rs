//! Measure-level execution of a shared-memory asynchronous sampler.
//!
//! Given a kernel `P`, an initial distribution `mu_0` and a schedule, the
//! `k`-th written value has the exact law `mu_k = P(mu_j)` where `j` is the
//! event's `read_from`. Along the way we track
//!
//! * `d_k`: TV distance of `mu_k` to the stationary law,
//! * `d*_k`: the maximum of `d_j` over the trailing window `k-b < j <= k`,
//! * `p_k`: how many kernel applications produced `mu_k`,
//! * `p*_k`: the minimum of `p_j` over the same window,
//!
//! and [`verify_theorem4`] checks every inequality of the convergence
//! argument on the concrete trace.

use std::io::Write;

use num_rational::BigRational;
use num_traits::Zero;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::exact::{self, ExactDistribution, ExactMatrix};
use crate::measures::{
    apply_operator, stationary_distribution, tv_distance, FiniteDistribution, StochasticMatrix,
};
use crate::schedules::{Event, Schedule};

/// Slack on float comparisons of windowed maxima.
pub const MONOTONE_TOL: f64 = 1e-12;

/// Default bound on the final distance.
pub const CONVERGENCE_THRESHOLD: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct MeasureTrace {
    pub kernel: StochasticMatrix,
    pub pi: FiniteDistribution,
    pub schedule: Schedule,
    pub mus: Vec<FiniteDistribution>,
    pub d: Vec<f64>,
    pub d_star: Vec<f64>,
    pub p: Vec<u64>,
    pub p_star: Vec<u64>,
}

impl MeasureTrace {
    pub fn horizon(&self) -> usize {
        self.schedule.len()
    }

    pub fn final_distance(&self) -> f64 {
        *self.d.last().expect("trace holds mu_0")
    }

    /// One row per written value: `seq, worker, read_from, d_k, d_star_k, p_k, p_star_k`.
    /// Row 0 is the initial value and has empty worker/read_from cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            seq: u64,
            worker: Option<usize>,
            read_from: Option<u64>,
            d_k: f64,
            d_star_k: f64,
            p_k: u64,
            p_star_k: u64,
        }
        let mut w = csv::Writer::from_writer(out);
        for k in 0..self.d.len() {
            let event = k.checked_sub(1).map(|i| &self.schedule.events[i]);
            w.serialize(Row {
                seq: k as u64,
                worker: event.map(|e| e.worker),
                read_from: event.map(|e| e.read_from),
                d_k: self.d[k],
                d_star_k: self.d_star[k],
                p_k: self.p[k],
                p_star_k: self.p_star[k],
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Indices `j` with `k - b < j <= k` and `j >= 0`.
fn window(k: usize, b: u64) -> std::ops::RangeInclusive<usize> {
    let lo = (k as u64 + 1).saturating_sub(b) as usize;
    lo..=k
}

fn windowed<T: Copy>(values: &[T], b: u64, pick: impl Fn(T, T) -> T) -> Vec<T> {
    (0..values.len())
        .map(|k| {
            window(k, b)
                .map(|j| values[j])
                .reduce(&pick)
                .expect("window is never empty")
        })
        .collect()
}

/// Propagates `mu_0` through an admissible schedule.
pub fn propagate(
    kernel: &StochasticMatrix,
    mu0: &FiniteDistribution,
    schedule: &Schedule,
) -> Result<MeasureTrace> {
    schedule.validate().map_err(Error::Schedule)?;
    propagate_unchecked(kernel, mu0, schedule)
}

fn propagate_unchecked(
    kernel: &StochasticMatrix,
    mu0: &FiniteDistribution,
    schedule: &Schedule,
) -> Result<MeasureTrace> {
    let pi = stationary_distribution(kernel)?;
    let n = schedule.len();
    let mut mus = Vec::with_capacity(n + 1);
    let mut p = Vec::with_capacity(n + 1);
    if kernel.space() != mu0.space() {
        return Err(Error::Dimension {
            expected: kernel.n(),
            found: mu0.len(),
        });
    }
    mus.push(mu0.clone());
    p.push(0u64);
    for (i, e) in schedule.events.iter().enumerate() {
        let src = usize::try_from(e.read_from)
            .ok()
            .filter(|&j| j <= i)
            .ok_or_else(|| Error::Parameter(format!("event {} reads from the future", e.seq)))?;
        mus.push(apply_operator(kernel, &mus[src])?);
        p.push(p[src] + 1);
    }
    let d = mus
        .iter()
        .map(|mu| tv_distance(mu, &pi))
        .collect::<Result<Vec<_>>>()?;
    let b = schedule.staleness_bound;
    let d_star = windowed(&d, b, f64::max);
    let p_star = windowed(&p, b, u64::min);
    Ok(MeasureTrace {
        kernel: kernel.clone(),
        pi,
        schedule: schedule.clone(),
        mus,
        d,
        d_star,
        p,
        p_star,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `d*_{k+1} <= d*_k` for `k > b`.
    WindowMaxMonotone,
    /// `d*_{k+1}` equals the max of the shortened window and `d_{k+1}`.
    WindowSplit,
    /// `p*_k` is nondecreasing.
    DepthMonotone,
    /// `p*_N >= floor((N - b) / b) - 1`.
    DepthRate,
    /// `d*_k >= d_k`.
    Domination,
    /// `mu_k == P^{p_k}(mu_0)`.
    DepthConsistency,
    /// `d_N` below the threshold.
    Convergence,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremViolation {
    pub k: usize,
    pub check: Check,
    pub detail: String,
}

/// Point of the subsequence `l_k = argmax { p*_j : 0 < j < k }`, taking the
/// smallest maximizing index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsequencePoint {
    pub l: usize,
    pub p_star: u64,
    pub d_star: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProofReport {
    pub horizon: usize,
    pub bound: u64,
    pub final_distance: f64,
    pub threshold: f64,
    pub final_min_depth: u64,
    pub required_min_depth: i64,
    /// Distinct values of `l_k` in order of appearance.
    pub subsequence: Vec<SubsequencePoint>,
    pub violations: Vec<TheoremViolation>,
}

impl ProofReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn verify_theorem4(trace: &MeasureTrace) -> Result<ProofReport> {
    verify_theorem4_with(trace, CONVERGENCE_THRESHOLD)
}

pub fn verify_theorem4_with(trace: &MeasureTrace, threshold: f64) -> Result<ProofReport> {
    let n = trace.horizon();
    let b = trace.schedule.staleness_bound;
    let bu = b as usize;
    let d = &trace.d;
    let ds = &trace.d_star;
    let ps = &trace.p_star;
    let mut violations = Vec::new();
    let mut flag = |k: usize, check: Check, detail: String| {
        violations.push(TheoremViolation { k, check, detail })
    };

    for k in (bu + 1)..n {
        if ds[k + 1] > ds[k] + MONOTONE_TOL {
            flag(
                k,
                Check::WindowMaxMonotone,
                format!("d*_{} = {:e} > d*_{k} = {:e}", k + 1, ds[k + 1], ds[k]),
            );
        }
    }
    for k in 0..n {
        let lo = (k as u64 + 2).saturating_sub(b) as usize;
        let inner = (lo..=k).map(|j| d[j]).fold(f64::NEG_INFINITY, f64::max);
        let split = inner.max(d[k + 1]);
        if split != ds[k + 1] {
            flag(
                k,
                Check::WindowSplit,
                format!("split max {split:e} != d*_{} = {:e}", k + 1, ds[k + 1]),
            );
        }
    }
    for k in 0..n {
        if ps[k + 1] < ps[k] {
            flag(
                k,
                Check::DepthMonotone,
                format!("p*_{} = {} < p*_{k} = {}", k + 1, ps[k + 1], ps[k]),
            );
        }
    }
    let required = (n as i64 - b as i64).div_euclid(b as i64) - 1;
    if (ps[n] as i64) < required {
        flag(
            n,
            Check::DepthRate,
            format!("p*_N = {} below required {required}", ps[n]),
        );
    }
    for k in 0..=n {
        if ds[k] < d[k] {
            flag(
                k,
                Check::Domination,
                format!("d*_{k} = {:e} < d_{k} = {:e}", ds[k], d[k]),
            );
        }
    }

    // P^p(mu_0) for every depth that occurs.
    let max_depth = *trace.p.iter().max().expect("non-empty") as usize;
    let mut powers = Vec::with_capacity(max_depth + 1);
    powers.push(trace.mus[0].clone());
    for i in 0..max_depth {
        let next = apply_operator(&trace.kernel, &powers[i])?;
        powers.push(next);
    }
    for k in 0..=n {
        let gap = tv_distance(&trace.mus[k], &powers[trace.p[k] as usize])?;
        if gap > 1e-14 {
            flag(
                k,
                Check::DepthConsistency,
                format!("mu_{k} differs from P^{}(mu_0) by {gap:e}", trace.p[k]),
            );
        }
    }

    if d[n] > threshold {
        flag(
            n,
            Check::Convergence,
            format!("d_N = {:e} above threshold {threshold:e}", d[n]),
        );
    }

    let mut subsequence: Vec<SubsequencePoint> = Vec::new();
    let mut best: Option<usize> = None;
    for j in 1..n.max(1) {
        if best.is_none_or(|l| ps[j] > ps[l]) {
            best = Some(j);
            subsequence.push(SubsequencePoint {
                l: j,
                p_star: ps[j],
                d_star: ds[j],
            });
        }
    }

    Ok(ProofReport {
        horizon: n,
        bound: b,
        final_distance: d[n],
        threshold,
        final_min_depth: ps[n],
        required_min_depth: required,
        subsequence,
        violations,
    })
}

/// Runs a schedule that breaks "no worker dies": worker 0 writes fresh at
/// even `seq`, worker 1 keeps rewriting from the initial value at odd `seq`.
/// Odd writes therefore all have law `P(mu_0)` forever.
pub fn propagate_unbounded_counterexample(
    kernel: &StochasticMatrix,
    mu0: &FiniteDistribution,
    length: usize,
) -> Result<MeasureTrace> {
    if length < 10 {
        return Err(Error::Parameter(format!("length {length} is below 10")));
    }
    let pi = stationary_distribution(kernel)?;
    if tv_distance(mu0, &pi)? == 0.0 {
        return Err(Error::Inconclusive(
            "initial distribution is already stationary, nothing can fail to converge".into(),
        ));
    }
    let events = (1..=length as u64)
        .map(|k| {
            if k % 2 == 1 {
                Event::write(k, 1, 0)
            } else {
                Event::write(k, 0, k - 1)
            }
        })
        .collect();
    propagate_unchecked(kernel, mu0, &Schedule::new(events, 2, 2))
}

/// Exact-rational distances for the same recursion.
#[derive(Clone, Debug)]
pub struct ExactTrace {
    pub d: Vec<BigRational>,
    pub d_star: Vec<BigRational>,
    pub p: Vec<u64>,
}

pub fn propagate_exact(
    kernel: &ExactMatrix,
    mu0: &ExactDistribution,
    schedule: &Schedule,
) -> Result<ExactTrace> {
    schedule.validate().map_err(Error::Schedule)?;
    let pi = exact::stationary(kernel)?;
    let mut mus = vec![mu0.clone()];
    let mut p = vec![0u64];
    for e in &schedule.events {
        let src = e.read_from as usize;
        mus.push(exact::apply(kernel, &mus[src])?);
        p.push(p[src] + 1);
    }
    let d = mus
        .iter()
        .map(|mu| exact::tv(mu, &pi))
        .collect::<Result<Vec<_>>>()?;
    let b = schedule.staleness_bound;
    let d_star = (0..d.len())
        .map(|k| {
            window(k, b)
                .map(|j| &d[j])
                .fold(
                    BigRational::zero(),
                    |acc, x| if *x > acc { x.clone() } else { acc },
                )
        })
        .collect();
    Ok(ExactTrace { d, d_star, p })
}

impl ExactTrace {
    /// Windowed-maximum monotonicity (for `k > b`) and domination, with no slack.
    pub fn violations(&self, bound: u64) -> Vec<usize> {
        let n = self.d.len() - 1;
        let mut bad = Vec::new();
        for k in (bound as usize + 1)..n {
            if self.d_star[k + 1] > self.d_star[k] {
                bad.push(k);
            }
        }
        for k in 0..=n {
            if self.d_star[k] < self.d[k] {
                bad.push(k);
            }
        }
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::StateSpace;
    use crate::rng::stream;
    use crate::schedules::{adversarial_schedules, random_schedule, synchronous};

    fn kernel() -> StochasticMatrix {
        StochasticMatrix::new(
            StateSpace::indexed(3).unwrap(),
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.1, 0.6, 0.3],
                vec![0.3, 0.3, 0.4],
            ],
        )
        .unwrap()
    }

    fn point(n: usize) -> FiniteDistribution {
        FiniteDistribution::point_mass(StateSpace::indexed(n).unwrap(), 0).unwrap()
    }

    #[test]
    fn synchronous_schedule_is_iterated_application() {
        let p = kernel();
        let trace = propagate(&p, &point(3), &synchronous(1, 30)).unwrap();
        let mut mu = point(3);
        for k in 0..=30 {
            assert_eq!(trace.mus[k], mu);
            assert_eq!(trace.p[k], k as u64);
            mu = apply_operator(&p, &mu).unwrap();
        }
    }

    #[test]
    fn stationary_start_stays_put() {
        let p = kernel();
        let pi = stationary_distribution(&p).unwrap();
        let mut rng = stream(2, 0);
        let s = random_schedule(2, 4, 60, &mut rng).unwrap();
        let trace = propagate(&p, &pi, &s).unwrap();
        assert!(trace.d.iter().all(|&d| d < 1e-10));
        let report = verify_theorem4(&trace).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
    }

    #[test]
    fn synchronous_window_max_is_max_of_last_b() {
        let p = kernel();
        let mut s = synchronous(1, 40);
        s.staleness_bound = 3;
        let trace = propagate(&p, &point(3), &s).unwrap();
        for k in 2..=40 {
            let expected = trace.d[k - 2..=k].iter().cloned().fold(0.0, f64::max);
            assert_eq!(trace.d_star[k], expected);
        }
        assert!(verify_theorem4(&trace).unwrap().passed());
    }

    #[test]
    fn random_schedule_seed_11_converges() {
        let p = kernel();
        let mut rng = stream(11, 0);
        let s = random_schedule(3, 4, 500, &mut rng).unwrap();
        let trace = propagate(&p, &point(3), &s).unwrap();
        assert!(trace.final_distance() <= 1e-8);
        let direct = apply_operator(&p.pow(trace.p[500]), &point(3)).unwrap();
        assert!(tv_distance(&direct, &trace.mus[500]).unwrap() < 1e-12);
        let report = verify_theorem4(&trace).unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert!(!report.subsequence.is_empty());
    }

    #[test]
    fn adversarial_schedules_pass() {
        let p = kernel();
        for named in adversarial_schedules(3, 6, 300).unwrap() {
            let trace = propagate(&p, &point(3), &named.schedule).unwrap();
            let report = verify_theorem4(&trace).unwrap();
            assert!(report.passed(), "{}: {:?}", named.name, report.violations);
        }
    }

    #[test]
    fn invalid_schedule_is_refused() {
        let mut s = synchronous(2, 10);
        s.events[5].read_from = 0;
        assert!(matches!(
            propagate(&kernel(), &point(3), &s),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn tampered_trace_is_caught() {
        let p = kernel();
        let mut trace = propagate(&p, &point(3), &synchronous(1, 50)).unwrap();
        trace.d_star[20] = 0.0;
        let report = verify_theorem4(&trace).unwrap();
        assert!(report
            .violations
            .iter()
            .any(|v| v.check == Check::Domination && v.k == 20));
        assert!(report
            .violations
            .iter()
            .any(|v| v.check == Check::WindowMaxMonotone));
    }

    #[test]
    fn frozen_worker_keeps_odd_writes_away() {
        let p = StochasticMatrix::new(
            StateSpace::indexed(2).unwrap(),
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
        )
        .unwrap();
        let trace = propagate_unbounded_counterexample(&p, &point(2), 100).unwrap();
        assert!(trace.schedule.validate().is_err());
        for k in (51..=99).step_by(2) {
            assert_eq!(trace.d[k], trace.d[1]);
        }
        assert!(matches!(
            propagate(&p, &point(2), &trace.schedule),
            Err(Error::Schedule(_))
        ));

        let pi = stationary_distribution(&p).unwrap();
        assert!(matches!(
            propagate_unbounded_counterexample(&p, &pi, 100),
            Err(Error::Inconclusive(_))
        ));
    }

    #[test]
    fn exact_trace_matches_float_trace() {
        let em = ExactMatrix::from_integer_weights(&[vec![5, 3, 2], vec![1, 6, 3], vec![3, 3, 4]])
            .unwrap();
        let fm = em.to_float(StateSpace::indexed(3).unwrap()).unwrap();
        let mut rng = stream(5, 0);
        let s = random_schedule(2, 3, 60, &mut rng).unwrap();
        let et = propagate_exact(&em, &ExactDistribution::point_mass(3, 0), &s).unwrap();
        let ft = propagate(&fm, &point(3), &s).unwrap();
        assert!(et.violations(3).is_empty());
        for (e, f) in et.d.iter().zip(&ft.d) {
            assert!((exact::to_f64(e) - f).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_columns() {
        let trace = propagate(&kernel(), &point(3), &synchronous(1, 2)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seq,worker,read_from,d_k,d_star_k,p_k,p_star_k"
        );
        assert!(lines.next().unwrap().starts_with("0,,,"));
        assert!(lines.next().unwrap().starts_with("1,0,0,"));
    }
}
