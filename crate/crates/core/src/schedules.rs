//! Asynchronous executions as data.
//!
//! A [`Schedule`] is the global write order of an execution. Event `seq = k`
//! produces the `k`-th written value by applying the kernel to the value
//! written at `read_from`; the initial value occupies `seq = 0` and has no
//! event. Two constraints make a schedule admissible:
//!
//! * bounded staleness: `seq - read_from <= b` for every event;
//! * no worker dies: once at least `b` events exist, every window of `b`
//!   consecutive events contains a write from every worker.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Write,
    ServerCommit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub worker: usize,
    pub read_from: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<bool>,
}

impl Event {
    pub fn write(seq: u64, worker: usize, read_from: u64) -> Self {
        Event {
            seq,
            worker,
            read_from,
            kind: EventKind::Write,
            accepted: None,
        }
    }

    pub fn staleness(&self) -> u64 {
        self.seq.saturating_sub(self.read_from)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub events: Vec<Event>,
    pub workers: usize,
    pub staleness_bound: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "invariant", rename_all = "snake_case")]
pub enum ViolationKind {
    /// Events must carry `seq = 1, 2, ...` in order.
    NonConsecutiveSeq {
        expected: u64,
    },
    /// `read_from` must name an earlier write.
    ReadFromFuture {
        read_from: u64,
    },
    WorkerOutOfRange {
        worker: usize,
    },
    StalenessExceeded {
        staleness: u64,
        bound: u64,
    },
    /// `worker` has no write in the window of `bound` events ending at `seq`.
    WorkerSilent {
        worker: usize,
        last_write: u64,
        bound: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::NonConsecutiveSeq { expected } => {
                write!(f, "seq {}: expected seq {expected}", self.seq)
            }
            ViolationKind::ReadFromFuture { read_from } => {
                write!(f, "seq {}: reads from later write {read_from}", self.seq)
            }
            ViolationKind::WorkerOutOfRange { worker } => {
                write!(f, "seq {}: worker {worker} out of range", self.seq)
            }
            ViolationKind::StalenessExceeded { staleness, bound } => write!(
                f,
                "seq {}: staleness {staleness} exceeds bound {bound}",
                self.seq
            ),
            ViolationKind::WorkerSilent {
                worker,
                last_write,
                bound,
            } => write!(
                f,
                "seq {}: worker {worker} silent since seq {last_write} (window {bound}), no worker dies violated",
                self.seq
            ),
        }
    }
}

impl Schedule {
    pub fn new(events: Vec<Event>, workers: usize, staleness_bound: u64) -> Self {
        Schedule {
            events,
            workers,
            staleness_bound,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn max_staleness(&self) -> u64 {
        self.events.iter().map(Event::staleness).max().unwrap_or(0)
    }

    /// Smallest bound under which this event list validates.
    pub fn tightest_bound(&self) -> u64 {
        let n = self.events.len() as u64;
        let mut last = vec![0u64; self.workers];
        let mut bound = self.max_staleness().max(1);
        for e in &self.events {
            if let Some(l) = last.get_mut(e.worker) {
                bound = bound.max(e.seq - *l);
                *l = e.seq;
            }
        }
        for &l in &last {
            bound = bound.max(n - l + 1);
        }
        // A bound above the trace length leaves no full window to check.
        bound.min(n + 1).max(self.max_staleness()).max(1)
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        validate(self)
    }

    pub fn to_jsonl<W: Write>(&self, out: W) -> Result<()> {
        write_jsonl(&self.events, out)
    }

    pub fn from_jsonl<R: BufRead>(input: R, workers: usize, staleness_bound: u64) -> Result<Self> {
        Ok(Schedule::new(read_jsonl(input)?, workers, staleness_bound))
    }
}

pub fn write_jsonl<W: Write>(events: &[Event], mut out: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line)?);
    }
    Ok(events)
}

/// Checks both schedule invariants, reporting the first offending event.
pub fn validate(s: &Schedule) -> std::result::Result<(), Violation> {
    let b = s.staleness_bound;
    let mut last = vec![0u64; s.workers];
    for (i, e) in s.events.iter().enumerate() {
        let expected = i as u64 + 1;
        if e.seq != expected {
            return Err(Violation {
                seq: e.seq,
                kind: ViolationKind::NonConsecutiveSeq { expected },
            });
        }
        if e.read_from >= e.seq {
            return Err(Violation {
                seq: e.seq,
                kind: ViolationKind::ReadFromFuture {
                    read_from: e.read_from,
                },
            });
        }
        if e.worker >= s.workers {
            return Err(Violation {
                seq: e.seq,
                kind: ViolationKind::WorkerOutOfRange { worker: e.worker },
            });
        }
        if e.staleness() > b {
            return Err(Violation {
                seq: e.seq,
                kind: ViolationKind::StalenessExceeded {
                    staleness: e.staleness(),
                    bound: b,
                },
            });
        }
        last[e.worker] = e.seq;
        if e.seq >= b {
            if let Some((w, &l)) = last.iter().enumerate().find(|(_, &l)| e.seq - l >= b) {
                return Err(Violation {
                    seq: e.seq,
                    kind: ViolationKind::WorkerSilent {
                        worker: w,
                        last_write: l,
                        bound: b,
                    },
                });
            }
        }
    }
    Ok(())
}

fn check_params(m: usize, b: u64, length: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    if b == 0 {
        return Err(Error::Parameter(
            "staleness bound must be at least 1".into(),
        ));
    }
    if b < m as u64 {
        return Err(Error::Parameter(format!(
            "bound {b} is smaller than {m} workers: no schedule keeps every worker alive in every window"
        )));
    }
    if (length as u64) < b {
        return Err(Error::Parameter(format!(
            "length {length} is shorter than the bound {b}"
        )));
    }
    Ok(())
}

/// Every event reads the previous write; workers take turns.
pub fn synchronous(m: usize, length: usize) -> Schedule {
    let events = (1..=length as u64)
        .map(|k| Event::write(k, ((k - 1) % m as u64) as usize, k - 1))
        .collect();
    Schedule::new(events, m, m as u64)
}

/// A random admissible schedule.
///
/// Writers are picked uniformly unless some worker's deadline is tight, in
/// which case the earliest-deadline worker writes. Reads are fresh with
/// probability 1/4, maximally stale with probability 1/4 and uniform over
/// the admissible window otherwise.
pub fn random_schedule<R: Rng + ?Sized>(
    m: usize,
    b: u64,
    length: usize,
    rng: &mut R,
) -> Result<Schedule> {
    check_params(m, b, length)?;
    let mut deadline = vec![b; m];
    let mut events = Vec::with_capacity(length);
    let mut order: Vec<usize> = (0..m).collect();
    for k in 1..=length as u64 {
        order.sort_by_key(|&w| (deadline[w], w));
        let tight = order
            .iter()
            .enumerate()
            .any(|(i, &w)| deadline[w] <= k + i as u64);
        let worker = if tight {
            order[0]
        } else {
            rng.random_range(0..m)
        };
        deadline[worker] = k + b;

        let oldest = k.saturating_sub(b);
        let read_from = match rng.random_range(0..4u8) {
            0 => k - 1,
            1 => oldest,
            _ => rng.random_range(oldest..k),
        };
        events.push(Event::write(k, worker, read_from));
    }
    Ok(Schedule::new(events, m, b))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedSchedule {
    pub name: &'static str,
    pub schedule: Schedule,
}

/// Extreme admissible schedules:
///
/// * `always_maximally_stale`: round robin, every read as old as allowed;
/// * `single_worker_dominant`: worker 0 owns all but `m - 1` slots of every
///   block of `b`, reading fresh, while the others read maximally stale;
/// * `alternating_window`: round robin alternating fresh and maximally stale
///   reads, so consecutive arrows cross.
pub fn adversarial_schedules(m: usize, b: u64, length: usize) -> Result<Vec<NamedSchedule>> {
    check_params(m, b, length)?;
    let max_stale = |k: u64| k - k.min(b);
    let round_robin = |k: u64| ((k - 1) % m as u64) as usize;

    let stale = (1..=length as u64)
        .map(|k| Event::write(k, round_robin(k), max_stale(k)))
        .collect();

    let others = m as u64 - 1;
    let dominant = (1..=length as u64)
        .map(|k| {
            let slot = (k - 1) % b;
            let first_other = b - others;
            if slot < first_other {
                Event::write(k, 0, k - 1)
            } else {
                Event::write(k, (slot - first_other + 1) as usize, max_stale(k))
            }
        })
        .collect();

    let alternating = (1..=length as u64)
        .map(|k| {
            let read = if k % 2 == 0 { k - 1 } else { max_stale(k) };
            Event::write(k, round_robin(k), read)
        })
        .collect();

    Ok(vec![
        NamedSchedule {
            name: "always_maximally_stale",
            schedule: Schedule::new(stale, m, b),
        },
        NamedSchedule {
            name: "single_worker_dominant",
            schedule: Schedule::new(dominant, m, b),
        },
        NamedSchedule {
            name: "alternating_window",
            schedule: Schedule::new(alternating, m, b),
        },
    ])
}
