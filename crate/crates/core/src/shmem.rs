//! Workers sharing one atomically swapped state cell.
//!
//! [`run_async`] races real threads; [`replay`] executes the same
//! read/step/write loop single-threaded under a prescribed schedule.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Barrier};
use std::thread;

use arc_swap::{ArcSwap, Guard};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelSpec, State};
use crate::rng::worker_stream;
use crate::schedules::{Event, Schedule};

/// An immutable snapshot together with the write that produced it.
#[derive(Debug, PartialEq)]
pub struct Versioned<T> {
    pub version: u64,
    pub value: T,
}

/// A cell whose (version, value) pair is read and replaced as one unit.
pub struct SharedCell<T> {
    inner: ArcSwap<Versioned<T>>,
}

impl<T> SharedCell<T> {
    pub fn new(value: T) -> Self {
        SharedCell {
            inner: ArcSwap::from_pointee(Versioned { version: 0, value }),
        }
    }

    pub fn read(&self) -> Arc<Versioned<T>> {
        self.inner.load_full()
    }

    pub fn version(&self) -> u64 {
        self.inner.load().version
    }

    /// Installs `value` as the next version and returns that version.
    pub fn write(&self, value: T) -> u64 {
        self.write_bounded(value, u64::MAX)
            .expect("version counter exhausted")
    }

    /// Like [`write`](Self::write), but refuses once `limit` versions exist.
    pub fn write_bounded(&self, value: T, limit: u64) -> Option<u64> {
        let mut current = self.inner.load_full();
        if current.version >= limit {
            return None;
        }
        let mut next = Arc::new(Versioned {
            version: current.version + 1,
            value,
        });
        loop {
            let prev = self.inner.compare_and_swap(&current, Arc::clone(&next));
            if Arc::ptr_eq(&*prev, &current) {
                return Some(next.version);
            }
            current = Guard::into_inner(prev);
            if current.version >= limit {
                return None;
            }
            // The failed swap dropped its reference, so `next` is unique.
            Arc::get_mut(&mut next)
                .expect("rejected snapshot is still shared")
                .version = current.version + 1;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pacing {
    /// No explicit yields; interleaving is left to the OS scheduler.
    Free,
    /// Yield the processor after every write.
    #[default]
    YieldAfterWrite,
    /// Yield between the read and the write, which widens staleness.
    YieldBetween,
}

#[derive(Clone, Debug)]
pub struct AsyncOptions {
    pub workers: usize,
    pub horizon: u64,
    pub seed: u64,
    /// Staleness and silence bound enforced at run time.
    pub watchdog: u64,
    pub pacing: Pacing,
    pub initial: Option<State>,
}

impl AsyncOptions {
    pub fn new(workers: usize, horizon: u64, seed: u64, watchdog: u64) -> Self {
        AsyncOptions {
            workers,
            horizon,
            seed,
            watchdog,
            pacing: Pacing::default(),
            initial: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub kernel: String,
    pub workers: usize,
    pub seed: u64,
    pub horizon: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRow {
    pub seq: u64,
    pub worker: usize,
    pub state: State,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub trace: Schedule,
    /// The initial state followed by every written state, in write order.
    pub initial: State,
    pub samples: Vec<SampleRow>,
    pub config: RunConfig,
}

impl RunRecord {
    /// States written after discarding the leading `fraction` of writes.
    pub fn late_states(&self, fraction: f64) -> impl Iterator<Item = &State> {
        let skip = (self.samples.len() as f64 * fraction.clamp(0.0, 1.0)) as usize;
        self.samples[skip..].iter().map(|s| &s.state)
    }

    pub fn write_samples_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seq", "worker", "state"])?;
        w.write_record(["0", "", &self.initial.label()])?;
        for s in &self.samples {
            w.write_record([s.seq.to_string(), s.worker.to_string(), s.state.label()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn kernel_id(kernel: &KernelSpec) -> String {
    match kernel.proposal() {
        Some(p) => format!("{:?}/{p:?}", kernel.kind()),
        None => format!("{:?}", kernel.kind()),
    }
}

fn check_run_params(kernel: &KernelSpec, workers: usize, horizon: u64, x0: &State) -> Result<()> {
    if workers == 0 {
        return Err(Error::Parameter("need at least one worker".into()));
    }
    if horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    if x0.dim() != kernel.target().dim() {
        return Err(Error::Dimension {
            expected: kernel.target().dim(),
            found: x0.dim(),
        });
    }
    if kernel.target().log_unnorm(x0) == f64::NEG_INFINITY {
        return Err(Error::Precondition(format!(
            "initial state {} is outside the target support",
            x0.label()
        )));
    }
    Ok(())
}

struct WriteNote {
    seq: u64,
    worker: usize,
    read_from: u64,
    state: State,
}

/// Checks written events in seq order against the staleness and silence
/// bounds, the same two conditions [`crate::schedules::validate`] enforces.
struct Watchdog {
    bound: u64,
    last: Vec<u64>,
}

impl Watchdog {
    fn observe(&mut self, e: &Event) -> Result<()> {
        if e.staleness() > self.bound {
            return Err(Error::Liveness(format!(
                "worker {} wrote seq {} from a read of version {}: staleness {} exceeds {}",
                e.worker,
                e.seq,
                e.read_from,
                e.staleness(),
                self.bound
            )));
        }
        self.last[e.worker] = e.seq;
        if e.seq >= self.bound {
            if let Some((w, &l)) = self
                .last
                .iter()
                .enumerate()
                .find(|(_, &l)| e.seq - l >= self.bound)
            {
                return Err(Error::Liveness(format!(
                    "worker {w} silent over writes {}..={} (last write {l}, bound {})",
                    l + 1,
                    e.seq,
                    self.bound
                )));
            }
        }
        Ok(())
    }
}

/// Runs `opts.workers` threads, each looping read, step, write against one
/// shared cell until `opts.horizon` writes exist.
pub fn run_async(kernel: &KernelSpec, opts: &AsyncOptions) -> Result<RunRecord> {
    let x0 = opts
        .initial
        .clone()
        .unwrap_or_else(|| kernel.target().default_state());
    check_run_params(kernel, opts.workers, opts.horizon, &x0)?;
    if opts.watchdog == 0 {
        return Err(Error::Parameter("watchdog bound must be at least 1".into()));
    }
    let m = opts.workers;
    let cell = SharedCell::new(x0.clone());
    let abort = AtomicBool::new(false);
    let failure: std::sync::Mutex<Option<Error>> = std::sync::Mutex::new(None);
    let barrier = Barrier::new(m);
    let (tx, rx) = mpsc::channel::<WriteNote>();

    let fail = |e: Error| {
        abort.store(true, Ordering::SeqCst);
        failure.lock().unwrap().get_or_insert(e);
    };

    let mut notes: Vec<WriteNote> = Vec::with_capacity(opts.horizon as usize);
    thread::scope(|scope| {
        for worker in 0..m {
            let tx = tx.clone();
            let (cell, abort, barrier, fail) = (&cell, &abort, &barrier, &fail);
            scope.spawn(move || {
                let mut rng = worker_stream(opts.seed, worker);
                barrier.wait();
                while !abort.load(Ordering::Relaxed) {
                    let snap = cell.read();
                    if snap.version >= opts.horizon {
                        break;
                    }
                    if opts.pacing == Pacing::YieldBetween {
                        thread::yield_now();
                    }
                    let step = match kernel.step(&snap.value, &mut rng) {
                        Ok(s) => s,
                        Err(e) => {
                            fail(e);
                            break;
                        }
                    };
                    let Some(seq) = cell.write_bounded(step.state.clone(), opts.horizon) else {
                        break;
                    };
                    let note = WriteNote {
                        seq,
                        worker,
                        read_from: snap.version,
                        state: step.state,
                    };
                    if tx.send(note).is_err() {
                        break;
                    }
                    if opts.pacing != Pacing::Free {
                        thread::yield_now();
                    }
                }
            });
        }
        drop(tx);

        // Recorder: restores write order and runs the watchdog on it.
        let mut dog = Watchdog {
            bound: opts.watchdog,
            last: vec![0; m],
        };
        let mut pending = BTreeMap::new();
        let mut next = 1u64;
        for note in rx {
            pending.insert(note.seq, note);
            while let Some(note) = pending.remove(&next) {
                let e = Event::write(note.seq, note.worker, note.read_from);
                if let Err(err) = dog.observe(&e) {
                    fail(err);
                }
                notes.push(note);
                next += 1;
            }
        }
    });

    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    if notes.len() as u64 != opts.horizon {
        return Err(Error::Protocol(format!(
            "recorded {} of {} writes",
            notes.len(),
            opts.horizon
        )));
    }
    let events = notes
        .iter()
        .map(|n| Event::write(n.seq, n.worker, n.read_from))
        .collect();
    let mut trace = Schedule::new(events, m, opts.watchdog);
    trace.staleness_bound = trace.tightest_bound();
    let samples = notes
        .into_iter()
        .map(|n| SampleRow {
            seq: n.seq,
            worker: n.worker,
            state: n.state,
        })
        .collect();
    Ok(RunRecord {
        trace,
        initial: x0,
        samples,
        config: RunConfig {
            kernel: kernel_id(kernel),
            workers: m,
            seed: opts.seed,
            horizon: opts.horizon,
        },
    })
}

/// Executes the schedule deterministically: event `k` steps the state
/// written at `read_from` using its worker's stream and writes version `k`.
pub fn replay(
    kernel: &KernelSpec,
    s: &Schedule,
    seed: u64,
    initial: Option<State>,
) -> Result<RunRecord> {
    s.validate().map_err(Error::Schedule)?;
    let x0 = initial.unwrap_or_else(|| kernel.target().default_state());
    check_run_params(kernel, s.workers, s.len().max(1) as u64, &x0)?;
    let mut rngs: Vec<_> = (0..s.workers).map(|w| worker_stream(seed, w)).collect();
    let mut samples: Vec<SampleRow> = Vec::with_capacity(s.len());
    for e in &s.events {
        let read = match e.read_from {
            0 => &x0,
            r => &samples[r as usize - 1].state,
        };
        let step = kernel.step(read, &mut rngs[e.worker])?;
        samples.push(SampleRow {
            seq: e.seq,
            worker: e.worker,
            state: step.state,
        });
    }
    Ok(RunRecord {
        trace: s.clone(),
        initial: x0,
        samples,
        config: RunConfig {
            kernel: kernel_id(kernel),
            workers: s.workers,
            seed,
            horizon: s.len() as u64,
        },
    })
}

/// A structured value whose integrity can be checked after a read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChecksumState {
    pub payload: [u64; 8],
    pub checksum: u64,
}

impl ChecksumState {
    pub fn new(payload: [u64; 8]) -> Self {
        ChecksumState {
            checksum: Self::digest(&payload),
            payload,
        }
    }

    fn digest(payload: &[u64; 8]) -> u64 {
        let mut h = DefaultHasher::new();
        payload.hash(&mut h);
        h.finish()
    }

    pub fn is_intact(&self) -> bool {
        self.checksum == Self::digest(&self.payload)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TornStateReport {
    pub threads: usize,
    pub operations: u64,
    pub reads: u64,
    pub writes: u64,
    pub checksum_failures: u64,
    /// Reads that observed a version older than one the same thread saw
    /// before.
    pub version_regressions: u64,
}

/// Hammers a shared cell with concurrent reads and writes of checksummed
/// values until `operations` operations have run in total.
pub fn torn_state_stress(threads: usize, operations: u64, seed: u64) -> Result<TornStateReport> {
    if threads == 0 {
        return Err(Error::Parameter("need at least one thread".into()));
    }
    let cell = SharedCell::new(ChecksumState::new([0; 8]));
    let reads = AtomicU64::new(0);
    let writes = AtomicU64::new(0);
    let failures = AtomicU64::new(0);
    let regressions = AtomicU64::new(0);
    let barrier = Barrier::new(threads);
    let per_thread = operations.div_ceil(threads as u64);
    thread::scope(|scope| {
        for t in 0..threads {
            let (cell, reads, writes, failures, regressions, barrier) =
                (&cell, &reads, &writes, &failures, &regressions, &barrier);
            scope.spawn(move || {
                let mut rng = worker_stream(seed, t);
                let mut seen = 0u64;
                let (mut r, mut w, mut f, mut g) = (0u64, 0u64, 0u64, 0u64);
                barrier.wait();
                let mut done = 0u64;
                while done < per_thread {
                    let snap = cell.read();
                    r += 1;
                    if !snap.value.is_intact() {
                        f += 1;
                    }
                    if snap.version < seen {
                        g += 1;
                    }
                    seen = snap.version;
                    done += 1;
                    if done < per_thread && rng.random_bool(0.5) {
                        let mut payload = snap.value.payload;
                        for p in payload.iter_mut() {
                            *p = p.wrapping_add(rng.random());
                        }
                        cell.write(ChecksumState::new(payload));
                        w += 1;
                        done += 1;
                    }
                    if done % 64 == 0 {
                        thread::yield_now();
                    }
                }
                reads.fetch_add(r, Ordering::Relaxed);
                writes.fetch_add(w, Ordering::Relaxed);
                failures.fetch_add(f, Ordering::Relaxed);
                regressions.fetch_add(g, Ordering::Relaxed);
            });
        }
    });
    let reads = reads.into_inner();
    let writes = writes.into_inner();
    Ok(TornStateReport {
        threads,
        operations: reads + writes,
        reads,
        writes,
        checksum_failures: failures.into_inner(),
        version_regressions: regressions.into_inner(),
    })
}
