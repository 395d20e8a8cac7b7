//! Discrete-event simulation of a parameter server running asynchronous MCMC.
//!
//! Workers read the server state, draw a proposal from it and send the
//! result back through a simulated network. The server scores each message
//! against its current state with a Metropolis-Hastings correction, or, in
//! naive mode, applies every update unconditionally.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::diagnostics::Samples;
use crate::error::{Error, Result};
use crate::kernels::{
    FiniteTarget, GaussianTarget, KernelKind, KernelSpec, Proposal, State, Target,
};
use crate::measures::StochasticMatrix;
use crate::rng::{stream, worker_stream, StreamRng, NETWORK_STREAM, SERVER_STREAM};
use crate::schedules::{Event, EventKind, Schedule};

/// Relative tolerance for checking shipped densities against the target.
const REVALIDATE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayKind {
    /// Every message takes exactly `latency` ticks; delivery is FIFO.
    FifoFixed { latency: u64 },
    /// Geometric latency with the given mean, but never overtaking an
    /// earlier message.
    FifoRandom { mean_latency: f64 },
    /// Geometric latency with the given mean and random tie order, so
    /// messages may arrive out of send order.
    ReorderRandom { mean_latency: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    #[serde(flatten)]
    pub kind: DelayKind,
    /// Largest allowed (server version at receipt - read version).
    pub staleness_cap: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            kind: DelayKind::FifoRandom { mean_latency: 2.0 },
            staleness_cap: 16,
        }
    }
}

impl DelayModel {
    pub fn instantaneous() -> Self {
        DelayModel {
            kind: DelayKind::FifoFixed { latency: 0 },
            staleness_cap: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            DelayKind::FifoFixed { .. } => Ok(()),
            DelayKind::FifoRandom { mean_latency } | DelayKind::ReorderRandom { mean_latency } => {
                if mean_latency.is_finite() && mean_latency >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!(
                        "mean latency {mean_latency} must be finite and non-negative"
                    )))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerMode {
    #[default]
    MhCorrected,
    NaiveAccept,
}

/// Proposal families the server can evaluate, looked up by id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalRegistry {
    proposals: Vec<Proposal>,
}

impl ProposalRegistry {
    pub fn register(&mut self, p: Proposal) -> usize {
        match self.proposals.iter().position(|q| *q == p) {
            Some(i) => i,
            None => {
                self.proposals.push(p);
                self.proposals.len() - 1
            }
        }
    }

    pub fn get(&self, id: usize) -> Result<&Proposal> {
        self.proposals
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("proposal id {id} is not registered")))
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub state: State,
    pub log_density: f64,
    /// Accepted messages.
    pub commit_count: u64,
    /// Received messages, accepted or not.
    pub version: u64,
}

impl ServerState {
    pub fn new(target: &Target, state: State) -> Result<Self> {
        let log_density = target.log_unnorm(&state);
        if log_density == f64::NEG_INFINITY {
            return Err(Error::Precondition(format!(
                "initial state {} is outside the target support",
                state.label()
            )));
        }
        Ok(ServerState {
            state,
            log_density,
            commit_count: 0,
            version: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerMessage {
    pub worker: usize,
    pub read_version: u64,
    pub x: State,
    pub x_star: State,
    pub log_pi_x_star: f64,
    /// `log f(x_star | x)`.
    pub log_f_forward: f64,
    pub proposal_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Receipt {
    pub accepted: bool,
    /// Log acceptance ratio; absent in naive mode.
    pub log_ratio: Option<f64>,
}

/// Log of `pi(x*) f(x_s | x) / (pi(x_s) f(x* | x))`, with any zero factor in
/// the numerator giving negative infinity.
pub fn server_log_ratio(
    target: &Target,
    proposal: &Proposal,
    server: &ServerState,
    msg: &ServerMessage,
) -> Result<f64> {
    if msg.log_pi_x_star == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let log_f_back = proposal.log_density(target, &server.state, &msg.x)?;
    if log_f_back == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let r = msg.log_pi_x_star + log_f_back - server.log_density - msg.log_f_forward;
    if r.is_nan() {
        return Err(Error::Numeric(format!(
            "acceptance ratio is NaN for message from worker {}",
            msg.worker
        )));
    }
    Ok(r)
}

/// The server's response to one message. Draws exactly one uniform.
pub fn server_receive<R: Rng + ?Sized>(
    st: &mut ServerState,
    msg: &ServerMessage,
    target: &Target,
    registry: &ProposalRegistry,
    mode: ServerMode,
    rng: &mut R,
) -> Result<Receipt> {
    let proposal = registry.get(msg.proposal_id)?;
    if msg.read_version > st.version {
        return Err(Error::Protocol(format!(
            "message read version {} is ahead of server version {}",
            msg.read_version, st.version
        )));
    }
    let u: f64 = rng.random();
    let receipt = match mode {
        ServerMode::MhCorrected => {
            let r = server_log_ratio(target, proposal, st, msg)?;
            let accepted = r >= 0.0 || u.ln() < r;
            if accepted {
                st.state = msg.x_star.clone();
                st.log_density = msg.log_pi_x_star;
            }
            Receipt {
                accepted,
                log_ratio: Some(r),
            }
        }
        ServerMode::NaiveAccept => {
            st.state = apply_update(&st.state, &msg.x, &msg.x_star);
            st.log_density = target.log_unnorm(&st.state);
            Receipt {
                accepted: true,
                log_ratio: None,
            }
        }
    };
    st.version += 1;
    if receipt.accepted {
        st.commit_count += 1;
    }
    Ok(receipt)
}

/// Naive update: real coordinates receive the worker's increment
/// `x* - x`; discrete coordinates the worker changed are overwritten.
pub fn apply_update(server: &State, x: &State, x_star: &State) -> State {
    match (server, x, x_star) {
        (State::Continuous(s), State::Continuous(a), State::Continuous(b)) => State::Continuous(
            s.iter()
                .zip(a.iter().zip(b))
                .map(|(s, (a, b))| s + (b - a))
                .collect(),
        ),
        (State::Discrete(s), State::Discrete(a), State::Discrete(b)) => State::Discrete(
            s.iter()
                .zip(a.iter().zip(b))
                .map(|(s, (a, b))| if a == b { *s } else { *b })
                .collect(),
        ),
        _ => x_star.clone(),
    }
}

/// How workers turn a read into a proposal.
#[derive(Clone, Debug)]
struct WorkerPlan {
    kind: KernelKind,
    ids: Vec<usize>,
    order: Vec<usize>,
}

impl WorkerPlan {
    fn new(kernel: &KernelSpec, registry: &mut ProposalRegistry) -> Self {
        let dim = kernel.target().dim();
        match kernel.kind() {
            KernelKind::MetropolisHastings => WorkerPlan {
                kind: KernelKind::MetropolisHastings,
                ids: vec![
                    registry.register(kernel.proposal().cloned().unwrap_or(Proposal::Identity))
                ],
                order: Vec::new(),
            },
            kind => WorkerPlan {
                kind,
                ids: (0..dim)
                    .map(|site| registry.register(Proposal::GibbsSite { site }))
                    .collect(),
                order: kernel
                    .site_order()
                    .map_or_else(|| (0..dim).collect(), <[usize]>::to_vec),
            },
        }
    }

    /// Proposal id for a worker's `k`-th message.
    fn pick(&self, k: u64, rng: &mut StreamRng) -> usize {
        match self.kind {
            KernelKind::MetropolisHastings => self.ids[0],
            KernelKind::GibbsSingleSite => self.ids[rng.random_range(0..self.ids.len())],
            KernelKind::SystematicGibbs => {
                self.ids[self.order[(k % self.order.len() as u64) as usize]]
            }
        }
    }
}

/// The product target with `m` independent copies of `target`.
pub fn coupled_embed(target: &Target, m: usize) -> Result<Target> {
    if m == 0 {
        return Err(Error::Parameter("need at least one replica".into()));
    }
    if m == 1 {
        return Ok(target.clone());
    }
    match target {
        Target::Finite(t) => {
            let n = t.num_states();
            let total = (0..m).try_fold(1usize, |acc, _| acc.checked_mul(n));
            let total = match total {
                Some(s) if s <= crate::kernels::DEFAULT_RENDER_CAP * 1024 => s,
                _ => {
                    return Err(Error::Size {
                        size: total.unwrap_or(usize::MAX),
                        cap: crate::kernels::DEFAULT_RENDER_CAP * 1024,
                    })
                }
            };
            let sizes: Vec<usize> = (0..m)
                .flat_map(|_| t.site_sizes().iter().copied())
                .collect();
            let logw = (0..total)
                .map(|i| {
                    let mut rest = i;
                    let mut acc = 0.0;
                    let mut parts = Vec::with_capacity(m);
                    for _ in 0..m {
                        parts.push(rest % n);
                        rest /= n;
                    }
                    for p in parts.into_iter().rev() {
                        acc += t.log_weights()[p];
                    }
                    acc
                })
                .collect();
            Ok(Target::Finite(FiniteTarget::new(sizes, logw)?))
        }
        Target::Gaussian(g) => {
            let d = g.dim();
            let prec = g.precision();
            let mut big = vec![vec![0.0; d * m]; d * m];
            for r in 0..m {
                for i in 0..d {
                    for j in 0..d {
                        big[r * d + i][r * d + j] = prec[i][j];
                    }
                }
            }
            let mean = (0..m).flat_map(|_| g.mean().iter().copied()).collect();
            Ok(Target::Gaussian(GaussianTarget::new(mean, big)?))
        }
        Target::Custom(_) => Err(Error::UnsupportedTarget(
            "product embedding needs a finite or Gaussian target".into(),
        )),
    }
}

#[derive(Clone, Debug)]
pub struct PserverOptions {
    pub workers: usize,
    /// Messages the server receives in total.
    pub horizon: u64,
    pub delay: DelayModel,
    pub mode: ServerMode,
    pub seed: u64,
    /// Server replica slots; worker `w` updates slot `w % replicas`.
    pub replicas: usize,
    /// Record the server state after every `thin`-th message.
    pub thin: u64,
    /// Keep the full event trace and message log.
    pub record_trace: bool,
    /// Consecutive re-reads a worker may make before the run is declared
    /// stuck.
    pub max_rereads: u64,
    /// Recompute shipped target densities at the server.
    pub revalidate: bool,
    pub initial: Option<State>,
}

impl PserverOptions {
    pub fn new(workers: usize, horizon: u64, seed: u64) -> Self {
        PserverOptions {
            workers,
            horizon,
            delay: DelayModel::default(),
            mode: ServerMode::MhCorrected,
            seed,
            replicas: 1,
            thin: 1,
            record_trace: true,
            max_rereads: 1000,
            revalidate: cfg!(debug_assertions),
            initial: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MessageRecord {
    pub seq: u64,
    pub worker: usize,
    pub read_version: u64,
    pub accepted: bool,
    pub log_ratio: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WorkerStats {
    pub sent: u64,
    pub reads: u64,
    pub rereads: u64,
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PserverRecord {
    /// Server events in receipt order (when recorded).
    pub trace: Option<Schedule>,
    pub messages: Vec<MessageRecord>,
    /// Concatenated replica states, one row per `sample_every` messages.
    pub samples: Samples,
    pub sample_every: u64,
    pub final_states: Vec<State>,
    pub workers: Vec<WorkerStats>,
    pub sent: u64,
    pub received: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub max_staleness: u64,
    /// Seq at which a naive run produced a non-finite state.
    pub diverged_at: Option<u64>,
    /// FNV-1a hash of the (worker, read version) receipt sequence. Equal
    /// digests mean two runs saw the same message schedule.
    pub schedule_digest: u64,
}

impl PserverRecord {
    pub fn accept_rate(&self) -> f64 {
        if self.received == 0 {
            0.0
        } else {
            self.accepted as f64 / self.received as f64
        }
    }

    pub fn write_messages_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["seq", "worker", "read_version", "accepted", "log_ratio"])?;
        for m in &self.messages {
            w.write_record([
                m.seq.to_string(),
                m.worker.to_string(),
                m.read_version.to_string(),
                m.accepted.to_string(),
                m.log_ratio.map_or_else(String::new, |r| r.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct InFlight {
    msg: ServerMessage,
    read_seq: u64,
}

struct Network {
    kind: DelayKind,
    rng: StreamRng,
    counter: u64,
    last_delivery: u64,
    geometric: Option<Geometric>,
}

impl Network {
    fn new(delay: &DelayModel, seed: u64) -> Result<Self> {
        let geometric = match delay.kind {
            DelayKind::FifoFixed { .. } => None,
            DelayKind::FifoRandom { mean_latency } | DelayKind::ReorderRandom { mean_latency } => {
                Some(
                    Geometric::new(1.0 / (1.0 + mean_latency))
                        .map_err(|e| Error::Parameter(e.to_string()))?,
                )
            }
        };
        Ok(Network {
            kind: delay.kind.clone(),
            rng: stream(seed, NETWORK_STREAM),
            counter: 0,
            last_delivery: 0,
            geometric,
        })
    }

    /// Delivery key for a message sent at server time `now`.
    fn key(&mut self, now: u64) -> (u64, u64) {
        self.counter += 1;
        let latency = match (&self.kind, &self.geometric) {
            (DelayKind::FifoFixed { latency }, _) => *latency,
            (_, Some(g)) => g.sample(&mut self.rng),
            _ => 0,
        };
        match self.kind {
            DelayKind::FifoFixed { .. } => (now + latency, self.counter),
            DelayKind::FifoRandom { .. } => {
                self.last_delivery = self.last_delivery.max(now + latency);
                (self.last_delivery, self.counter)
            }
            DelayKind::ReorderRandom { .. } => (now + latency, self.rng.random()),
        }
    }
}

struct Worker {
    rng: StreamRng,
    slot: usize,
    issued: u64,
    stats: WorkerStats,
    consecutive_rereads: u64,
}

/// Simulates the server and workers until `opts.horizon` messages are
/// received (or a naive run diverges).
pub fn run_pserver(kernel: &KernelSpec, opts: &PserverOptions) -> Result<PserverRecord> {
    let target = kernel.target().as_ref();
    if opts.workers == 0 || opts.replicas == 0 || opts.thin == 0 {
        return Err(Error::Parameter(
            "workers, replicas and thinning must all be at least 1".into(),
        ));
    }
    if opts.horizon == 0 {
        return Err(Error::Parameter("horizon must be at least 1".into()));
    }
    if opts.replicas > opts.workers {
        return Err(Error::Parameter(format!(
            "{} replicas but only {} workers: some replicas would never move",
            opts.replicas, opts.workers
        )));
    }
    opts.delay.validate()?;
    let mut registry = ProposalRegistry::default();
    let plan = WorkerPlan::new(kernel, &mut registry);
    if opts.mode == ServerMode::MhCorrected {
        for id in 0..registry.len() {
            let p = registry.get(id)?;
            if !p.server_compatible() {
                return Err(Error::Parameter(format!(
                    "proposal {p:?} cannot be corrected at the server: its density depends on the centre it was drawn from"
                )));
            }
        }
    }

    let x0 = opts
        .initial
        .clone()
        .unwrap_or_else(|| target.default_state());
    if x0.dim() != target.dim() {
        return Err(Error::Dimension {
            expected: target.dim(),
            found: x0.dim(),
        });
    }
    let mut slots = (0..opts.replicas)
        .map(|_| ServerState::new(target, x0.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut server_rng = stream(opts.seed, SERVER_STREAM);
    let mut net = Network::new(&opts.delay, opts.seed)?;
    let mut workers: Vec<Worker> = (0..opts.workers)
        .map(|w| Worker {
            rng: worker_stream(opts.seed, w),
            slot: w % opts.replicas,
            issued: 0,
            stats: WorkerStats::default(),
            consecutive_rereads: 0,
        })
        .collect();

    let make = |w: usize, worker: &mut Worker, slot: &ServerState, seq: u64| -> Result<InFlight> {
        worker.stats.reads += 1;
        let id = plan.pick(worker.issued, &mut worker.rng);
        worker.issued += 1;
        let proposal = registry.get(id)?;
        let x_star = proposal.sample(target, &slot.state, &mut worker.rng)?;
        let log_f_forward = proposal.log_density(target, &x_star, &slot.state)?;
        if log_f_forward == f64::NEG_INFINITY {
            return Err(Error::ProposalInconsistency(format!(
                "proposal produced {} which has zero density under itself",
                x_star.label()
            )));
        }
        Ok(InFlight {
            msg: ServerMessage {
                worker: w,
                read_version: slot.version,
                x: slot.state.clone(),
                log_pi_x_star: target.log_unnorm(&x_star),
                x_star,
                log_f_forward,
                proposal_id: id,
            },
            read_seq: seq,
        })
    };

    let mut queue: BinaryHeap<Reverse<(u64, u64, usize)>> = BinaryHeap::new();
    let mut inflight: Vec<Option<InFlight>> = (0..opts.workers).map(|_| None).collect();
    let mut sent = 0u64;
    for w in 0..opts.workers {
        if sent == opts.horizon {
            break;
        }
        let slot = &slots[workers[w].slot];
        inflight[w] = Some(make(w, &mut workers[w], slot, 0)?);
        workers[w].stats.sent += 1;
        sent += 1;
        let (t, tie) = net.key(0);
        queue.push(Reverse((t, tie, w)));
    }

    let dim = target.dim();
    let mut samples =
        Samples::with_capacity(dim * opts.replicas, (opts.horizon / opts.thin) as usize + 1);
    let mut messages = Vec::new();
    let mut events = Vec::new();
    let mut row = vec![0.0; dim * opts.replicas];
    let mut seq = 0u64;
    let mut accepted = 0u64;
    let mut max_staleness = 0u64;
    let mut diverged_at = None;
    let mut digest = FNV_OFFSET;

    while let Some(Reverse((_, _, w))) = queue.pop() {
        let flight = inflight[w]
            .take()
            .expect("queued worker has a message in flight");
        let si = workers[w].slot;
        let staleness = slots[si].version - flight.msg.read_version;
        if staleness > opts.delay.staleness_cap {
            let worker = &mut workers[w];
            worker.stats.rereads += 1;
            worker.consecutive_rereads += 1;
            if worker.consecutive_rereads > opts.max_rereads {
                return Err(Error::Liveness(format!(
                    "worker {w} re-read {} times in a row without getting a message within staleness {} (at seq {seq})",
                    worker.consecutive_rereads, opts.delay.staleness_cap
                )));
            }
            inflight[w] = Some(make(w, worker, &slots[si], seq)?);
            let (t, tie) = net.key(seq);
            queue.push(Reverse((t, tie, w)));
            continue;
        }
        workers[w].consecutive_rereads = 0;
        max_staleness = max_staleness.max(staleness);

        if opts.revalidate && opts.mode == ServerMode::MhCorrected {
            let truth = target.log_unnorm(&flight.msg.x_star);
            let shipped = flight.msg.log_pi_x_star;
            let ok = truth == shipped
                || (truth - shipped).abs() <= REVALIDATE_TOL * truth.abs().max(1.0);
            if !ok {
                return Err(Error::Protocol(format!(
                    "worker {w} shipped log density {shipped} but the target gives {truth}"
                )));
            }
        }
        let receipt = server_receive(
            &mut slots[si],
            &flight.msg,
            target,
            &registry,
            opts.mode,
            &mut server_rng,
        )?;
        seq += 1;
        digest = fnv_mix(fnv_mix(digest, w as u64), flight.msg.read_version);
        let stats = &mut workers[w].stats;
        if receipt.accepted {
            accepted += 1;
            stats.accepted += 1;
        } else {
            stats.rejected += 1;
        }
        if opts.record_trace {
            events.push(Event {
                seq,
                worker: w,
                read_from: flight.read_seq,
                kind: EventKind::ServerCommit,
                accepted: Some(receipt.accepted),
            });
            messages.push(MessageRecord {
                seq,
                worker: w,
                read_version: flight.msg.read_version,
                accepted: receipt.accepted,
                log_ratio: receipt.log_ratio,
            });
        }
        if !slots[si].state.is_finite() {
            diverged_at = Some(seq);
            break;
        }
        if seq % opts.thin == 0 {
            for (r, slot) in slots.iter().enumerate() {
                for (dst, v) in row[r * dim..(r + 1) * dim]
                    .iter_mut()
                    .zip(slot.state.coords())
                {
                    *dst = v;
                }
            }
            samples.push(&row)?;
        }
        if sent < opts.horizon {
            inflight[w] = Some(make(w, &mut workers[w], &slots[si], seq)?);
            workers[w].stats.sent += 1;
            sent += 1;
            let (t, tie) = net.key(seq);
            queue.push(Reverse((t, tie, w)));
        }
    }

    let trace = opts.record_trace.then(|| {
        let mut s = Schedule::new(events, opts.workers, 1);
        s.staleness_bound = s.tightest_bound();
        s
    });
    Ok(PserverRecord {
        trace,
        messages,
        samples,
        sample_every: opts.thin,
        final_states: slots.into_iter().map(|s| s.state).collect(),
        workers: workers.into_iter().map(|w| w.stats).collect(),
        sent,
        received: seq,
        accepted,
        rejected: seq - accepted,
        max_staleness,
        diverged_at,
        schedule_digest: digest,
    })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv_mix(h: u64, v: u64) -> u64 {
    v.to_le_bytes()
        .iter()
        .fold(h, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Transition matrix of the server state when every message is read and
/// received with no intervening updates, so the worker's read equals the
/// server state.
pub fn render_server_kernel(kernel: &KernelSpec) -> Result<StochasticMatrix> {
    let target = kernel.target().as_ref();
    let t = target
        .as_finite()
        .ok_or_else(|| Error::UnsupportedTarget("rendering needs a finite target".into()))?;
    let n = t.num_states();
    if n > crate::kernels::DEFAULT_RENDER_CAP {
        return Err(Error::Size {
            size: n,
            cap: crate::kernels::DEFAULT_RENDER_CAP,
        });
    }
    let one = |p: &Proposal| -> Result<Vec<Vec<f64>>> {
        if !p.server_compatible() {
            return Err(Error::Parameter(format!(
                "proposal {p:?} cannot be corrected at the server"
            )));
        }
        let mut registry = ProposalRegistry::default();
        let id = registry.register(p.clone());
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            let x = State::Discrete(t.state_at(i));
            let server = ServerState {
                log_density: target.log_unnorm(&x),
                state: x.clone(),
                commit_count: 0,
                version: 0,
            };
            if server.log_density == f64::NEG_INFINITY {
                row[i] = 1.0;
                continue;
            }
            for (y, q) in p.enumerate(target, &x)? {
                let msg = ServerMessage {
                    worker: 0,
                    read_version: 0,
                    x: x.clone(),
                    log_pi_x_star: target.log_unnorm(&y),
                    log_f_forward: p.log_density(target, &y, &x)?,
                    x_star: y.clone(),
                    proposal_id: id,
                };
                let r = server_log_ratio(target, p, &server, &msg)?;
                let a = if r >= 0.0 { 1.0 } else { r.exp() };
                let j = t
                    .index_of(y.as_discrete().expect("finite proposal"))
                    .expect("state in table");
                row[j] += q * a;
                row[i] += q * (1.0 - a);
            }
        }
        Ok(rows)
    };
    let space = t.space();
    let to_matrix = |rows: Vec<Vec<f64>>| StochasticMatrix::new(space.clone(), rows);
    match kernel.kind() {
        KernelKind::MetropolisHastings => to_matrix(one(kernel
            .proposal()
            .expect("MH kernels carry a proposal"))?),
        KernelKind::GibbsSingleSite => {
            let d = t.site_sizes().len();
            let mut acc = vec![vec![0.0; n]; n];
            for site in 0..d {
                let rows = one(&Proposal::GibbsSite { site })?;
                for (a, r) in acc.iter_mut().zip(rows) {
                    for (x, y) in a.iter_mut().zip(r) {
                        *x += y / d as f64;
                    }
                }
            }
            to_matrix(acc)
        }
        KernelKind::SystematicGibbs => {
            let mut m = StochasticMatrix::identity(space.clone());
            for &site in kernel.site_order().unwrap_or_default() {
                m = m.compose(&to_matrix(one(&Proposal::GibbsSite { site })?)?)?;
            }
            Ok(m)
        }
    }
}

/// Shared handle for the target of a kernel, for building coupled kernels.
pub fn coupled_kernel(kernel: &KernelSpec, m: usize) -> Result<KernelSpec> {
    let target = Arc::new(coupled_embed(kernel.target(), m)?);
    match kernel.kind() {
        KernelKind::MetropolisHastings => KernelSpec::metropolis_hastings(
            target,
            kernel.proposal().cloned().unwrap_or(Proposal::Identity),
        ),
        KernelKind::GibbsSingleSite => KernelSpec::gibbs(target),
        KernelKind::SystematicGibbs => KernelSpec::systematic_gibbs(target, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::empirical_finite;
    use crate::kernels::render_matrix;
    use crate::measures::{stationary_distribution, tv_distance};

    fn finite(weights: &[f64], p: Proposal) -> KernelSpec {
        let t = FiniteTarget::from_weights(weights).unwrap();
        KernelSpec::metropolis_hastings(Arc::new(Target::Finite(t)), p).unwrap()
    }

    fn message(
        server: &ServerState,
        target: &Target,
        x_star: State,
        id: usize,
        p: &Proposal,
    ) -> ServerMessage {
        ServerMessage {
            worker: 0,
            read_version: server.version,
            x: server.state.clone(),
            log_pi_x_star: target.log_unnorm(&x_star),
            log_f_forward: p.log_density(target, &x_star, &server.state).unwrap(),
            x_star,
            proposal_id: id,
        }
    }

    #[test]
    fn uphill_fresh_message_is_accepted() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let target = k.target();
        let mut reg = ProposalRegistry::default();
        let id = reg.register(Proposal::UniformIndependent);
        let mut rng = stream(0, 0);
        for _ in 0..100 {
            let mut st = ServerState::new(target, State::Discrete(vec![0])).unwrap();
            let msg = message(
                &st,
                target,
                State::Discrete(vec![2]),
                id,
                &Proposal::UniformIndependent,
            );
            let r = server_receive(
                &mut st,
                &msg,
                target,
                &reg,
                ServerMode::MhCorrected,
                &mut rng,
            )
            .unwrap();
            assert!(r.accepted);
            assert_eq!(st.state, State::Discrete(vec![2]));
            assert_eq!((st.version, st.commit_count), (1, 1));
        }
    }

    #[test]
    fn zero_density_proposal_is_rejected() {
        let t = FiniteTarget::new(vec![3], vec![0.0, 0.0, f64::NEG_INFINITY]).unwrap();
        let target = Target::Finite(t);
        let mut reg = ProposalRegistry::default();
        let id = reg.register(Proposal::UniformIndependent);
        let mut rng = stream(0, 0);
        let mut st = ServerState::new(&target, State::Discrete(vec![0])).unwrap();
        for _ in 0..100 {
            let msg = message(
                &st,
                &target,
                State::Discrete(vec![2]),
                id,
                &Proposal::UniformIndependent,
            );
            let r = server_receive(
                &mut st,
                &msg,
                &target,
                &reg,
                ServerMode::MhCorrected,
                &mut rng,
            )
            .unwrap();
            assert!(!r.accepted);
        }
        assert_eq!((st.version, st.commit_count), (100, 0));
    }

    #[test]
    fn unregistered_proposal_is_a_protocol_error() {
        let k = finite(&[0.5, 0.5], Proposal::UniformIndependent);
        let target = k.target();
        let reg = ProposalRegistry::default();
        let mut st = ServerState::new(target, State::Discrete(vec![0])).unwrap();
        let msg = message(
            &st,
            target,
            State::Discrete(vec![1]),
            3,
            &Proposal::UniformIndependent,
        );
        let err = server_receive(
            &mut st,
            &msg,
            target,
            &reg,
            ServerMode::MhCorrected,
            &mut stream(0, 0),
        );
        assert!(matches!(err, Err(Error::Protocol(_))));
    }

    #[test]
    fn rendered_zero_delay_kernel_matches_mh_and_is_reversible() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let server = render_server_kernel(&k).unwrap();
        let mh = render_matrix(&k).unwrap();
        let pi = stationary_distribution(&server).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((server.get(i, j) - mh.get(i, j)).abs() < 1e-12);
                let flow = pi.probs()[i] * server.get(i, j) - pi.probs()[j] * server.get(j, i);
                assert!(flow.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rendered_gibbs_server_kernel_keeps_target() {
        let t = FiniteTarget::new(vec![2, 3], vec![0.1, 0.4, -0.3, 0.9, 0.0, -1.0]).unwrap();
        let k = KernelSpec::gibbs(Arc::new(Target::Finite(t.clone()))).unwrap();
        let m = render_server_kernel(&k).unwrap();
        let pi = stationary_distribution(&m).unwrap();
        assert!(tv_distance(&pi, &t.distribution()).unwrap() < 1e-10);
    }

    #[test]
    fn incompatible_proposal_is_refused_in_corrected_mode() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::NeighborWalk);
        let err = run_pserver(&k, &PserverOptions::new(2, 100, 0)).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
        let mut naive = PserverOptions::new(2, 100, 0);
        naive.mode = ServerMode::NaiveAccept;
        assert!(run_pserver(&k, &naive).is_ok());
    }

    #[test]
    fn messages_are_conserved() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let mut o = PserverOptions::new(4, 5000, 2);
        o.delay = DelayModel {
            kind: DelayKind::ReorderRandom { mean_latency: 3.0 },
            staleness_cap: 8,
        };
        let r = run_pserver(&k, &o).unwrap();
        assert_eq!(r.sent, 5000);
        assert_eq!(r.received, 5000);
        assert_eq!(r.accepted + r.rejected, r.received);
        assert_eq!(r.workers.iter().map(|w| w.sent).sum::<u64>(), 5000);
        assert!(r.max_staleness <= 8);
        let trace = r.trace.unwrap();
        trace.validate().unwrap();
        assert!(trace
            .events
            .iter()
            .all(|e| e.kind == EventKind::ServerCommit));
    }

    #[test]
    fn single_worker_zero_delay_is_sequential() {
        // Rebuild the same chain by hand from the worker and server streams.
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let mut o = PserverOptions::new(1, 300, 7);
        o.delay = DelayModel::instantaneous();
        let r = run_pserver(&k, &o).unwrap();
        assert_eq!(r.max_staleness, 0);
        let target = k.target();
        let mut wr = worker_stream(7, 0);
        let mut sr = stream(7, SERVER_STREAM);
        let mut x = target.default_state();
        for i in 0..300 {
            let y = Proposal::UniformIndependent
                .sample(target, &x, &mut wr)
                .unwrap();
            let ratio = target.log_unnorm(&y) - target.log_unnorm(&x);
            let u: f64 = sr.random();
            if ratio >= 0.0 || u.ln() < ratio {
                x = y;
            }
            assert_eq!(r.samples.row(i), x.coords().as_slice());
        }
    }

    #[test]
    fn starved_worker_is_a_liveness_error() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let mut o = PserverOptions::new(2, 1000, 0);
        o.delay = DelayModel::instantaneous();
        o.max_rereads = 50;
        let err = run_pserver(&k, &o).unwrap_err();
        assert!(matches!(err, Error::Liveness(_)), "{err}");
    }

    #[test]
    fn stale_corrected_run_targets_pi() {
        let k = finite(&[0.2, 0.3, 0.5], Proposal::UniformIndependent);
        let mut o = PserverOptions::new(4, 200_000, 5);
        o.delay = DelayModel {
            kind: DelayKind::ReorderRandom { mean_latency: 2.0 },
            staleness_cap: 10,
        };
        let r = run_pserver(&k, &o).unwrap();
        let t = k.target().as_finite().unwrap();
        let emp = empirical_finite(t, &r.samples.after_burn_in(0.2)).unwrap();
        assert!(tv_distance(&emp, &t.distribution()).unwrap() < 0.02);
    }

    #[test]
    fn coupled_embedding() {
        let t = Target::Finite(FiniteTarget::from_weights(&[0.2, 0.3, 0.5]).unwrap());
        assert_eq!(coupled_embed(&t, 1).unwrap().dim(), 1);
        let c = coupled_embed(&t, 2).unwrap();
        let c = c.as_finite().unwrap();
        assert_eq!(c.num_states(), 9);
        let p = c.distribution();
        let q = [0.2, 0.3, 0.5];
        for i in 0..3 {
            for j in 0..3 {
                let idx = c.index_of(&[i, j]).unwrap();
                assert!((p.probs()[idx] - q[i] * q[j]).abs() < 1e-12);
            }
        }
        let g = Target::Gaussian(GaussianTarget::bivariate(0.5).unwrap());
        let cg = coupled_embed(&g, 3).unwrap();
        assert_eq!(cg.dim(), 6);
    }

    #[test]
    fn naive_update_semantics() {
        let s = State::Continuous(vec![1.0, 2.0]);
        let x = State::Continuous(vec![0.0, 0.0]);
        let y = State::Continuous(vec![0.5, 0.0]);
        assert_eq!(apply_update(&s, &x, &y), State::Continuous(vec![1.5, 2.0]));
        let s = State::Discrete(vec![1, 2]);
        let x = State::Discrete(vec![0, 0]);
        let y = State::Discrete(vec![0, 1]);
        assert_eq!(apply_update(&s, &x, &y), State::Discrete(vec![1, 1]));
    }

    #[test]
    fn delay_model_json() {
        let d = DelayModel {
            kind: DelayKind::ReorderRandom { mean_latency: 2.0 },
            staleness_cap: 6,
        };
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"reorder_random","mean_latency":2.0,"staleness_cap":6}"#
        );
        assert_eq!(serde_json::from_str::<DelayModel>(&s).unwrap(), d);
    }
}
