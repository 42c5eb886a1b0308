//! Simulated asynchronous local SGD: one server, `n` client workers.
//!
//! Each client walks the round plan on its own. For round `i` it pulls a
//! snapshot of the global model, runs its share of the round's `s_i`
//! iterations of local SGD at step size `eta_i`, and pushes either the final
//! local model or the sum of its clipped gradients. The server applies updates
//! one at a time in arrival order:
//!
//! * model exchange: `global = (1 - 1/n) * global + (1/n) * local`
//! * gradient exchange: `global -= eta_i * grad_sum / n`
//!
//! Staleness is counted in server versions. An update based on version `b`
//! that arrives when the server is at version `v` passes the delay gate iff
//! `v - b <= tau(t)`, where `t` is the number of iterations applied so far.
//! Pulls are admitted only when every in-flight client could still pass the
//! gate even if all others pushed first, so a gated run never stalls.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, NormalizedWindow};
use crate::error::{Error, Result};
use crate::metrics::{rmse, ExperimentReport, RoundMetrics};
use crate::nn::{clip_in_place, sgd_step_in_place, EvlTerm, Network, ParameterVector};
use crate::rng;
use crate::schedule::{PlannedRound, RoundPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeMode {
    Model,
    Gradient,
}

impl fmt::Display for ExchangeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExchangeMode::Model => "model",
            ExchangeMode::Gradient => "gradient",
        })
    }
}

impl FromStr for ExchangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "model" => Ok(ExchangeMode::Model),
            "gradient" => Ok(ExchangeMode::Gradient),
            other => Err(Error::config("dist.exchange", format!("expected `model` or `gradient`, got {other:?}"))),
        }
    }
}

/// Bound on staleness as a function of applied iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayPolicy {
    None,
    Fixed(u64),
    /// `tau(t) = ceil(c * sqrt(t / ln(t + 2)))`
    SqrtLog { c: f64 },
}

impl DelayPolicy {
    /// `None` means unbounded.
    pub fn tau(&self, t: u64) -> Option<u64> {
        match *self {
            DelayPolicy::None => None,
            DelayPolicy::Fixed(d) => Some(d),
            DelayPolicy::SqrtLog { c } => {
                let t = t as f64;
                Some((c * (t / (t + 2.0).ln()).sqrt()).ceil() as u64)
            }
        }
    }
}

impl fmt::Display for DelayPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DelayPolicy::None => f.write_str("none"),
            DelayPolicy::Fixed(d) => write!(f, "fixed:{d}"),
            DelayPolicy::SqrtLog { c } => write!(f, "sqrt_log:{c}"),
        }
    }
}

impl FromStr for DelayPolicy {
    type Err = Error;

    /// `none`, `fixed:<d>`, `sqrt_log` or `sqrt_log:<c>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |msg: String| Error::config("dist.delay", msg);
        match s.split_once(':') {
            None if s == "none" => Ok(DelayPolicy::None),
            None if s == "sqrt_log" => Ok(DelayPolicy::SqrtLog { c: 1.0 }),
            Some(("fixed", d)) => d
                .trim()
                .parse::<u64>()
                .map(DelayPolicy::Fixed)
                .map_err(|_| bad(format!("bad fixed delay {d:?}"))),
            Some(("sqrt_log", c)) => match c.trim().parse::<f64>() {
                Ok(c) if c.is_finite() && c > 0.0 => Ok(DelayPolicy::SqrtLog { c }),
                _ => Err(bad(format!("bad sqrt_log coefficient {c:?}"))),
            },
            _ => Err(bad(format!("expected none, fixed:<d> or sqrt_log[:<c>], got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataAccess {
    /// Every client samples from the full training set.
    Shared,
    /// Client `c` samples from the `c`-th contiguous slice.
    Sharded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// One OS thread per client, the server on the calling thread.
    Threaded,
    /// Single thread. Admitted clients compute immediately; their updates are
    /// delivered in admission order, so steady-state staleness is `n - 1`.
    Deterministic,
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub base_version: u64,
    pub round_index: u64,
    pub iterations_done: u64,
    pub payload_kind: ExchangeMode,
    pub payload: ParameterVector,
    pub bytes: u64,
    /// Step size the client used; gradient exchange applies it at the server.
    pub eta: f64,
    /// Sum of per-step training losses.
    pub loss_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    /// Server version after applying this update.
    pub version: u64,
    pub client_id: usize,
    pub base_version: u64,
    pub round_index: u64,
    pub iterations: u64,
}

#[derive(Debug, Clone)]
pub struct GlobalModelState {
    pub params: ParameterVector,
    pub version: u64,
    pub update_log: Vec<LogEntry>,
    /// Iterations contained in applied updates.
    pub applied_iterations: u64,
}

impl GlobalModelState {
    pub fn new(params: ParameterVector) -> Self {
        Self { params, version: 0, update_log: Vec::new(), applied_iterations: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Pass,
    Hold,
}

pub fn delay_gate(state: &GlobalModelState, upd: &ClientUpdate, policy: &DelayPolicy, t: u64) -> GateDecision {
    let staleness = state.version.saturating_sub(upd.base_version);
    match policy.tau(t) {
        Some(tau) if staleness > tau => GateDecision::Hold,
        _ => GateDecision::Pass,
    }
}

/// Applies one update. `n` is the number of clients.
pub fn apply_update(state: &mut GlobalModelState, upd: &ClientUpdate, n: usize) -> Result<()> {
    state.params.check_same_shape(&upd.payload)?;
    if upd.base_version > state.version {
        return Err(Error::Contract(format!(
            "update from client {} is based on version {} but the server is at {}",
            upd.client_id, upd.base_version, state.version
        )));
    }
    let n = n as f64;
    match upd.payload_kind {
        ExchangeMode::Model if n == 1.0 => state.params.values.copy_from_slice(&upd.payload.values),
        ExchangeMode::Model => {
            let alpha = 1.0 / n;
            for (g, l) in state.params.values.iter_mut().zip(&upd.payload.values) {
                *g = (1.0 - alpha) * *g + alpha * l;
            }
        }
        ExchangeMode::Gradient => {
            let scale = upd.eta / n;
            for (g, d) in state.params.values.iter_mut().zip(&upd.payload.values) {
                *g -= scale * d;
            }
        }
    }
    if !state.params.all_finite() {
        return Err(Error::NonFinite(format!("applying update from client {}", upd.client_id)));
    }
    state.version += 1;
    state.params.version = state.version;
    state.update_log.push(LogEntry {
        version: state.version,
        client_id: upd.client_id,
        base_version: upd.base_version,
        round_index: upd.round_index,
        iterations: upd.iterations_done,
    });
    state.applied_iterations += upd.iterations_done;
    Ok(())
}

/// Samples training windows for one client.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    windows: &'a [NormalizedWindow],
    rng: ChaCha8Rng,
}

impl<'a> Sampler<'a> {
    pub fn new(windows: &'a [NormalizedWindow], rng: ChaCha8Rng) -> Self {
        Self { windows, rng }
    }

    /// The sampler client `client` uses in a run seeded with `seed`.
    pub fn for_client(all: &'a [NormalizedWindow], access: DataAccess, clients: usize, client: usize, seed: u64) -> Self {
        let windows = match access {
            DataAccess::Shared => all,
            DataAccess::Sharded => {
                let lo = client * all.len() / clients;
                let hi = (client + 1) * all.len() / clients;
                &all[lo..hi]
            }
        };
        Self::new(windows, rng::stream(seed, rng::CLIENT_DRAWS, client as u64))
    }

    pub fn draw(&mut self) -> &'a NormalizedWindow {
        &self.windows[self.rng.random_range(0..self.windows.len())]
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// One client's work for one round. Returns `None` when the client's share
/// of the round is zero.
pub fn client_round(
    net: &Network,
    client_id: usize,
    round: &PlannedRound,
    snapshot: &ParameterVector,
    sampler: &mut Sampler<'_>,
    mode: ExchangeMode,
    evl: Option<&EvlTerm>,
) -> Result<Option<ClientUpdate>> {
    let iterations = round.client_share(client_id);
    if iterations == 0 {
        return Ok(None);
    }
    if sampler.is_empty() {
        return Err(Error::Data(format!("client {client_id} has no training windows")));
    }
    let ctx = |e: Error| e.context(format!("client {client_id}, round {}", round.index));
    let clip = net.config().clip_norm;
    let mut local = snapshot.clone();
    let mut grad_sum = match mode {
        ExchangeMode::Gradient => Some(ParameterVector::zeros_like(snapshot)),
        ExchangeMode::Model => None,
    };
    let mut loss_sum = 0.0;
    for _ in 0..iterations {
        let w = sampler.draw();
        let (loss, mut grad) = net.loss_and_grad(&local, &w.inputs, w.target, evl).map_err(ctx)?;
        clip_in_place(&mut grad, clip);
        if let Some(acc) = grad_sum.as_mut() {
            acc.values.iter_mut().zip(&grad.values).for_each(|(a, g)| *a += g);
        }
        sgd_step_in_place(&mut local, &grad, round.eta).map_err(ctx)?;
        loss_sum += loss;
    }
    let mut payload = grad_sum.unwrap_or(local);
    payload.version = snapshot.version;
    Ok(Some(ClientUpdate {
        client_id,
        base_version: snapshot.version,
        round_index: round.index,
        iterations_done: iterations,
        payload_kind: mode,
        bytes: payload.byte_size(),
        payload,
        eta: round.eta,
        loss_sum,
    }))
}

/// A log entry that breaks the delay bound, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditViolation {
    pub entry: LogEntry,
    pub reason: String,
}

impl fmt::Display for AuditViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (entry {:?})", self.reason, self.entry)
    }
}

/// Checks that every applied update was computed from a model that already
/// contained all updates through `t - tau(t)`: with versions, that the
/// staleness at application was at most `tau(t)` where `t` counts the
/// iterations applied before it.
pub fn audit_delay_consistency(log: &[LogEntry], policy: &DelayPolicy) -> std::result::Result<(), AuditViolation> {
    let mut t = 0u64;
    for (k, e) in log.iter().enumerate() {
        let before = k as u64;
        if e.version != before + 1 {
            return Err(AuditViolation { entry: *e, reason: format!("version {} out of sequence, expected {}", e.version, before + 1) });
        }
        if e.base_version > before {
            return Err(AuditViolation { entry: *e, reason: format!("base version {} is newer than server version {before}", e.base_version) });
        }
        let staleness = before - e.base_version;
        if let Some(tau) = policy.tau(t) {
            if staleness > tau {
                return Err(AuditViolation {
                    entry: *e,
                    reason: format!("staleness {staleness} exceeds tau({t}) = {tau}"),
                });
            }
        }
        t += e.iterations;
    }
    Ok(())
}

/// Checks that the log accounts for the plan exactly: each round's iterations
/// sum to `s_i`, no client reports a round twice, and the total is `K`.
pub fn audit_conservation(log: &[LogEntry], plan: &RoundPlan) -> Result<()> {
    let mut per_round: BTreeMap<u64, u64> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for e in log {
        if !seen.insert((e.client_id, e.round_index)) {
            return Err(Error::Runtime(format!("client {} reported round {} twice", e.client_id, e.round_index)));
        }
        *per_round.entry(e.round_index).or_default() += e.iterations;
    }
    let total: u64 = per_round.values().sum();
    if total != plan.budget {
        return Err(Error::Runtime(format!("accepted iterations {total} != budget {}", plan.budget)));
    }
    if per_round.len() != plan.num_rounds() {
        return Err(Error::Runtime(format!("{} rounds completed, plan has {}", per_round.len(), plan.num_rounds())));
    }
    for r in &plan.rounds {
        if per_round.get(&r.index) != Some(&r.iterations) {
            return Err(Error::Runtime(format!("round {} accepted {:?} iterations, planned {}", r.index, per_round.get(&r.index), r.iterations)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: Network,
    pub plan: RoundPlan,
    pub mode: ExchangeMode,
    pub delay: DelayPolicy,
    pub data: DataAccess,
    pub execution: Execution,
    /// Upper bound of a uniform random sleep each client takes per round.
    pub jitter: Option<Duration>,
    pub seed: u64,
    pub evl: Option<EvlTerm>,
    /// Evaluate test RMSE after every round, not only the last.
    pub eval_each_round: bool,
    /// Settings echoed into the report.
    pub echo: Vec<(String, String)>,
    pub fingerprint: String,
}

impl ExperimentConfig {
    pub fn clients(&self) -> usize {
        self.plan.clients
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub state: GlobalModelState,
    /// Global model at the completion of each round, in round order.
    pub round_params: Vec<ParameterVector>,
}

#[derive(Debug, Default, Clone)]
struct RoundAccum {
    expected: usize,
    received: usize,
    loss_sum: f64,
    bytes_up: u64,
    bytes_down: u64,
    max_staleness: u64,
    completed_at: Option<Duration>,
    snapshot: Option<ParameterVector>,
}

/// Server-side protocol state shared by both execution modes.
struct Server {
    state: GlobalModelState,
    policy: DelayPolicy,
    clients: usize,
    in_flight: BTreeMap<usize, u64>,
    held: Vec<ClientUpdate>,
    rounds: Vec<RoundAccum>,
    start: Instant,
}

impl Server {
    fn new(init: ParameterVector, plan: &RoundPlan, policy: DelayPolicy) -> Self {
        let rounds = plan
            .rounds
            .iter()
            .map(|r| RoundAccum {
                expected: (0..plan.clients).filter(|&c| r.client_share(c) > 0).count(),
                ..RoundAccum::default()
            })
            .collect();
        Self {
            state: GlobalModelState::new(init),
            policy,
            clients: plan.clients,
            in_flight: BTreeMap::new(),
            held: Vec::new(),
            rounds,
            start: Instant::now(),
        }
    }

    /// Hands out a snapshot if doing so cannot push any in-flight client past
    /// the delay bound.
    fn try_admit(&mut self, client: usize, round_index: u64) -> Option<ParameterVector> {
        let v = self.state.version;
        if let Some(tau) = self.policy.tau(self.state.applied_iterations) {
            let others = self.in_flight.len() as u64;
            let fits = others <= tau && self.in_flight.values().all(|&b| v - b + others <= tau);
            if !fits {
                return None;
            }
        }
        self.in_flight.insert(client, v);
        let snap = self.state.params.clone();
        self.rounds[round_index as usize - 1].bytes_down += snap.byte_size();
        Some(snap)
    }

    fn receive(&mut self, upd: ClientUpdate) -> Result<()> {
        self.in_flight.remove(&upd.client_id);
        self.held.push(upd);
        while let Some(k) = self
            .held
            .iter()
            .position(|u| delay_gate(&self.state, u, &self.policy, self.state.applied_iterations) == GateDecision::Pass)
        {
            let u = self.held.remove(k);
            self.apply(u)?;
        }
        Ok(())
    }

    fn apply(&mut self, upd: ClientUpdate) -> Result<()> {
        let staleness = self.state.version - upd.base_version;
        apply_update(&mut self.state, &upd, self.clients)?;
        let acc = &mut self.rounds[upd.round_index as usize - 1];
        acc.received += 1;
        acc.loss_sum += upd.loss_sum;
        acc.bytes_up += upd.bytes;
        acc.max_staleness = acc.max_staleness.max(staleness);
        if acc.received == acc.expected {
            acc.completed_at = Some(self.start.elapsed());
            acc.snapshot = Some(self.state.params.clone());
        }
        Ok(())
    }

    fn finish(self, cfg: &ExperimentConfig, test: &[NormalizedWindow]) -> Result<ExperimentOutcome> {
        if let Some(u) = self.held.first() {
            return Err(Error::Runtime(format!(
                "update from client {} (round {}) never passed the delay gate",
                u.client_id, u.round_index
            )));
        }
        let Server { state, rounds, .. } = self;
        audit_conservation(&state.update_log, &cfg.plan)?;
        if let Err(v) = audit_delay_consistency(&state.update_log, &cfg.delay) {
            return Err(Error::Runtime(format!("delay audit failed: {v}")));
        }

        let net = &cfg.network;
        let evaluate = |p: &ParameterVector| -> Result<f64> {
            let preds = test.iter().map(|w| net.predict(p, &w.inputs)).collect::<Result<Vec<_>>>()?;
            let actual: Vec<f64> = test.iter().map(|w| w.target).collect();
            rmse(&preds, &actual)
        };

        let last = rounds.len() - 1;
        let mut metrics = Vec::with_capacity(rounds.len());
        let mut round_params = Vec::with_capacity(rounds.len());
        let mut prev_end = Duration::ZERO;
        for (k, (acc, planned)) in rounds.into_iter().zip(&cfg.plan.rounds).enumerate() {
            let end = acc.completed_at.unwrap_or(prev_end).max(prev_end);
            let params = acc.snapshot.ok_or_else(|| Error::Runtime(format!("round {} never completed", planned.index)))?;
            let test_rmse = if (cfg.eval_each_round || k == last) && !test.is_empty() {
                Some(evaluate(&params)?)
            } else {
                None
            };
            metrics.push(RoundMetrics {
                round: planned.index,
                iterations: planned.iterations,
                eta: planned.eta,
                cum_iters: planned.cum_start + planned.iterations,
                train_loss: acc.loss_sum / planned.iterations as f64,
                test_rmse,
                wall_ms: (end - prev_end).as_secs_f64() * 1e3,
                bytes_up: acc.bytes_up,
                bytes_down: acc.bytes_down,
                max_staleness: acc.max_staleness,
            });
            round_params.push(params);
            prev_end = end;
        }
        let final_rmse = metrics.last().and_then(|m| m.test_rmse).unwrap_or(f64::NAN);
        let report = ExperimentReport::new(cfg.fingerprint.clone(), cfg.echo.clone(), cfg.clients(), metrics, final_rmse);
        Ok(ExperimentOutcome { report, state, round_params })
    }
}

/// Initial global model for a run seeded with `seed`.
pub fn initial_params(net: &Network, seed: u64) -> ParameterVector {
    net.init_params(rng::sub_seed(seed, rng::INIT, 0))
}

/// Runs the full plan and audits the result.
pub fn run_experiment(cfg: &ExperimentConfig, data: &DatasetSplit) -> Result<ExperimentOutcome> {
    let n = cfg.clients();
    if n == 0 {
        return Err(Error::config("dist.nodes", "need at least one client"));
    }
    if data.train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let init = initial_params(&cfg.network, cfg.seed);
    let server = Server::new(init, &cfg.plan, cfg.delay);
    let server = match cfg.execution {
        Execution::Deterministic => run_deterministic(cfg, &data.train, server)?,
        Execution::Threaded => run_threaded(cfg, &data.train, server)?,
    };
    server.finish(cfg, &data.test)
}

fn run_deterministic(cfg: &ExperimentConfig, train: &[NormalizedWindow], mut server: Server) -> Result<Server> {
    let n = cfg.clients();
    let rounds = &cfg.plan.rounds;
    let mut samplers: Vec<Sampler> = (0..n).map(|c| Sampler::for_client(train, cfg.data, n, c, cfg.seed)).collect();
    let mut cursor = vec![0usize; n];
    let mut busy = vec![false; n];
    let mut queue: VecDeque<ClientUpdate> = VecDeque::new();
    loop {
        for c in 0..n {
            if busy[c] {
                continue;
            }
            while cursor[c] < rounds.len() && rounds[cursor[c]].client_share(c) == 0 {
                cursor[c] += 1;
            }
            let Some(round) = rounds.get(cursor[c]) else { continue };
            if let Some(snap) = server.try_admit(c, round.index) {
                let upd = client_round(&cfg.network, c, round, &snap, &mut samplers[c], cfg.mode, cfg.evl.as_ref())?
                    .expect("share checked above");
                queue.push_back(upd);
                busy[c] = true;
                cursor[c] += 1;
            }
        }
        match queue.pop_front() {
            Some(upd) => {
                busy[upd.client_id] = false;
                server.receive(upd)?;
            }
            None => break,
        }
    }
    Ok(server)
}

enum ToServer {
    Pull { client: usize, round: u64 },
    Push(Box<ClientUpdate>),
    Done,
    Failed { client: usize, error: Error },
}

fn run_threaded(cfg: &ExperimentConfig, train: &[NormalizedWindow], mut server: Server) -> Result<Server> {
    let n = cfg.clients();
    let (tx, rx) = mpsc::channel::<ToServer>();
    let mut replies = Vec::with_capacity(n);
    let mut inboxes = Vec::with_capacity(n);
    for _ in 0..n {
        let (rtx, rrx) = mpsc::channel::<ParameterVector>();
        replies.push(Some(rtx));
        inboxes.push(rrx);
    }

    std::thread::scope(|scope| -> Result<Server> {
        for (c, inbox) in inboxes.into_iter().enumerate() {
            let tx = tx.clone();
            scope.spawn(move || {
                let work = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| client_loop(cfg, train, c, &tx, &inbox)));
                let msg = match work {
                    Ok(Ok(())) => ToServer::Done,
                    Ok(Err(error)) => ToServer::Failed { client: c, error },
                    Err(panic) => {
                        let what = panic
                            .downcast_ref::<&str>()
                            .map(|s| s.to_string())
                            .or_else(|| panic.downcast_ref::<String>().cloned())
                            .unwrap_or_else(|| "unknown panic".into());
                        ToServer::Failed { client: c, error: Error::Runtime(format!("worker panicked: {what}")) }
                    }
                };
                let _ = tx.send(msg);
            });
        }
        drop(tx);

        let mut pending: VecDeque<(usize, u64)> = VecDeque::new();
        let mut done = 0;
        while done < n {
            let msg = rx.recv().map_err(|_| Error::Runtime("all workers disconnected".into()))?;
            match msg {
                ToServer::Pull { client, round } => pending.push_back((client, round)),
                ToServer::Push(upd) => server.receive(*upd)?,
                ToServer::Done => done += 1,
                ToServer::Failed { client, error } => {
                    // dropping `replies` on return unblocks the remaining workers
                    return Err(error.context(format!("experiment aborted by client {client}")));
                }
            }
            while let Some(&(client, round)) = pending.front() {
                match server.try_admit(client, round) {
                    Some(snap) => {
                        pending.pop_front();
                        if let Some(reply) = &replies[client] {
                            if reply.send(snap).is_err() {
                                replies[client] = None;
                            }
                        }
                    }
                    None => break,
                }
            }
        }
        Ok(server)
    })
}

fn client_loop(
    cfg: &ExperimentConfig,
    train: &[NormalizedWindow],
    c: usize,
    tx: &mpsc::Sender<ToServer>,
    inbox: &mpsc::Receiver<ParameterVector>,
) -> Result<()> {
    let n = cfg.clients();
    let mut sampler = Sampler::for_client(train, cfg.data, n, c, cfg.seed);
    let mut jitter = cfg.jitter.map(|j| (j, rng::stream(cfg.seed, rng::JITTER, c as u64)));
    for round in cfg.plan.rounds.iter().filter(|r| r.client_share(c) > 0) {
        tx.send(ToServer::Pull { client: c, round: round.index })
            .map_err(|_| Error::Runtime("server gone".into()))?;
        let Ok(snap) = inbox.recv() else {
            return Err(Error::Runtime("server stopped answering".into()));
        };
        if let Some((max, rng)) = jitter.as_mut() {
            let micros = rng.random_range(0..=max.as_micros() as u64);
            std::thread::sleep(Duration::from_micros(micros));
        }
        if let Some(upd) = client_round(&cfg.network, c, round, &snap, &mut sampler, cfg.mode, cfg.evl.as_ref())? {
            tx.send(ToServer::Push(Box::new(upd))).map_err(|_| Error::Runtime("server gone".into()))?;
        }
    }
    Ok(())
}

/// Plain serial SGD over the plan with the sampling stream client 0 uses.
/// Returns the model after every round.
pub fn serial_baseline(
    net: &Network,
    plan: &RoundPlan,
    train: &[NormalizedWindow],
    seed: u64,
    evl: Option<&EvlTerm>,
) -> Result<Vec<ParameterVector>> {
    let mut params = initial_params(net, seed);
    let mut sampler = Sampler::for_client(train, DataAccess::Shared, 1, 0, seed);
    let mut out = Vec::with_capacity(plan.num_rounds());
    for r in &plan.rounds {
        for _ in 0..r.iterations {
            let w = sampler.draw();
            let (_, mut g) = net.loss_and_grad(&params, &w.inputs, w.target, evl)?;
            clip_in_place(&mut g, net.config().clip_norm);
            sgd_step_in_place(&mut params, &g, r.eta)?;
        }
        out.push(params.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize_window;
    use crate::nn::NetworkConfig;
    use crate::schedule::{build_round_plan, SampleSizeSchedule, StepSizeSchedule};

    fn tiny_net() -> Network {
        Network::new(NetworkConfig { hidden_dim: 3, fc_dims: vec![2, 1], ..NetworkConfig::default() }).unwrap()
    }

    fn windows(count: usize) -> Vec<NormalizedWindow> {
        (0..count)
            .map(|k| {
                let prices: Vec<f64> = (0..5).map(|i| 100.0 + ((k + i) as f64 * 0.7).sin() * 3.0).collect();
                normalize_window(&prices, k).unwrap()
            })
            .collect()
    }

    fn update(client: usize, base: u64, payload: ParameterVector, kind: ExchangeMode) -> ClientUpdate {
        ClientUpdate {
            client_id: client,
            base_version: base,
            round_index: 1,
            iterations_done: 1,
            payload_kind: kind,
            bytes: payload.byte_size(),
            payload,
            eta: 0.5,
            loss_sum: 0.0,
        }
    }

    #[test]
    fn delay_policy_parsing() {
        assert_eq!("none".parse::<DelayPolicy>().unwrap(), DelayPolicy::None);
        assert_eq!("fixed:3".parse::<DelayPolicy>().unwrap(), DelayPolicy::Fixed(3));
        assert_eq!("sqrt_log".parse::<DelayPolicy>().unwrap(), DelayPolicy::SqrtLog { c: 1.0 });
        assert_eq!("sqrt_log:2.5".parse::<DelayPolicy>().unwrap(), DelayPolicy::SqrtLog { c: 2.5 });
        assert!("fixed:-1".parse::<DelayPolicy>().is_err());
        assert!("sometimes".parse::<DelayPolicy>().is_err());
        for p in [DelayPolicy::None, DelayPolicy::Fixed(4), DelayPolicy::SqrtLog { c: 0.5 }] {
            assert_eq!(p.to_string().parse::<DelayPolicy>().unwrap(), p);
        }
    }

    #[test]
    fn sqrt_log_tau_grows() {
        let p = DelayPolicy::SqrtLog { c: 1.0 };
        assert_eq!(p.tau(0), Some(0));
        let mut prev = 0;
        for t in 0..100_000 {
            let v = p.tau(t).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let t = 10_000f64;
        assert_eq!(p.tau(10_000), Some((t / (t + 2.0).ln()).sqrt().ceil() as u64));
    }

    #[test]
    fn gate_examples() {
        let net = tiny_net();
        let mut state = GlobalModelState::new(net.init_params(0));
        state.version = 5;
        let fresh = update(0, 5, net.init_params(1), ExchangeMode::Model);
        let stale = update(0, 0, net.init_params(1), ExchangeMode::Model);
        assert_eq!(delay_gate(&state, &stale, &DelayPolicy::None, 0), GateDecision::Pass);
        assert_eq!(delay_gate(&state, &fresh, &DelayPolicy::Fixed(0), 0), GateDecision::Pass);
        assert_eq!(delay_gate(&state, &update(0, 4, net.init_params(1), ExchangeMode::Model), &DelayPolicy::Fixed(0), 0), GateDecision::Hold);
        assert_eq!(delay_gate(&state, &stale, &DelayPolicy::Fixed(3), 0), GateDecision::Hold);
    }

    #[test]
    fn model_averaging_rules() {
        let net = tiny_net();
        let m = net.init_params(3);
        let mut state = GlobalModelState::new(net.init_params(4));
        for k in 0..200 {
            let upd = update(k % 2, state.version, m.clone(), ExchangeMode::Model);
            apply_update(&mut state, &upd, 2).unwrap();
        }
        assert!(state.params.values.iter().zip(&m.values).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(state.version, 200);
        assert_eq!(state.update_log.len(), 200);

        let mut state = GlobalModelState::new(ParameterVector::zeros_like(&m));
        let neg = ParameterVector { values: m.values.iter().map(|v| -v).collect(), ..m.clone() };
        apply_update(&mut state, &update(0, 0, m.clone(), ExchangeMode::Model), 2).unwrap();
        apply_update(&mut state, &update(1, 0, neg, ExchangeMode::Model), 2).unwrap();
        // 0 -> m/2 -> m/4 - m/2
        for (g, w) in state.params.values.iter().zip(&m.values) {
            assert!((g + 0.25 * w).abs() < 1e-15);
        }

        let mut state = GlobalModelState::new(net.init_params(9));
        apply_update(&mut state, &update(0, 0, m.clone(), ExchangeMode::Model), 1).unwrap();
        assert_eq!(state.params.values, m.values);
    }

    #[test]
    fn gradient_exchange_rule() {
        let net = tiny_net();
        let g = net.init_params(3);
        let start = net.init_params(4);
        let mut state = GlobalModelState::new(start.clone());
        apply_update(&mut state, &update(0, 0, g.clone(), ExchangeMode::Gradient), 2).unwrap();
        for ((s, a), b) in state.params.values.iter().zip(&start.values).zip(&g.values) {
            assert!((s - (a - 0.25 * b)).abs() < 1e-15);
        }
        let bad = Network::new(NetworkConfig { hidden_dim: 2, ..NetworkConfig::default() }).unwrap();
        assert!(matches!(
            apply_update(&mut state, &update(0, 0, bad.init_params(0), ExchangeMode::Gradient), 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn client_round_edge_cases() {
        let net = tiny_net();
        let train = windows(30);
        let snap = net.init_params(1);
        let round = PlannedRound { index: 1, iterations: 10, per_client: 2, eta: 0.01, cum_start: 0 };
        let mut s = Sampler::for_client(&train, DataAccess::Shared, 6, 5, 0);
        assert!(client_round(&net, 5, &round, &snap, &mut s, ExchangeMode::Model, None).unwrap().is_none());

        let zero = ParameterVector::zeros_like(&snap);
        let mut s = Sampler::for_client(&train, DataAccess::Shared, 1, 0, 0);
        let round = PlannedRound { index: 1, iterations: 4, per_client: 4, eta: 0.01, cum_start: 0 };
        // all-zero weights leave only the output bias, whose gradient is the residual;
        // zero residual windows would be needed for a zero gradient, so use a flat series
        let flat: Vec<NormalizedWindow> = (0..5).map(|k| normalize_window(&[50.0; 5], k).unwrap()).collect();
        let mut fs = Sampler::new(&flat, rng::stream(0, rng::CLIENT_DRAWS, 0));
        let upd = client_round(&net, 0, &round, &zero, &mut fs, ExchangeMode::Gradient, None).unwrap().unwrap();
        assert!(upd.payload.values.iter().all(|&v| v == 0.0));
        assert_eq!(upd.iterations_done, 4);

        let upd = client_round(&net, 0, &round, &snap, &mut s, ExchangeMode::Model, None).unwrap().unwrap();
        assert_eq!(upd.bytes, 8 * snap.len() as u64);
        assert_eq!(upd.base_version, snap.version);
    }

    #[test]
    fn audit_catches_injected_stale_entry() {
        let log = vec![
            LogEntry { version: 1, client_id: 0, base_version: 0, round_index: 1, iterations: 5 },
            LogEntry { version: 2, client_id: 1, base_version: 1, round_index: 1, iterations: 5 },
            LogEntry { version: 3, client_id: 0, base_version: 2, round_index: 2, iterations: 5 },
        ];
        assert!(audit_delay_consistency(&log, &DelayPolicy::Fixed(0)).is_ok());
        let mut bad = log.clone();
        bad.push(LogEntry { version: 4, client_id: 1, base_version: 0, round_index: 2, iterations: 5 });
        let v = audit_delay_consistency(&bad, &DelayPolicy::Fixed(1)).unwrap_err();
        assert_eq!(v.entry, bad[3]);
        assert!(audit_delay_consistency(&bad, &DelayPolicy::Fixed(3)).is_ok());
        assert!(audit_delay_consistency(&bad, &DelayPolicy::None).is_ok());
    }

    fn config(n: usize, k: u64, mode: ExchangeMode, delay: DelayPolicy, execution: Execution) -> ExperimentConfig {
        let plan = build_round_plan(k, &SampleSizeSchedule::new(2.0, 1.0, 0.0).unwrap(), &StepSizeSchedule::new(0.05, 0.01).unwrap(), n).unwrap();
        ExperimentConfig {
            network: tiny_net(),
            plan,
            mode,
            delay,
            data: DataAccess::Shared,
            execution,
            jitter: None,
            seed: 17,
            evl: None,
            eval_each_round: true,
            echo: Vec::new(),
            fingerprint: "test".into(),
        }
    }

    fn split(train: usize, test: usize) -> DatasetSplit {
        let d = chrono::NaiveDate::from_ymd_opt(2012, 1, 1).unwrap();
        let range = crate::data::DateRange { start: d, end: d };
        DatasetSplit { train: windows(train), test: windows(test), train_range: range, test_range: range, window: 4 }
    }

    #[test]
    fn deterministic_runs_conserve_and_repeat() {
        let data = split(40, 10);
        for n in [1, 3, 7] {
            for mode in [ExchangeMode::Model, ExchangeMode::Gradient] {
                let cfg = config(n, 150, mode, DelayPolicy::None, Execution::Deterministic);
                let a = run_experiment(&cfg, &data).unwrap();
                let b = run_experiment(&cfg, &data).unwrap();
                assert_eq!(a.state.params.values, b.state.params.values);
                assert_eq!(a.report.totals.iterations, 150);
                assert_eq!(a.report.totals.rounds, cfg.plan.num_rounds());
                let accepted: u64 = a.state.update_log.iter().map(|e| e.iterations).sum();
                assert_eq!(accepted, 150);
                if n > 1 {
                    assert_eq!(a.report.totals.max_staleness, n as u64 - 1);
                }
                for (m, r) in a.report.rounds.iter().zip(&cfg.plan.rounds) {
                    let participants = (0..n).filter(|&c| r.client_share(c) > 0).count() as u64;
                    let bytes = 8 * cfg.network.num_params() as u64;
                    assert_eq!(m.bytes_up, participants * bytes);
                    assert_eq!(m.bytes_down, participants * bytes);
                }
            }
        }
    }

    #[test]
    fn fixed_zero_delay_serialises_clients() {
        let data = split(40, 10);
        let cfg = config(4, 120, ExchangeMode::Model, DelayPolicy::Fixed(0), Execution::Deterministic);
        let out = run_experiment(&cfg, &data).unwrap();
        assert_eq!(out.report.totals.max_staleness, 0);
        let cfg = config(4, 120, ExchangeMode::Model, DelayPolicy::Fixed(0), Execution::Threaded);
        let out = run_experiment(&cfg, &data).unwrap();
        assert_eq!(out.report.totals.max_staleness, 0);
        assert!(audit_delay_consistency(&out.state.update_log, &DelayPolicy::Fixed(0)).is_ok());
    }

    #[test]
    fn single_client_matches_serial_loop() {
        let data = split(40, 10);
        for execution in [Execution::Deterministic, Execution::Threaded] {
            let cfg = config(1, 200, ExchangeMode::Model, DelayPolicy::None, execution);
            let out = run_experiment(&cfg, &data).unwrap();
            let serial = serial_baseline(&cfg.network, &cfg.plan, &data.train, cfg.seed, None).unwrap();
            assert_eq!(out.round_params.len(), serial.len());
            for (a, b) in out.round_params.iter().zip(&serial) {
                assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn threaded_runs_with_jitter_pass_audits() {
        let data = split(40, 10);
        for delay in [DelayPolicy::None, DelayPolicy::Fixed(1), DelayPolicy::SqrtLog { c: 1.0 }] {
            let mut cfg = config(3, 120, ExchangeMode::Model, delay, Execution::Threaded);
            cfg.jitter = Some(Duration::from_micros(300));
            let out = run_experiment(&cfg, &data).unwrap();
            assert!(audit_delay_consistency(&out.state.update_log, &delay).is_ok());
            audit_conservation(&out.state.update_log, &cfg.plan).unwrap();
        }
    }

    #[test]
    fn worker_failure_aborts_the_run() {
        let mut data = split(40, 10);
        // a window with the wrong length makes every client error out
        data.train = vec![NormalizedWindow { inputs: vec![], target: 0.0, base_price: 1.0, origin_index: 0 }];
        let cfg = config(3, 60, ExchangeMode::Model, DelayPolicy::None, Execution::Threaded);
        let err = run_experiment(&cfg, &data).unwrap_err();
        assert!(err.to_string().contains("aborted"), "{err}");
    }
}
