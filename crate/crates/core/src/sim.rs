//! Deterministic discrete-event simulation of a client pool and a server.
//!
//! Asynchronous strategies keep up to `ceil(concurrency_rate * n_clients)`
//! clients training at once. Every event carries `(time, sequence)`; ties at
//! equal time resolve by insertion order, so a run is a pure function of its
//! configuration and seeds.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

use crate::config::{data_root, locate_idx_pair, Config, DatasetConfig, LatencyConfig, LatencyKind};
use crate::data::{
    dirichlet_partition, load_idx, make_calibration_batch, make_synthetic, train_test_split,
    ClientShards, Dataset,
};
use crate::error::{Error, Result};
use crate::metrics::{alignment_probe, evaluate, CurvePoint, Diagnostics, RunRecord};
use crate::model::{init_params, local_update, Batch, ModelSpec};
use crate::params::ParamVector;
use crate::seeds::{self, Stream};
use crate::sensitivity::{ProjectionMatrix, Signal, Sketcher};
use crate::strategy::{PsaVariant, ServerState, Strategy, UpdateEnvelope};

/// Virtual clock in atomic time units (86,400 per day).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct VirtualClock {
    now: u64,
}

impl VirtualClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    fn advance_to(&mut self, t: u64) -> Result<()> {
        if t < self.now {
            return Err(Error::Contract(format!(
                "clock would move backwards from {} to {t}",
                self.now
            )));
        }
        self.now = t;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LatencyModel {
    Uniform { lo: u64, hi: u64 },
    /// `lo + floor((hi - lo) * min(1, X))` where `X` is a Pareto draw with
    /// scale 1/20 shifted to start at zero, so most responses cluster near `lo`.
    LongTail { lo: u64, hi: u64, shape: f64 },
}

const LONG_TAIL_SCALE: f64 = 0.05;

impl LatencyModel {
    pub fn from_config(c: &LatencyConfig) -> Self {
        match c.kind {
            LatencyKind::Uniform => LatencyModel::Uniform { lo: c.lo, hi: c.hi },
            LatencyKind::LongTail => LatencyModel::LongTail {
                lo: c.lo,
                hi: c.hi,
                shape: c.tail_shape,
            },
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match *self {
            LatencyModel::Uniform { lo, hi } => rng.random_range(lo..=hi),
            LatencyModel::LongTail { lo, hi, shape } => {
                let pareto = Pareto::new(LONG_TAIL_SCALE, shape).expect("validated shape");
                let x: f64 = (pareto.sample(rng) - LONG_TAIL_SCALE).min(1.0);
                (lo + ((hi - lo) as f64 * x).floor() as u64).clamp(lo, hi)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Event {
    EvalCheckpoint,
    AdmitClients,
    ClientFinish(usize),
}

/// Min-heap on `(time, sequence)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<(u64, u64, Event)>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: u64, event: Event) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((time, seq, event)));
        seq
    }

    pub fn pop(&mut self) -> Option<(u64, u64, Event)> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum ClientState {
    Idle,
    Training {
        finish_time: u64,
        origin_version: u64,
        start: Arc<ParamVector>,
        lr: f64,
    },
}

#[derive(Debug)]
pub struct Client {
    pub id: usize,
    pub state: ClientState,
    latency: ChaCha8Rng,
    /// Completed local trainings.
    pub rounds: u64,
}

/// The clients and the admission cap.
#[derive(Debug)]
pub struct ClientPool {
    pub clients: Vec<Client>,
    cap: usize,
    busy: usize,
    latency: LatencyModel,
}

impl ClientPool {
    pub fn new(n_clients: usize, concurrency_rate: f64, latency: LatencyModel, master_seed: u64) -> Self {
        let clients = (0..n_clients)
            .map(|id| Client {
                id,
                state: ClientState::Idle,
                latency: seeds::stream_rng(master_seed, Stream::Latency, id as u64),
                rounds: 0,
            })
            .collect();
        ClientPool {
            clients,
            cap: concurrency_cap(n_clients, concurrency_rate),
            busy: 0,
            latency,
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn busy(&self) -> usize {
        self.busy
    }

    fn sample_latency(&mut self, client: usize) -> u64 {
        let model = self.latency;
        model.sample(&mut self.clients[client].latency)
    }

    fn start(&mut self, client: usize, now: u64, origin_version: u64, start: Arc<ParamVector>, lr: f64) -> u64 {
        let finish_time = now + self.sample_latency(client);
        self.clients[client].state = ClientState::Training {
            finish_time,
            origin_version,
            start,
            lr,
        };
        self.busy += 1;
        finish_time
    }

    fn finish(&mut self, client: usize) -> ClientState {
        let state = std::mem::replace(&mut self.clients[client].state, ClientState::Idle);
        if matches!(state, ClientState::Training { .. }) {
            self.busy -= 1;
            self.clients[client].rounds += 1;
        }
        state
    }
}

pub fn concurrency_cap(n_clients: usize, rate: f64) -> usize {
    ((rate * n_clients as f64).ceil() as usize).clamp(1, n_clients.max(1))
}

/// A client admitted by [`admit_clients`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Started {
    pub client: usize,
    pub finish_time: u64,
}

/// Starts idle clients, chosen uniformly at random, until the cap is reached.
pub fn admit_clients(
    pool: &mut ClientPool,
    now: u64,
    rng: &mut impl Rng,
    origin_version: u64,
    start: &Arc<ParamVector>,
    lr: f64,
) -> Vec<Started> {
    let mut idle: Vec<usize> = pool
        .clients
        .iter()
        .filter(|c| matches!(c.state, ClientState::Idle))
        .map(|c| c.id)
        .collect();
    let mut started = Vec::new();
    while pool.busy < pool.cap && !idle.is_empty() {
        let client = idle.remove(rng.random_range(0..idle.len()));
        let finish_time = pool.start(client, now, origin_version, Arc::clone(start), lr);
        started.push(Started { client, finish_time });
    }
    started
}

/// Immutable inputs of a run: data shards, test set, calibration and projection.
#[derive(Debug)]
pub struct Environment {
    pub spec: ModelSpec,
    pub shards: ClientShards,
    pub test: Dataset,
    pub init: ParamVector,
    pub sketcher: Option<Arc<Sketcher>>,
    pub probe_batch: Option<Batch>,
}

pub fn load_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    match config {
        DatasetConfig::Synthetic {
            classes,
            in_dim,
            per_class,
        } => make_synthetic(*classes, *in_dim, *per_class, seed),
        DatasetConfig::Fmnist => {
            let (i, l) = locate_idx_pair(&data_root().join("fmnist"))?;
            load_idx(i, l)
        }
        DatasetConfig::Mnist => {
            let (i, l) = locate_idx_pair(&data_root().join("mnist"))?;
            load_idx(i, l)
        }
        DatasetConfig::Idx { images, labels } => load_idx(images, labels),
    }
}

/// Builds the environment for `config`, reusing an already loaded dataset if given.
pub fn prepare(config: &Config, dataset: Option<&Dataset>) -> Result<Environment> {
    let master = config.seed;
    let loaded;
    let full = match dataset {
        Some(d) => d,
        None => {
            loaded = load_dataset(&config.dataset, seeds::derive(master, Stream::Data, 0))?;
            &loaded
        }
    };
    let (train, test) = train_test_split(full, config.test_fraction, seeds::derive(master, Stream::Split, 0))?;
    let plan = dirichlet_partition(
        &train,
        config.n_clients,
        config.alpha,
        seeds::derive(master, Stream::Partition, 0),
    )?;
    let shards = ClientShards::new(&train, &plan);
    let spec = config.model_spec(train.in_dim(), train.n_classes());
    let d = spec.param_count();
    if config.k > d {
        return Err(Error::Config(vec![format!("k = {} exceeds parameter count d = {d}", config.k)]));
    }
    let init = init_params(&spec, seeds::derive(master, Stream::Init, 0));

    let strategy = config.strategy();
    let sketcher = if strategy.uses_sketches() {
        let calibration = make_calibration_batch(
            config.calibration.source,
            train.in_dim(),
            config.calibration.size,
            seeds::derive(master, Stream::Calibration, 0),
            Some(&train),
        )?;
        let projection = ProjectionMatrix::gaussian(seeds::derive(master, Stream::Projection, 0), config.k, d)?;
        let signal = match strategy {
            Strategy::FedPsa(p) if p.variant == PsaVariant::NoSensitivity => Signal::RawParameters,
            _ => Signal::Sensitivity,
        };
        Some(Arc::new(Sketcher {
            spec,
            calibration,
            projection,
            unlabeled: config.calibration.unlabeled_loss,
            signal,
        }))
    } else {
        None
    };

    let probe_batch = if config.probe.enabled {
        let n = config.probe.batch_size.min(test.len());
        let rows = rand::seq::index::sample(
            &mut seeds::stream_rng(master, Stream::Probe, 0),
            test.len(),
            n,
        )
        .into_vec();
        Some(test.gather(&rows).view().to_owned())
    } else {
        None
    };

    Ok(Environment {
        spec,
        shards,
        test,
        init,
        sketcher,
        probe_batch,
    })
}

/// One line of the event trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time: u64,
    pub seq: u64,
    pub client: Option<usize>,
    pub version: u64,
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Admit,
    Upload,
    Aggregate,
    Eval,
}

/// A finished simulation plus its event trace.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub record: RunRecord,
    pub trace: Vec<TraceEntry>,
}

pub fn run_simulation(config: &Config) -> Result<RunRecord> {
    let env = prepare(config, None)?;
    Ok(simulate(config, &env)?.record)
}

/// Runs `config` over a prepared environment.
pub fn simulate(config: &Config, env: &Environment) -> Result<SimOutput> {
    if config.strategy().is_synchronous() {
        synchronous_round_driver(config, env)
    } else {
        Simulation::new(config, env)?.run()
    }
}

fn eval_times(horizon: u64, every: u64) -> Vec<u64> {
    let mut times: Vec<u64> = (0..=horizon / every).map(|i| i * every).collect();
    if *times.last().expect("t = 0 present") != horizon {
        times.push(horizon);
    }
    times
}

fn record_staleness(hist: &mut Vec<u64>, tau: u64) {
    let tau = tau as usize;
    if hist.len() <= tau {
        hist.resize(tau + 1, 0);
    }
    hist[tau] += 1;
}

/// Local training for one client: SGD from its start point, then the envelope.
fn train_client(
    config: &Config,
    env: &Environment,
    client: usize,
    round: u64,
    start: &ParamVector,
    lr: f64,
    origin_version: u64,
    now: u64,
) -> Result<(UpdateEnvelope, ParamVector)> {
    let shard = env.shards.client(client);
    let seed = seeds::derive(config.seed, Stream::Shuffle, ((client as u64) << 32) | round);
    let trained = local_update(&env.spec, start, &shard, config.epochs, config.batch_size, lr, seed)?;
    let delta = trained.sub(start)?;
    let sketch = match &env.sketcher {
        Some(s) => Some(s.sketch_params(&trained)?),
        None => None,
    };
    Ok((
        UpdateEnvelope::new(client, delta, sketch, origin_version, now, shard.len()),
        trained,
    ))
}

struct Simulation<'a> {
    config: &'a Config,
    env: &'a Environment,
    server: ServerState,
    pool: ClientPool,
    queue: EventQueue,
    clock: VirtualClock,
    admission: ChaCha8Rng,
    snapshot: Option<(u64, Arc<ParamVector>)>,
    curve: Vec<CurvePoint>,
    events: Vec<crate::strategy::AggregationEvent>,
    probe: Vec<crate::metrics::AlignmentSample>,
    trace: Vec<TraceEntry>,
    diagnostics: Diagnostics,
}

impl<'a> Simulation<'a> {
    fn new(config: &'a Config, env: &'a Environment) -> Result<Self> {
        let server = ServerState::new(env.init.clone(), config.strategy(), env.sketcher.clone())?;
        let pool = ClientPool::new(
            config.n_clients,
            config.concurrency_rate,
            LatencyModel::from_config(&config.latency),
            config.seed,
        );
        Ok(Simulation {
            config,
            env,
            server,
            pool,
            queue: EventQueue::default(),
            clock: VirtualClock::default(),
            admission: seeds::stream_rng(config.seed, Stream::Admission, 0),
            snapshot: None,
            curve: Vec::new(),
            events: Vec::new(),
            probe: Vec::new(),
            trace: Vec::new(),
            diagnostics: Diagnostics::default(),
        })
    }

    fn global_snapshot(&mut self) -> Arc<ParamVector> {
        let version = self.server.version();
        match &self.snapshot {
            Some((v, p)) if *v == version => Arc::clone(p),
            _ => {
                let p = Arc::new(self.server.global().clone());
                self.snapshot = Some((version, Arc::clone(&p)));
                p
            }
        }
    }

    fn client_lr(&self) -> f64 {
        self.config.lr * self.config.lr_decay.powf(self.server.version() as f64)
    }

    fn run(mut self) -> Result<SimOutput> {
        let horizon = self.config.horizon_units();
        for t in eval_times(horizon, self.config.eval_every) {
            self.queue.push(t, Event::EvalCheckpoint);
        }
        if horizon > 0 {
            self.queue.push(0, Event::AdmitClients);
        }
        while let Some(t) = self.queue.peek_time() {
            if t > horizon {
                break;
            }
            let (time, seq, event) = self.queue.pop().expect("peeked");
            self.clock.advance_to(time)?;
            let client = match event {
                Event::ClientFinish(c) => Some(c),
                _ => None,
            };
            self.handle(time, seq, event).map_err(|e| match e {
                Error::Simulation { .. } => e,
                other => Error::Simulation {
                    time,
                    client,
                    source: Box::new(other),
                },
            })?;
            if self.pool.busy() > self.pool.cap() {
                return Err(Error::Contract(format!(
                    "concurrency cap exceeded at t={time}: {} > {}",
                    self.pool.busy(),
                    self.pool.cap()
                )));
            }
            self.diagnostics.max_concurrent = self.diagnostics.max_concurrent.max(self.pool.busy());
        }
        if let Some(thermo) = self.server.thermometer() {
            self.diagnostics.thermometer_m0 = thermo.m0();
            self.diagnostics.thermometer_m0_clamped = thermo.m0_clamped();
        }
        self.diagnostics.aggregations = self.server.version();
        Ok(SimOutput {
            record: RunRecord {
                curve: self.curve,
                events: self.events,
                final_params: self.server.global().clone(),
                config_hash: self.config.hash(),
                probe: self.probe,
                diagnostics: self.diagnostics,
            },
            trace: self.trace,
        })
    }

    fn trace(&mut self, time: u64, seq: u64, client: Option<usize>, kind: TraceKind) {
        self.trace.push(TraceEntry {
            time,
            seq,
            client,
            version: self.server.version(),
            kind,
        });
    }

    fn handle(&mut self, now: u64, seq: u64, event: Event) -> Result<()> {
        match event {
            Event::EvalCheckpoint => {
                let (acc, loss) = evaluate(&self.env.spec, self.server.global(), &self.env.test.view())?;
                self.curve.push(CurvePoint {
                    virtual_time: now,
                    version: self.server.version(),
                    test_accuracy: acc,
                    test_loss: loss,
                });
                self.trace(now, seq, None, TraceKind::Eval);
            }
            Event::AdmitClients => {
                let start = self.global_snapshot();
                let lr = self.client_lr();
                let version = self.server.version();
                let started = admit_clients(&mut self.pool, now, &mut self.admission, version, &start, lr);
                for s in started {
                    let seq = self.queue.push(s.finish_time, Event::ClientFinish(s.client));
                    self.trace(now, seq, Some(s.client), TraceKind::Admit);
                }
            }
            Event::ClientFinish(client) => {
                let round = self.pool.clients[client].rounds;
                let ClientState::Training {
                    finish_time,
                    origin_version,
                    start,
                    lr,
                } = self.pool.finish(client)
                else {
                    return Err(Error::Contract(format!("finish event for idle client {client}")));
                };
                if finish_time != now || origin_version > self.server.version() {
                    return Err(Error::Contract(format!(
                        "causality violated: client {client} scheduled for {finish_time} (origin v{origin_version}) processed at {now} (v{})",
                        self.server.version()
                    )));
                }
                let (envelope, trained) =
                    train_client(self.config, self.env, client, round, &start, lr, origin_version, now)?;
                self.diagnostics.uploads += 1;
                self.trace(now, seq, Some(client), TraceKind::Upload);

                // The probe compares against the global model the envelope was scored against.
                let pre_receipt = self.env.probe_batch.as_ref().map(|_| self.server.global().clone());
                let receipt = self.server.receive_update(envelope, now)?;
                record_staleness(&mut self.diagnostics.staleness_histogram, receipt.tau);
                if let (Some(global), Some(batch)) = (pre_receipt, &self.env.probe_batch) {
                    self.probe.push(alignment_probe(
                        &self.env.spec,
                        &global,
                        &trained,
                        &batch.view(),
                        receipt.kappa.unwrap_or(0.0),
                        now,
                    )?);
                }
                for ev in receipt.events {
                    self.trace(now, seq, None, TraceKind::Aggregate);
                    self.events.push(ev);
                }
                self.queue.push(now, Event::AdmitClients);
            }
        }
        Ok(())
    }
}

/// Synchronous FedAvg: each round samples `ceil(rate * n)` clients, waits for
/// the slowest, then averages their updates.
pub fn synchronous_round_driver(config: &Config, env: &Environment) -> Result<SimOutput> {
    let mut server = ServerState::new(env.init.clone(), config.strategy(), None)?;
    let mut pool = ClientPool::new(
        config.n_clients,
        config.concurrency_rate,
        LatencyModel::from_config(&config.latency),
        config.seed,
    );
    let mut rng = seeds::stream_rng(config.seed, Stream::Admission, 0);
    let horizon = config.horizon_units();
    let checkpoints = eval_times(horizon, config.eval_every);
    let mut next_checkpoint = 0;
    let mut clock = VirtualClock::default();
    let mut curve = Vec::new();
    let mut events = Vec::new();
    let mut trace = Vec::new();
    let mut diagnostics = Diagnostics::default();
    let mut seq = 0u64;

    let mut emit_until = |limit: u64, inclusive: bool, server: &ServerState, curve: &mut Vec<CurvePoint>, trace: &mut Vec<TraceEntry>, seq: &mut u64| -> Result<()> {
        while next_checkpoint < checkpoints.len()
            && (checkpoints[next_checkpoint] < limit || (inclusive && checkpoints[next_checkpoint] == limit))
        {
            let t = checkpoints[next_checkpoint];
            let (acc, loss) = evaluate(&env.spec, server.global(), &env.test.view())?;
            curve.push(CurvePoint {
                virtual_time: t,
                version: server.version(),
                test_accuracy: acc,
                test_loss: loss,
            });
            trace.push(TraceEntry {
                time: t,
                seq: *seq,
                client: None,
                version: server.version(),
                kind: TraceKind::Eval,
            });
            *seq += 1;
            next_checkpoint += 1;
        }
        Ok(())
    };

    loop {
        let start = Arc::new(server.global().clone());
        let lr = config.lr * config.lr_decay.powf(server.version() as f64);
        let now = clock.now();
        let started = admit_clients(&mut pool, now, &mut rng, server.version(), &start, lr);
        let round_end = started.iter().map(|s| s.finish_time).max().unwrap_or(now);
        if started.is_empty() || round_end > horizon {
            break;
        }
        emit_until(round_end, false, &server, &mut curve, &mut trace, &mut seq)?;
        clock.advance_to(round_end)?;
        diagnostics.max_concurrent = diagnostics.max_concurrent.max(pool.busy());
        let mut results = Vec::with_capacity(started.len());
        for s in &started {
            let round = pool.clients[s.client].rounds;
            pool.finish(s.client);
            let (envelope, _) = train_client(config, env, s.client, round, &start, lr, server.version(), round_end)
                .map_err(|e| Error::Simulation {
                    time: round_end,
                    client: Some(s.client),
                    source: Box::new(e),
                })?;
            trace.push(TraceEntry {
                time: round_end,
                seq,
                client: Some(s.client),
                version: server.version(),
                kind: TraceKind::Upload,
            });
            seq += 1;
            results.push(envelope);
        }
        diagnostics.uploads += results.len() as u64;
        for _ in &results {
            record_staleness(&mut diagnostics.staleness_histogram, 0);
        }
        events.push(server.run_fedavg_round(&results, round_end)?);
        trace.push(TraceEntry {
            time: round_end,
            seq,
            client: None,
            version: server.version(),
            kind: TraceKind::Aggregate,
        });
        seq += 1;
    }
    emit_until(horizon, true, &server, &mut curve, &mut trace, &mut seq)?;
    diagnostics.aggregations = server.version();
    Ok(SimOutput {
        record: RunRecord {
            curve,
            events,
            final_params: server.global().clone(),
            config_hash: config.hash(),
            probe: Vec::new(),
            diagnostics,
        },
        trace,
    })
}
