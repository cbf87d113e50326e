//! Round orchestration: local training, uplink compression, weighted
//! aggregation and the optional compressed downlink.
//!
//! Under double-way compression the server keeps a broadcast lineage `v`,
//! the model every client actually holds. Each downlink compresses
//! `w^t - w^{t+1} + eps` against the prior `v^t`; clients apply the decoded
//! delta to their copy, so `v` stays identical on both sides. The identity
//! downlink sends `w^{t+1}` itself, which makes the uncompressed pipeline
//! reproduce FedAvg exactly.

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::compressors::{
    compress, decompress, CompressionContext, CompressorKind, ErrorState, Payload, SynthSettings, SyntheticPrior,
};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{compression_efficiency, evaluate, Efficiency, MetricsLog, RoundRecord};
use crate::models::{local_train, LocalTrainConfig, ModelSpec, ParamVector};
use crate::scalar::Scalar;
use crate::scheduler::BudgetPlan;
use crate::seed::{self, STAGE_BATCHING, STAGE_INIT, STAGE_SAMPLING, STAGE_SYNTH_INIT};

/// Participant index used for the server's synthetic-init stream.
pub const SERVER_PARTICIPANT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig<T> {
    /// Communication rounds T.
    pub rounds: usize,
    /// Learning rate, local iterations K and batch size.
    pub local: LocalTrainConfig<T>,
    pub uplink: CompressorKind,
    /// Only used when `double_way` is set.
    pub downlink: CompressorKind,
    pub double_way: bool,
    pub error_feedback: bool,
    /// Synthetic compressor settings, including S and lambda.
    pub synth: SynthSettings<T>,
    pub plan: BudgetPlan,
    /// Clients sampled per round; `None` means every client.
    pub clients_per_round: Option<usize>,
    pub seed: u64,
}

impl<T: Scalar> RoundConfig<T> {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(Error::Invalid("need at least one client".into()));
        }
        if self.local.steps == 0 {
            return Err(Error::Invalid("local iterations K must be >= 1".into()));
        }
        if self.local.batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if !(self.local.lr.is_finite() && self.local.lr >= T::zero()) {
            return Err(Error::Invalid(format!("learning rate must be finite and >= 0, got {}", self.local.lr)));
        }
        let uses_synth =
            self.uplink == CompressorKind::Synthetic || (self.double_way && self.downlink == CompressorKind::Synthetic);
        if uses_synth && self.synth.iters == 0 {
            return Err(Error::Invalid("synthetic iterations S must be >= 1".into()));
        }
        if self.plan.clients() != clients {
            return Err(Error::Invalid(format!(
                "budget plan covers {} clients, partition has {clients}",
                self.plan.clients()
            )));
        }
        if self.plan.rounds() != self.rounds {
            return Err(Error::Invalid(format!(
                "budget plan covers {} rounds, config asks for {}",
                self.plan.rounds(),
                self.rounds
            )));
        }
        if let Some(m) = self.clients_per_round {
            if m == 0 || m > clients {
                return Err(Error::Invalid(format!("clients per round must be in 1..={clients}, got {m}")));
            }
        }
        Ok(())
    }
}

/// What clients receive at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub enum Downlink<T> {
    /// The full model, replacing the client's copy.
    Model(ParamVector<T>),
    /// A compressed delta to subtract from the client's copy.
    Delta(Payload<T>),
}

impl<T: Scalar> Downlink<T> {
    pub fn cost(&self) -> usize {
        match self {
            Downlink::Model(w) => w.dim(),
            Downlink::Delta(p) => p.cost(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState<T> {
    pub global: ParamVector<T>,
    /// Model held by the clients; equals `global` unless the downlink is lossy.
    pub broadcast: ParamVector<T>,
    pub error: ErrorState<T>,
    pub uplink_total: usize,
    pub downlink_total: usize,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(w0: ParamVector<T>) -> Self {
        ServerState {
            error: ErrorState::new(w0.dim()),
            broadcast: w0.clone(),
            global: w0,
            uplink_total: 0,
            downlink_total: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<T> {
    pub id: usize,
    pub shard: ClientShard,
    pub model: ParamVector<T>,
    pub error: ErrorState<T>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(id: usize, shard: ClientShard, dim: usize) -> Self {
        ClientState {
            id,
            shard,
            model: ParamVector::zeros(dim),
            error: ErrorState::new(dim),
        }
    }
}

/// Everything one client produced in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<T> {
    pub client: usize,
    pub payload: Payload<T>,
    pub budget: usize,
    /// Local delta `w^t - w_i^t` before error feedback.
    pub raw: ParamVector<T>,
    pub target: ParamVector<T>,
    pub reconstruction: ParamVector<T>,
    pub efficiency: Efficiency,
    /// The budget was below the compressor's minimum and nothing was sent.
    pub starved: bool,
}

fn prior<'a, T: Scalar>(spec: &'a ModelSpec, w: &'a ParamVector<T>, settings: &SynthSettings<T>, seed: u64) -> SyntheticPrior<'a, T> {
    SyntheticPrior {
        model: spec,
        weights: w,
        settings: *settings,
        seed,
    }
}

/// Compresses within `budget`, falling back to an empty payload when the
/// budget cannot hold the compressor's smallest message.
fn compress_or_starve<T: Scalar>(
    kind: CompressorKind,
    target: &ParamVector<T>,
    budget: usize,
    prior: SyntheticPrior<'_, T>,
) -> Result<(Payload<T>, ParamVector<T>, bool)> {
    let ctx = CompressionContext {
        budget,
        prior: Some(prior),
    };
    match compress(kind, target, &ctx) {
        Ok(c) => Ok((c.payload, c.reconstruction, false)),
        Err(Error::BudgetTooSmall { .. }) => Ok((Payload::empty(target.dim()), ParamVector::zeros(target.dim()), true)),
        Err(e) => Err(e),
    }
}

/// Applies a downlink message to the client's model copy.
pub fn receive_downlink<T: Scalar>(
    spec: &ModelSpec,
    client: &mut ClientState<T>,
    message: &Downlink<T>,
    settings: &SynthSettings<T>,
) -> Result<()> {
    match message {
        Downlink::Model(w) => client.model = w.clone(),
        Downlink::Delta(p) => {
            // the seed only matters for compression, not decoding
            let delta = decompress(p, Some(&prior(spec, &client.model, settings, 0)))?;
            client.model = client.model.sub(&delta)?;
        }
    }
    Ok(())
}

/// One client's half of a round: local training from its current model,
/// compression of the delta plus residual, and the error-feedback update.
pub fn client_round<T: Scalar>(
    spec: &ModelSpec,
    data: &Dataset<T>,
    client: &mut ClientState<T>,
    t: usize,
    cfg: &RoundConfig<T>,
) -> Result<ClientUpdate<T>> {
    let i = client.id as u64;
    let budget = cfg.plan.budget(t, client.id);
    let trained = local_train(
        spec,
        &client.model,
        data,
        &client.shard,
        &cfg.local,
        seed::derive_indexed(cfg.seed, STAGE_BATCHING, t as u64, i),
    )?;
    let raw = client.model.sub(&trained)?;
    let target = if cfg.error_feedback {
        client.error.target(&raw)?
    } else {
        raw.clone()
    };
    let synth_seed = seed::derive_indexed(cfg.seed, STAGE_SYNTH_INIT, t as u64, i);
    let (payload, reconstruction, starved) =
        compress_or_starve(cfg.uplink, &target, budget, prior(spec, &client.model, &cfg.synth, synth_seed))?;
    if cfg.error_feedback {
        client.error.eps = target.sub(&reconstruction)?;
    }
    let mut efficiency = compression_efficiency(&reconstruction, &target)?;
    efficiency.degenerate |= starved;
    Ok(ClientUpdate {
        client: client.id,
        payload,
        budget,
        raw,
        target,
        reconstruction,
        efficiency,
        starved,
    })
}

/// `w <- w - sum_i p_i * decompress(payload_i)`, accumulated in the given
/// order. Payloads are decoded against the broadcast model. Returns the
/// applied aggregate update.
pub fn aggregate<T: Scalar>(
    spec: &ModelSpec,
    server: &mut ServerState<T>,
    payloads: &[(f64, &Payload<T>)],
    settings: &SynthSettings<T>,
) -> Result<ParamVector<T>> {
    let dim = server.global.dim();
    let mut update = ParamVector::zeros(dim);
    for (p, payload) in payloads {
        let g = decompress(payload, Some(&prior(spec, &server.broadcast, settings, 0)))?;
        if g.dim() != dim {
            return Err(Error::Dim { expected: dim, found: g.dim() });
        }
        update.axpy(T::lit(*p), &g)?;
        server.uplink_total += payload.cost();
    }
    server.global = server.global.sub(&update)?;
    Ok(update)
}

/// Prepares the message that starts round `t + 1`, given the aggregate
/// update applied at round `t`.
pub fn server_downlink<T: Scalar>(
    spec: &ModelSpec,
    server: &mut ServerState<T>,
    update: &ParamVector<T>,
    t: usize,
    cfg: &RoundConfig<T>,
) -> Result<Downlink<T>> {
    if !cfg.double_way || cfg.downlink == CompressorKind::Identity {
        server.broadcast = server.global.clone();
        return Ok(Downlink::Model(server.global.clone()));
    }
    let target = if cfg.error_feedback {
        server.error.target(update)?
    } else {
        update.clone()
    };
    let synth_seed = seed::derive_indexed(cfg.seed, STAGE_SYNTH_INIT, t as u64, SERVER_PARTICIPANT);
    let budget = cfg.plan.budget(t, 0);
    let (payload, reconstruction, _) =
        compress_or_starve(cfg.downlink, &target, budget, prior(spec, &server.broadcast, &cfg.synth, synth_seed))?;
    if cfg.error_feedback {
        server.error.eps = target.sub(&reconstruction)?;
    }
    server.broadcast = server.broadcast.sub(&reconstruction)?;
    Ok(Downlink::Delta(payload))
}

/// A record plus the raw client updates of one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome<T> {
    pub record: RoundRecord,
    pub updates: Vec<ClientUpdate<T>>,
}

/// A federated run in progress.
#[derive(Debug, Clone)]
pub struct Federation<'a, T: Scalar> {
    spec: &'a ModelSpec,
    train: &'a Dataset<T>,
    test: &'a Dataset<T>,
    cfg: RoundConfig<T>,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
    pending: Downlink<T>,
    round: usize,
}

impl<'a, T: Scalar> Federation<'a, T> {
    pub fn new(
        spec: &'a ModelSpec,
        train: &'a Dataset<T>,
        test: &'a Dataset<T>,
        shards: &[ClientShard],
        cfg: RoundConfig<T>,
    ) -> Result<Self> {
        spec.validate()?;
        cfg.validate(shards.len())?;
        for d in [train, test] {
            if d.dim != spec.features() {
                return Err(Error::Dim {
                    expected: spec.features(),
                    found: d.dim,
                });
            }
            if d.classes > spec.classes() {
                return Err(Error::Invalid(format!(
                    "dataset has {} classes, model outputs {}",
                    d.classes,
                    spec.classes()
                )));
            }
        }
        let w0: ParamVector<T> = spec.init_params(seed::derive(cfg.seed, STAGE_INIT));
        let dim = w0.dim();
        let clients = shards
            .iter()
            .enumerate()
            .map(|(i, s)| ClientState::new(i, s.clone(), dim))
            .collect();
        Ok(Federation {
            spec,
            train,
            test,
            cfg,
            pending: Downlink::Model(w0.clone()),
            server: ServerState::new(w0),
            clients,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &RoundConfig<T> {
        &self.cfg
    }

    /// The message clients will receive at the start of the next round.
    pub fn pending_downlink(&self) -> &Downlink<T> {
        &self.pending
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.cfg.rounds
    }

    fn participants(&self, t: usize) -> Vec<usize> {
        let n = self.clients.len();
        match self.cfg.clients_per_round {
            Some(m) if m < n => {
                let mut rng = seed::rng(seed::derive_indexed(self.cfg.seed, STAGE_SAMPLING, t as u64, 0));
                let mut chosen = sample(&mut rng, n, m).into_vec();
                chosen.sort_unstable();
                chosen
            }
            _ => (0..n).collect(),
        }
    }

    /// Runs one full round and returns its record.
    pub fn step(&mut self) -> Result<RoundOutcome<T>> {
        if self.is_finished() {
            return Err(Error::Invalid(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let t = self.round;
        let (spec, train, cfg) = (self.spec, self.train, &self.cfg);

        let pending = &self.pending;
        self.clients
            .par_iter_mut()
            .try_for_each(|c| receive_downlink(spec, c, pending, &cfg.synth))?;
        let downlink_cost = self.clients.len() * self.pending.cost();
        self.server.downlink_total += downlink_cost;
        let lineage_consistent = self.clients.iter().all(|c| c.model == self.server.broadcast);

        let participants = self.participants(t);
        let mut active = vec![false; self.clients.len()];
        participants.iter().for_each(|&i| active[i] = true);
        let updates: Vec<ClientUpdate<T>> = self
            .clients
            .par_iter_mut()
            .filter(|c| active[c.id])
            .map(|c| client_round(spec, train, c, t, cfg))
            .collect::<Result<_>>()?;

        let full = participants.len() == self.clients.len();
        let mass: f64 = participants.iter().map(|&i| self.clients[i].shard.weight).sum();
        let weighted: Vec<(f64, &Payload<T>)> = updates
            .iter()
            .map(|u| {
                let p = self.clients[u.client].shard.weight;
                (if full { p } else { p / mass }, &u.payload)
            })
            .collect();
        let uplink_before = self.server.uplink_total;
        let update = aggregate(spec, &mut self.server, &weighted, &cfg.synth)?;
        let uplink_cost = self.server.uplink_total - uplink_before;

        let (_, train_loss) = evaluate(spec, &self.server.global, train)?;
        let (test_acc, test_loss) = evaluate(spec, &self.server.global, self.test)?;
        let client_eff: Vec<f64> = updates.iter().map(|u| u.efficiency.value).collect();
        let mean_eff = if client_eff.is_empty() {
            0.0
        } else {
            client_eff.iter().sum::<f64>() / client_eff.len() as f64
        };
        let record = RoundRecord {
            t,
            train_loss,
            test_loss,
            test_acc,
            uplink_cost,
            downlink_cost,
            budget_used: updates.iter().map(|u| u.budget).sum(),
            client_eff,
            mean_eff,
            participants,
            degenerate: updates.iter().filter(|u| u.efficiency.degenerate).count(),
            lineage_consistent,
        };

        if t + 1 < cfg.rounds {
            self.pending = server_downlink(spec, &mut self.server, &update, t, cfg)?;
        }
        self.round += 1;
        Ok(RoundOutcome { record, updates })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult<T: Scalar> {
    pub log: MetricsLog,
    pub server: ServerState<T>,
    pub clients: Vec<ClientState<T>>,
}

impl<T: Scalar> ExperimentResult<T> {
    pub fn weights(&self) -> &ParamVector<T> {
        &self.server.global
    }
}

/// Runs all configured rounds.
pub fn run_experiment<T: Scalar>(
    spec: &ModelSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
    shards: &[ClientShard],
    cfg: RoundConfig<T>,
) -> Result<ExperimentResult<T>> {
    let mut fed = Federation::new(spec, train, test, shards, cfg)?;
    let mut log = MetricsLog::default();
    while !fed.is_finished() {
        log.push(fed.step()?.record);
    }
    Ok(ExperimentResult {
        log,
        server: fed.server,
        clients: fed.clients,
    })
}
