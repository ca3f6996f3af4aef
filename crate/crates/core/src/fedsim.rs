//! Federated averaging over simulated clients.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggkit::{optimal_convex_aggregation, ClassifierObjective, LambdaSearchConfig};
use crate::data::LabeledDataset;
use crate::nn::{
    backward, cross_entropy, evaluate, forward, sgd_step, Evaluation, LrSchedule, ModelSpec, ModelWeights, SgdConfig,
    SgdState,
};
use crate::seed::{derive_rng, mix, rng_from, stream, Rng};
use crate::{Error, Result};

/// One client's slice of the training set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub id: usize,
    /// Ascending indices into the training set.
    pub indices: Vec<usize>,
    pub class_counts: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `n` into integer parts proportional to `q`: floors first, then one
/// extra item to each of the largest fractional remainders (lower index wins
/// ties).
pub fn largest_remainder(q: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = q.iter().map(|&p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &m in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[m] += 1;
    }
    counts
}

fn class_members(labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} at item {i} ≥ {classes} classes")))?
            .push(i);
    }
    Ok(members)
}

fn assign(members: &[Vec<usize>], proportions: &[Vec<f64>], clients: usize) -> Result<Vec<ClientShard>> {
    let classes = members.len();
    let mut shards: Vec<ClientShard> = (0..clients)
        .map(|id| ClientShard {
            id,
            indices: Vec::new(),
            class_counts: vec![0; classes],
        })
        .collect();
    for (c, (items, q)) in members.iter().zip(proportions).enumerate() {
        if q.len() != clients {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} proportions for {clients} clients",
                q.len()
            )));
        }
        let counts = largest_remainder(q, items.len());
        let mut start = 0;
        for (shard, k) in shards.iter_mut().zip(counts) {
            shard.indices.extend_from_slice(&items[start..start + k]);
            shard.class_counts[c] = k;
            start += k;
        }
    }
    for s in &mut shards {
        s.indices.sort_unstable();
    }
    Ok(shards)
}

/// Deterministic split with given per-class client proportions; class items
/// are dealt out in index order.
pub fn partition_with_proportions(
    labels: &[usize],
    classes: usize,
    proportions: &[Vec<f64>],
) -> Result<Vec<ClientShard>> {
    if proportions.len() != classes {
        return Err(Error::InvalidArgument(format!(
            "{} proportion vectors for {classes} classes",
            proportions.len()
        )));
    }
    let clients = proportions.first().map_or(0, Vec::len);
    assign(&class_members(labels, classes)?, proportions, clients)
}

/// One Dirichlet(α·1) draw, as normalised Gamma(α, 1) variates.
pub fn dirichlet_sample(alpha: f64, m: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(format!("Dirichlet α = {alpha}: {e}")))?;
    let g: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = g.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return Ok(g.into_iter().map(|v| v / sum).collect());
    }
    // Every variate underflowed: the mass sits on one uniformly chosen client.
    let mut q = vec![0.0; m];
    q[rand::Rng::random_range(rng, 0..m)] = 1.0;
    Ok(q)
}

/// Non-IID split: for each class `c`, `q_c ~ Dirichlet(α)` over the clients
/// and the class's items (shuffled) are dealt out by largest remainder.
/// Shards can be empty for small `α`.
pub fn dirichlet_partition(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Dirichlet α must be positive, got {alpha}"
        )));
    }
    let mut members = class_members(labels, classes)?;
    let mut proportions = Vec::with_capacity(classes);
    for items in members.iter_mut() {
        items.shuffle(rng);
        proportions.push(dirichlet_sample(alpha, clients, rng)?);
    }
    let shards = assign(&members, &proportions, clients)?;
    let empty = shards.iter().filter(|s| s.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} of {clients} client shards are empty (α = {alpha})");
    }
    Ok(shards)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Algorithm {
    FedAvg,
    /// Adds `μ/2·‖θ − θ̄‖²` to each client objective.
    FedProx {
        mu: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Coefficients `|D_m| / |D|` over the participants.
    DataSize,
    /// Coefficients searched on the test set every round.
    OptimalConvex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub clients: usize,
    pub alpha: f64,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_period: usize,
    pub algorithm: Algorithm,
    pub aggregation: AggregationRule,
    /// Supplied by the caller; not serialised.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 10,
            alpha: 0.3,
            participation: 1.0,
            rounds: 100,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.1,
            lr_period: 30,
            algorithm: Algorithm::FedAvg,
            aggregation: AggregationRule::DataSize,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return bad("clients must be ≥ 1".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!("participation must lie in (0, 1], got {}", self.participation));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr, momentum and weight_decay must be non-negative".into());
        }
        if let Algorithm::FedProx { mu } = self.algorithm {
            if !(mu >= 0.0) {
                return bad(format!("FedProx μ must be ≥ 0, got {mu}"));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Step {
            base: self.lr,
            factor: self.lr_decay,
            period: self.lr_period,
        }
    }

    /// Learning rate of round `t ≥ 1`.
    pub fn round_lr(&self, t: usize) -> f64 {
        self.schedule().lr(t.saturating_sub(1))
    }

    pub fn participants_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).ceil() as usize).clamp(1, self.clients)
    }

    pub fn local(&self, round: usize) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            sgd: SgdConfig {
                lr: self.round_lr(round),
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            algorithm: self.algorithm,
        }
    }
}

/// Seed of client `client` in round `round`.
pub fn client_seed(master: u64, round: usize, client: usize) -> u64 {
    mix(master, &[stream::CLIENT, round as u64, client as u64])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub algorithm: Algorithm,
}

/// `μ/2·‖θ − anchor‖²` and its gradient `μ·(θ − anchor)`.
pub fn proximal_term(w: &ModelWeights, anchor: &ModelWeights, mu: f64) -> Result<(f64, ModelWeights)> {
    w.ensure_aligned(anchor)?;
    let mut grad = w.clone();
    let mut value = 0.0;
    for (g, &a) in grad.values_mut().zip(anchor.values()) {
        let d = *g - a;
        value += d * d;
        *g = mu * d;
    }
    Ok((0.5 * mu * value, grad))
}

/// `E` epochs of minibatch SGD from `init` over the given items. FedProx
/// follows each step with the exact proximal map of `μ/2·‖θ − init‖²`,
/// which stays stable for any `μ`. An empty shard returns `init`.
pub fn local_train(
    spec: &ModelSpec,
    data: &LabeledDataset,
    indices: &[usize],
    init: &ModelWeights,
    cfg: &LocalConfig,
    seed: u64,
) -> Result<ModelWeights> {
    let mut w = init.clone();
    if indices.is_empty() || cfg.epochs == 0 {
        return Ok(w);
    }
    let mut rng = rng_from(seed);
    let mut state = SgdState::new(cfg.sgd);
    let mut order = indices.to_vec();
    let prox = match cfg.algorithm {
        Algorithm::FedProx { mu } if mu > 0.0 => Some(cfg.sgd.lr * mu),
        _ => None,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(batch);
            let (logits, cache) = forward(spec, &w, &x)?;
            let ce = cross_entropy(&logits, &y)?;
            if !ce.loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            let grads = backward(&cache, &w, &ce.grad)?;
            sgd_step(&mut w, &grads.params, &mut state)?;
            if let Some(k) = prox {
                for (v, &a) in w.values_mut().zip(init.values()) {
                    *v = (*v + k * a) / (1.0 + k);
                }
            }
        }
    }
    Ok(w)
}

/// `Σ (n_m / Σn)·θ_m` over the given models.
pub fn fedavg_aggregate(models: &[(&ModelWeights, usize)]) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    if models.iter().any(|&(_, n)| n == 0) {
        return Err(Error::InvalidArgument("aggregation sizes must be positive".into()));
    }
    let total: usize = models.iter().map(|&(_, n)| n).sum();
    let coeffs: Vec<f64> = models.iter().map(|&(_, n)| n as f64 / total as f64).collect();
    let refs: Vec<&ModelWeights> = models.iter().map(|&(w, _)| w).collect();
    ModelWeights::convex_combination(&refs, &coeffs)
}

/// Accuracies are snapped to multiples of 2⁻⁴⁰ so that sums and differences
/// of them are exact in `f64`.
pub const ACCURACY_GRID: f64 = 1.0 / (1u64 << 40) as f64;

pub fn quantize_accuracy(a: f64) -> f64 {
    (a / ACCURACY_GRID).round() * ACCURACY_GRID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client: usize,
    pub size: usize,
    /// Test accuracy of the locally trained model.
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub lr: f64,
    pub n_participants: usize,
    pub acc_global_prev: f64,
    /// Size-weighted mean test accuracy of the local models.
    pub acc_local_mean: f64,
    pub delta_l: f64,
    pub delta_g: f64,
    pub acc_global: f64,
    pub loss_global: f64,
    pub clients: Vec<ClientRecord>,
    /// Sampled clients skipped because their shard is empty.
    pub skipped_empty: Vec<usize>,
    /// Aggregation coefficients used, in participant order.
    pub coefficients: Vec<f64>,
}

pub const METRICS_HEADER: &str =
    "round,lr,n_participants,acc_global_prev,acc_local_mean,delta_L,delta_G,acc_global,loss_global";

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            m.round,
            m.lr,
            m.n_participants,
            m.acc_global_prev,
            m.acc_local_mean,
            m.delta_l,
            m.delta_g,
            m.acc_global,
            m.loss_global
        );
    }
    out
}

pub fn client_metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from("round,client,size,acc_local,loss_local\n");
    for m in metrics {
        for c in &m.clients {
            let _ = writeln!(out, "{},{},{},{},{}", m.round, c.client, c.size, c.accuracy, c.loss);
        }
    }
    out
}

/// Everything a round needs besides the evolving global model.
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
    pub shards: Vec<ClientShard>,
    pub config: FederationConfig,
    pub lambda_search: LambdaSearchConfig,
}

#[derive(Clone, Debug)]
pub struct LocalModel {
    pub client: usize,
    pub size: usize,
    pub weights: ModelWeights,
}

#[derive(Clone, Debug)]
pub struct FederationState {
    pub round: usize,
    pub global: ModelWeights,
    /// Test evaluation of `global`.
    pub eval: Evaluation,
    /// Client models the current global was aggregated from.
    pub local_models: Vec<LocalModel>,
}

impl<'a> Federation<'a> {
    /// Partitions `train` with the configured Dirichlet split.
    pub fn new(
        spec: &'a ModelSpec,
        train: &'a LabeledDataset,
        test: &'a LabeledDataset,
        config: FederationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, &[stream::PARTITION]);
        let shards = dirichlet_partition(&train.labels, train.classes, config.clients, config.alpha, &mut rng)?;
        Ok(Federation {
            spec,
            train,
            test,
            shards,
            config,
            lambda_search: LambdaSearchConfig::default(),
        })
    }

    pub fn start(&self, init: ModelWeights) -> Result<FederationState> {
        let eval = evaluate(self.spec, &init, &self.test.images, &self.test.labels)?;
        Ok(FederationState {
            round: 0,
            global: init,
            eval,
            local_models: Vec::new(),
        })
    }

    /// Clients sampled in round `t`, ascending.
    pub fn participants(&self, t: usize) -> Vec<usize> {
        let k = self.config.participants_per_round();
        let mut rng = derive_rng(self.config.seed, &[stream::PARTICIPATION, t as u64]);
        let mut ids = index::sample(&mut rng, self.config.clients, k).into_vec();
        ids.sort_unstable();
        ids
    }

    pub fn run_round(&self, state: &FederationState) -> Result<(FederationState, RoundMetrics)> {
        let t = state.round + 1;
        self.round_inner(state, t).map_err(|e| match e {
            e @ Error::Client { .. } => e,
            e => Error::Round {
                round: t,
                source: Box::new(e),
            },
        })
    }

    fn round_inner(&self, state: &FederationState, t: usize) -> Result<(FederationState, RoundMetrics)> {
        let local = self.config.local(t);
        let sampled = self.participants(t);
        let (active, skipped_empty): (Vec<usize>, Vec<usize>) =
            sampled.iter().partition(|&&m| !self.shards[m].is_empty());
        let trained = active
            .par_iter()
            .map(|&m| {
                let shard = &self.shards[m];
                let seed = client_seed(self.config.seed, t, m);
                let run = || -> Result<(ModelWeights, Evaluation)> {
                    let w = local_train(self.spec, self.train, &shard.indices, &state.global, &local, seed)?;
                    let e = evaluate(self.spec, &w, &self.test.images, &self.test.labels)?;
                    Ok((w, e))
                };
                run().map_err(|e| Error::Client {
                    round: t,
                    client: m,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let sizes: Vec<usize> = active.iter().map(|&m| self.shards[m].len()).collect();
        let acc_prev = quantize_accuracy(state.eval.accuracy);
        let (global, coefficients) = if trained.is_empty() {
            (state.global.clone(), Vec::new())
        } else {
            let models: Vec<(&ModelWeights, usize)> =
                trained.iter().map(|(w, _)| w).zip(sizes.iter().copied()).collect();
            match self.config.aggregation {
                AggregationRule::OptimalConvex if models.len() >= 2 => {
                    let owned: Vec<ModelWeights> = trained.iter().map(|(w, _)| w.clone()).collect();
                    let objective = ClassifierObjective {
                        spec: self.spec,
                        data: self.test,
                    };
                    let cfg = LambdaSearchConfig {
                        seed: mix(self.lambda_search.seed, &[t as u64]),
                        ..self.lambda_search.clone()
                    };
                    let search = optimal_convex_aggregation(&owned, &sizes, &objective, &cfg)?;
                    (search.model, search.lambda.as_slice().to_vec())
                }
                _ => {
                    let total: usize = sizes.iter().sum();
                    (
                        fedavg_aggregate(&models)?,
                        sizes.iter().map(|&n| n as f64 / total as f64).collect(),
                    )
                }
            }
        };
        let eval = evaluate(self.spec, &global, &self.test.images, &self.test.labels)?;
        let acc_new = quantize_accuracy(eval.accuracy);

        let clients: Vec<ClientRecord> = active
            .iter()
            .zip(&sizes)
            .zip(&trained)
            .map(|((&client, &size), (_, e))| ClientRecord {
                client,
                size,
                accuracy: e.accuracy,
                loss: e.loss,
            })
            .collect();
        let acc_local_mean = if clients.is_empty() {
            acc_prev
        } else {
            let total: usize = sizes.iter().sum();
            let mean = clients.iter().map(|c| c.size as f64 * c.accuracy).sum::<f64>() / total as f64;
            quantize_accuracy(mean)
        };
        let delta_l = acc_local_mean - acc_prev;
        let delta_g = acc_new - acc_local_mean;
        let metrics = RoundMetrics {
            round: t,
            lr: local.sgd.lr,
            n_participants: active.len(),
            acc_global_prev: acc_prev,
            acc_local_mean,
            delta_l,
            delta_g,
            acc_global: acc_new,
            loss_global: eval.loss,
            clients,
            skipped_empty,
            coefficients,
        };
        log::info!(
            "round {t}: acc {:.4} (ΔL {:+.4}, ΔG {:+.4}), loss {:.4}",
            acc_new,
            delta_l,
            delta_g,
            eval.loss
        );
        let local_models = active
            .iter()
            .zip(&sizes)
            .zip(trained)
            .map(|((&client, &size), (weights, _))| LocalModel { client, size, weights })
            .collect();
        Ok((
            FederationState {
                round: t,
                global,
                eval,
                local_models,
            },
            metrics,
        ))
    }

    pub fn run(&self, init: ModelWeights) -> Result<FederationOutcome> {
        let mut state = self.start(init)?;
        let mut metrics = Vec::with_capacity(self.config.rounds);
        for _ in 0..self.config.rounds {
            let (next, m) = self.run_round(&state)?;
            state = next;
            metrics.push(m);
        }
        Ok(FederationOutcome {
            weights: state.global,
            metrics,
            final_eval: state.eval,
            last_local: state.local_models,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub weights: ModelWeights,
    pub metrics: Vec<RoundMetrics>,
    pub final_eval: Evaluation,
    /// Client models of the final round.
    pub last_local: Vec<LocalModel>,
}

/// Partition, then `T` rounds of the configured protocol from `init`.
pub fn run_federation(
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    init: ModelWeights,
    config: &FederationConfig,
) -> Result<FederationOutcome> {
    Federation::new(spec, train, test, config.clone())?.run(init)
}

/// Plain minibatch SGD on the full training set, organised in rounds of
/// `local_epochs` epochs with the round schedule and the seed stream of
/// client 0. Momentum restarts every round.
pub fn train_centralized(
    spec: &ModelSpec,
    train: &LabeledDataset,
    init: ModelWeights,
    config: &FederationConfig,
) -> Result<ModelWeights> {
    config.validate()?;
    let mut w = init;
    for t in 1..=config.rounds {
        let mut rng = rng_from(client_seed(config.seed, t, 0));
        let mut state = SgdState::new(SgdConfig {
            lr: config.round_lr(t),
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        });
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..config.local_epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                let (x, y) = train.batch(batch);
                let (logits, cache) = forward(spec, &w, &x)?;
                let ce = cross_entropy(&logits, &y)?;
                let g = backward(&cache, &w, &ce.grad)?;
                sgd_step(&mut w, &g.params, &mut state)?;
            }
        }
    }
    Ok(w)
}
