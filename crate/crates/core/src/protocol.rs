//! Round orchestration: local updates, intra-cluster aggregation, gossip
//! between edge servers, and the per-round trace.
//!
//! Each edge round:
//! 1. every device samples its cost state and, when the scheme needs them,
//!    estimates gradient variance and norm at its edge model;
//! 2. the coordinator projects the budgets and decides `(rho, theta)`;
//! 3. devices run `tau` Bernoulli-gated SGD steps from their edge model and
//!    upload a top-k sparsified delta;
//! 4. each edge server adds the mean delta of its cluster;
//! 5. every `q` edge rounds the edge servers gossip with the mixing matrix.
//!
//! The ledger is charged the expected cost of the decided `(rho, theta)`.
//! A round whose floor decision `(rho_min, theta_min)` already violates the
//! projected budgets, or whose decided cost would overrun the budgets
//! outright, runs at the floor instead and ends the run.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::compression::{random_k, top_k, CompressionRatio, Compressor, SparseDelta};
use crate::controller::{decide, estimate_sigma_g, ControlDecision, ControlParams, Scheme, SolverSettings};
use crate::cost::{
    cluster_round_times, project_constraints, round_energy, sample_device_state, BudgetLedger, DeviceState,
    HeterogeneityProfile, FEASIBILITY_TOLERANCE,
};
use crate::data::{apply_feature_shift, dirichlet_partition, generate_synthetic, holdout_split, Dataset, DeviceObjective, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{momentum_step, BatchSampler, LocalObjective, LossKind, LossModel, ModelVector};
use crate::rng::{stream, stream_key, Purpose};
use crate::topology::{max_learning_rate, ClusterTopology, GraphSpec};

/// Serialises non-finite budgets as the string `"inf"`.
mod unbounded {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// Total time (seconds) and energy (joules) a run may spend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    #[serde(with = "unbounded")]
    pub time: f64,
    #[serde(with = "unbounded")]
    pub energy: f64,
}

impl Budgets {
    pub const UNLIMITED: Budgets = Budgets { time: f64::INFINITY, energy: f64::INFINITY };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian class clusters.
    Synthetic { n_classes: usize, feature_dim: usize, n_samples: usize, class_sep: f64 },
    /// Header line, then rows of features with the integer label last.
    Csv { path: PathBuf, n_classes: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dirichlet concentration of the per-class device proportions.
    pub beta: f64,
    pub test_fraction: f64,
    /// Standard deviation of the per-device feature offsets; 0 disables.
    pub feature_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic { n_classes: 10, feature_dim: 20, n_samples: 12_800, class_sep: 3.0 },
            beta: 1.0,
            test_fraction: 0.1,
            feature_shift: 0.0,
        }
    }
}

/// Full description of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_devices: usize,
    pub n_clusters: usize,
    /// Global rounds.
    pub phi: usize,
    /// Edge rounds per global round.
    pub q: usize,
    /// Local iterations per edge round.
    pub tau: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Heavy-ball momentum of local steps. Zero is plain SGD, which is what
    /// the convergence analysis covers.
    pub momentum: f64,
    pub scheme: Scheme,
    pub topology: GraphSpec,
    pub profile: HeterogeneityProfile,
    pub budgets: Option<Budgets>,
    pub seed: u64,
    pub data: DataConfig,
    pub loss: LossKind,
    pub solver: SolverSettings,
    pub n_probes: usize,
    pub compressor: Compressor,
    /// Skip the check of `eta` against the convergence bound at full
    /// participation. The bound is far below rates that train in practice.
    pub allow_large_learning_rate: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_devices: 64,
            n_clusters: 8,
            phi: 30,
            q: 5,
            tau: 5,
            eta: 0.05,
            batch_size: 32,
            momentum: 0.0,
            scheme: Scheme::Hcef,
            topology: GraphSpec::Ring,
            profile: HeterogeneityProfile::default(),
            budgets: None,
            seed: 0,
            data: DataConfig::default(),
            loss: LossKind::Logistic,
            solver: SolverSettings::default(),
            n_probes: 5,
            compressor: Compressor::TopK,
            allow_large_learning_rate: false,
        }
    }
}

impl SimulationConfig {
    /// Structural checks that need no data or topology.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.phi == 0 || self.q == 0 || self.tau == 0 {
            return bad("phi, q and tau must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.n_clusters == 0 || self.n_devices < self.n_clusters {
            return bad(format!(
                "need at least one device per cluster ({} devices, {} clusters)",
                self.n_devices, self.n_clusters
            ));
        }
        let Some(b) = self.budgets else {
            return bad("budgets required".into());
        };
        if !(b.time > 0.0) || !(b.energy > 0.0) {
            return bad("budgets must be positive".into());
        }
        if self.n_probes < 2 {
            return bad("n_probes must be at least 2".into());
        }
        let s = &self.solver;
        if !(s.eps > 0.0) || s.max_iterations == 0 {
            return bad("solver eps must be positive and max_iterations at least 1".into());
        }
        let bounds_ok = |v: f64| v > 0.0 && v <= 1.0;
        if !bounds_ok(s.bounds.rho_min) || !bounds_ok(s.bounds.theta_min) {
            return bad("rho_min and theta_min must lie in (0, 1]".into());
        }
        if !(self.data.beta > 0.0) {
            return bad(format!("beta must be positive, got {}", self.data.beta));
        }
        if let GraphSpec::ErdosRenyi { p_edge } = self.topology {
            if !(p_edge > 0.0 && p_edge <= 1.0) {
                return bad(format!("p_edge must lie in (0, 1], got {p_edge}"));
            }
        }
        self.profile.validate()
    }
}

/// Loss and accuracy of a model on held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// One executed edge round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub global_round: usize,
    pub edge_round: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Expected time of every cluster in this round, backhaul included when
    /// the round closes a global round.
    pub cluster_times: Vec<f64>,
    pub cumulative_time: f64,
    pub cumulative_energy: f64,
    /// Same accounting with the realised number of SGD steps.
    pub realized_time: f64,
    pub realized_energy: f64,
    pub realized_steps: usize,
    pub mean_rho: f64,
    pub mean_theta: f64,
    pub iterations: usize,
    pub feasible: bool,
    /// Ran at `(rho_min, theta_min)` because the budgets were exhausted.
    pub floor_round: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    BudgetExhausted,
}

/// Result of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: Evaluation,
    pub traces: Vec<RoundTrace>,
    pub stop_reason: StopReason,
    pub zeta: f64,
    pub edge_list: String,
    pub final_model: ModelVector,
    pub edge_models: Vec<ModelVector>,
}

/// Fixed parameters of a device's local round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub tau: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub compressor: Compressor,
    /// Heavy-ball coefficient; the velocity starts at zero every round.
    pub momentum: f64,
}

/// One device's local round from edge model `y`: `tau` iterations, each an
/// SGD step with probability `rho` and a zero step otherwise, then the
/// compressed displacement. Returns the delta and the number of SGD steps.
#[allow(clippy::too_many_arguments)]
pub fn local_round<O: LocalObjective + ?Sized>(
    objective: &O,
    sampler: &mut BatchSampler,
    y: &ModelVector,
    rho: f64,
    theta: CompressionRatio,
    settings: &LocalSettings,
    bernoulli: &mut ChaCha8Rng,
    compression: &mut ChaCha8Rng,
) -> Result<(SparseDelta, usize)> {
    let mut x = y.clone();
    let mut velocity = ModelVector::zeros(y.len());
    let mut steps = 0;
    for _ in 0..settings.tau {
        if bernoulli.random::<f64>() < rho {
            let batch = sampler.next_batch(settings.batch_size);
            let g = objective.gradient_at(&x, &batch)?;
            x = momentum_step(&x, &mut velocity, &g, settings.eta, settings.momentum)?;
            steps += 1;
        }
    }
    let delta = x.sub(y)?;
    let sparse = match settings.compressor {
        Compressor::TopK => top_k(&delta, theta)?,
        Compressor::RandomK => random_k(&delta, theta, compression)?,
    };
    Ok((sparse, steps))
}

/// `y + (1 / N_i) sum_n delta_n`, summing deltas in the given order.
pub fn intra_cluster_aggregate(y: &ModelVector, deltas: &[SparseDelta], n_i: usize) -> Result<ModelVector> {
    if deltas.len() != n_i || n_i == 0 {
        return Err(Error::DimensionMismatch { expected: n_i, actual: deltas.len() });
    }
    let mut sum = vec![0.0; y.len()];
    for delta in deltas {
        if delta.dim() != y.len() {
            return Err(Error::DimensionMismatch { expected: y.len(), actual: delta.dim() });
        }
        for (&i, &v) in delta.indices().iter().zip(delta.values()) {
            sum[i as usize] += v;
        }
    }
    let n = n_i as f64;
    ModelVector::new(y.as_slice().iter().zip(&sum).map(|(a, s)| a + s / n).collect())
}

/// `y_i' = sum_j H[j, i] y_j`.
pub fn inter_cluster_gossip(edge_models: &[ModelVector], h: &nalgebra::DMatrix<f64>) -> Result<Vec<ModelVector>> {
    let m = edge_models.len();
    if h.nrows() != m || h.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, actual: h.nrows() });
    }
    let d = edge_models.first().map_or(0, ModelVector::len);
    if let Some(bad) = edge_models.iter().find(|y| y.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, actual: bad.len() });
    }
    (0..m)
        .map(|i| {
            let mut out = vec![0.0; d];
            for (j, y) in edge_models.iter().enumerate() {
                let w = h[(j, i)];
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(y.as_slice()) {
                        *o += w * v;
                    }
                }
            }
            ModelVector::new(out)
        })
        .collect()
}

/// `sum_i (N_i / N) y_i`: the mean over devices when every device holds a
/// copy of its edge model. Uniform sizes give the plain mean.
pub fn averaged_model(models: &[ModelVector], sizes: &[usize]) -> Result<ModelVector> {
    if models.is_empty() {
        return Err(Error::InvalidParameter("no models to average".into()));
    }
    if sizes.len() != models.len() {
        return Err(Error::DimensionMismatch { expected: models.len(), actual: sizes.len() });
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidParameter("cluster sizes sum to zero".into()));
    }
    let d = models[0].len();
    let mut out = vec![0.0; d];
    for (y, &size) in models.iter().zip(sizes) {
        if y.len() != d {
            return Err(Error::DimensionMismatch { expected: d, actual: y.len() });
        }
        let w = size as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(y.as_slice()) {
            *o += w * v;
        }
    }
    ModelVector::new(out)
}

/// Training shards, held-out set and loss model for a config.
pub fn prepare_data(config: &SimulationConfig) -> Result<(Vec<Dataset>, Dataset, LossModel)> {
    let full = match &config.data.source {
        DataSource::Synthetic { n_classes, feature_dim, n_samples, class_sep } => {
            generate_synthetic(*n_classes, *feature_dim, *n_samples, *class_sep, config.seed)?
        }
        DataSource::Csv { path, n_classes } => Dataset::load_csv(path, *n_classes)?,
    };
    let (train, test) = holdout_split(&full, config.data.test_fraction, config.seed)?;
    let spec = PartitionSpec { n_devices: config.n_devices, beta: config.data.beta, seed: config.seed };
    let mut shards = dirichlet_partition(&train, &spec)?;
    if config.data.feature_shift > 0.0 {
        apply_feature_shift(&mut shards, config.data.feature_shift, config.seed);
    }
    let loss = match config.loss {
        LossKind::Logistic => LossModel::logistic(train.feature_dim(), train.n_classes())?,
        LossKind::Mlp { hidden } => LossModel::mlp(train.feature_dim(), hidden, train.n_classes())?,
    }
    .with_smoothness_from(train.features())?;
    Ok((shards, test, loss))
}

/// A fully prepared run.
pub struct Simulation {
    config: SimulationConfig,
    budgets: Budgets,
    shards: Vec<Dataset>,
    holdout: Dataset,
    loss: LossModel,
    topology: ClusterTopology,
    profile: HeterogeneityProfile,
    initial_model: ModelVector,
}

impl Simulation {
    /// Validates the config and builds data, topology and the initial model.
    pub fn new(config: SimulationConfig) -> Result<Self> {
        config.validate()?;
        let budgets = config.budgets.expect("validated");
        let (shards, holdout, loss) = prepare_data(&config)?;
        let graph = config.topology.build(config.n_clusters, config.seed)?;
        let topology = ClusterTopology::even(config.n_devices, graph)?;
        if !config.allow_large_learning_rate {
            let ones = vec![1.0; config.n_devices];
            let limit = max_learning_rate(topology.zeta(), config.q, config.tau, loss.l_estimate, &ones, &ones);
            if config.eta > limit {
                return Err(Error::InvalidParameter(format!(
                    "eta = {} exceeds the convergence bound {limit:.3e}; set allow_large_learning_rate to override",
                    config.eta
                )));
            }
        }
        let profile = HeterogeneityProfile {
            seed: stream_key(config.seed, Purpose::DeviceProfile, &[config.profile.seed]),
            ..config.profile
        };
        let initial_model = loss.init(&mut stream(config.seed, Purpose::ModelInit, &[]));
        Ok(Self { config, budgets, shards, holdout, loss, topology, profile, initial_model })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn holdout(&self) -> &Dataset {
        &self.holdout
    }

    pub fn loss_model(&self) -> &LossModel {
        &self.loss
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.topology
    }

    pub fn initial_model(&self) -> &ModelVector {
        &self.initial_model
    }

    /// Profile with the seed actually used for device states.
    pub fn profile(&self) -> &HeterogeneityProfile {
        &self.profile
    }

    pub fn evaluate(&self, model: &ModelVector) -> Result<Evaluation> {
        let batch = self.holdout.as_batch();
        Ok(Evaluation { loss: self.loss.loss(model, &batch)?, accuracy: self.loss.accuracy(model, &batch)? })
    }

    /// Per-cluster slowest backhaul exchange.
    pub fn backhaul_times(&self) -> Vec<f64> {
        let link = self.profile.backhaul_link_time(self.loss.dim());
        (0..self.topology.n_clusters())
            .map(|i| if self.topology.graph().degree(i) > 0 { link } else { 0.0 })
            .collect()
    }

    /// Cost states of every device at `(l, r)`, without estimates.
    pub fn device_states(&self, l: usize, r: usize) -> Vec<DeviceState> {
        (0..self.config.n_devices)
            .map(|n| sample_device_state(&self.profile, n, l, r, self.loss.dim()))
            .collect()
    }

    pub fn run(&self) -> Result<RunOutput> {
        let cfg = &self.config;
        let seed = cfg.seed;
        let n = cfg.n_devices;
        let m = self.topology.n_clusters();
        let sizes = self.topology.cluster_sizes();
        let backhaul = self.backhaul_times();
        let no_backhaul = vec![0.0; m];
        let local = LocalSettings {
            tau: cfg.tau,
            eta: cfg.eta,
            batch_size: cfg.batch_size,
            compressor: cfg.compressor,
            momentum: cfg.momentum,
        };
        let mut samplers: Vec<BatchSampler> = (0..n)
            .map(|k| BatchSampler::new(self.shards[k].len(), stream(seed, Purpose::BatchSampler, &[k as u64])))
            .collect();
        let mut edge_models = vec![self.initial_model.clone(); m];
        let mut ledger = BudgetLedger::new(self.budgets.time, self.budgets.energy, m)?;
        let mut realized = BudgetLedger::new(f64::INFINITY, f64::INFINITY, m)?;
        let mut realized_steps_total = 0;
        let mut traces = Vec::with_capacity(cfg.phi * cfg.q);
        let mut previous: Option<ControlDecision> = None;
        let lr_warned = AtomicBool::new(false);
        let initial = self.evaluate(&self.initial_model)?;
        let mut stop_reason = StopReason::Completed;

        'rounds: for l in 0..cfg.phi {
            for r in 0..cfg.q {
                let closes = r + 1 == cfg.q;
                let mut states = self.device_states(l, r);
                if cfg.scheme.uses_estimates() {
                    let estimates = (0..n)
                        .into_par_iter()
                        .map(|k| {
                            let objective = DeviceObjective { data: &self.shards[k], loss: &self.loss };
                            let y = &edge_models[self.topology.cluster_of(k)];
                            let mut rng = stream(seed, Purpose::Probe, &[k as u64, l as u64, r as u64]);
                            estimate_sigma_g(&objective, y, cfg.n_probes, cfg.batch_size, &mut rng)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    for (s, (sigma2, g2)) in states.iter_mut().zip(estimates) {
                        *s = s.with_estimates(sigma2, g2);
                    }
                }
                let constraints =
                    project_constraints(&ledger, cfg.phi, cfg.q, cfg.tau, self.topology.assignment(), &backhaul)?;
                let params = ControlParams::new(states, constraints, cfg.solver.bounds)?;
                let floor = ControlDecision::floor(&params);
                let round_backhaul = if closes { &backhaul } else { &no_backhaul };

                // only HCEF plans against the projection; the baselines run
                // until the actual budget guard below stops them
                let mut floor_round = cfg.scheme == Scheme::Hcef && !floor.feasible;
                let mut decision = if floor_round {
                    floor.clone()
                } else {
                    let mut d = decide(cfg.scheme, &params, &cfg.solver, previous.as_ref())?;
                    if cfg.scheme == Scheme::Hcef && !d.feasible {
                        log::debug!("round ({l}, {r}): alternating solve ended infeasible, using the floor");
                        d = floor.clone();
                    }
                    d
                };
                if !floor_round && !self.fits_budget(&ledger, &params.states, &decision, round_backhaul)? {
                    decision = floor;
                    floor_round = true;
                }
                if !lr_warned.load(Ordering::Relaxed) {
                    let limit = max_learning_rate(
                        self.topology.zeta(),
                        cfg.q,
                        cfg.tau,
                        self.loss.l_estimate,
                        &decision.rho,
                        &decision.theta,
                    );
                    if cfg.eta > limit {
                        lr_warned.store(true, Ordering::Relaxed);
                        log::warn!(
                            "round ({l}, {r}): eta = {} exceeds the convergence bound {limit:.3e} for the decided rho/theta",
                            cfg.eta
                        );
                    }
                }

                let outcomes = samplers
                    .par_iter_mut()
                    .enumerate()
                    .map(|(k, sampler)| {
                        let objective = DeviceObjective { data: &self.shards[k], loss: &self.loss };
                        let y = &edge_models[self.topology.cluster_of(k)];
                        let coords = [k as u64, l as u64, r as u64];
                        local_round(
                            &objective,
                            sampler,
                            y,
                            decision.rho[k],
                            CompressionRatio::new(decision.theta[k])?,
                            &local,
                            &mut stream(seed, Purpose::Bernoulli, &coords),
                            &mut stream(seed, Purpose::Compression, &coords),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;

                let mut next_models = Vec::with_capacity(m);
                for (i, members) in self.topology.clusters().iter().enumerate() {
                    let deltas: Vec<SparseDelta> = members.iter().map(|&k| outcomes[k].0.clone()).collect();
                    next_models.push(intra_cluster_aggregate(&edge_models[i], &deltas, members.len())?);
                }
                edge_models = next_models;

                // expected and realised accounting
                let mut cluster_times =
                    cluster_round_times(self.topology.clusters(), &params.states, &decision.rho, &decision.theta, cfg.tau)?;
                let energy = round_energy(&params.states, &decision.rho, &decision.theta, cfg.tau)?;
                ledger.record_edge_round(&cluster_times, energy)?;
                let steps: Vec<f64> = outcomes.iter().map(|o| o.1 as f64 / cfg.tau as f64).collect();
                realized_steps_total += outcomes.iter().map(|o| o.1).sum::<usize>();
                let realized_times =
                    cluster_round_times(self.topology.clusters(), &params.states, &steps, &decision.theta, cfg.tau)?;
                realized.record_edge_round(&realized_times, round_energy(&params.states, &steps, &decision.theta, cfg.tau)?)?;
                if closes {
                    if m > 1 {
                        edge_models = inter_cluster_gossip(&edge_models, self.topology.mixing())?;
                    }
                    ledger.close_global_round(&backhaul)?;
                    realized.close_global_round(&backhaul)?;
                    for (t, b) in cluster_times.iter_mut().zip(&backhaul) {
                        *t += b;
                    }
                }

                let u = averaged_model(&edge_models, &sizes)?;
                let eval = self.evaluate(&u)?;
                traces.push(RoundTrace {
                    global_round: l,
                    edge_round: r,
                    loss: eval.loss,
                    accuracy: eval.accuracy,
                    cluster_times,
                    cumulative_time: ledger.elapsed_time(),
                    cumulative_energy: ledger.consumed_energy(),
                    realized_time: realized.elapsed_time(),
                    realized_energy: realized.consumed_energy(),
                    realized_steps: realized_steps_total,
                    mean_rho: decision.rho.iter().sum::<f64>() / n as f64,
                    mean_theta: decision.theta.iter().sum::<f64>() / n as f64,
                    iterations: decision.iterations,
                    feasible: decision.feasible,
                    floor_round,
                });
                previous = Some(decision);
                if floor_round {
                    stop_reason = StopReason::BudgetExhausted;
                    break 'rounds;
                }
            }
        }

        Ok(RunOutput {
            initial,
            traces,
            stop_reason,
            zeta: self.topology.zeta(),
            edge_list: self.topology.graph().to_edge_list(),
            final_model: averaged_model(&edge_models, &sizes)?,
            edge_models,
        })
    }

    /// Whether charging `decision` for this round keeps the actual ledger
    /// within both budgets.
    fn fits_budget(
        &self,
        ledger: &BudgetLedger,
        states: &[DeviceState],
        decision: &ControlDecision,
        round_backhaul: &[f64],
    ) -> Result<bool> {
        let times = cluster_round_times(self.topology.clusters(), states, &decision.rho, &decision.theta, self.config.tau)?;
        let elapsed = ledger
            .cluster_partial()
            .iter()
            .zip(&times)
            .zip(round_backhaul)
            .map(|((h, t), b)| h + t + b)
            .fold(0.0, f64::max)
            + ledger.past_time();
        let energy = ledger.consumed_energy() + round_energy(states, &decision.rho, &decision.theta, self.config.tau)?;
        let within = |v: f64, budget: f64| v <= budget + FEASIBILITY_TOLERANCE * budget.abs().max(1.0);
        Ok(within(elapsed, ledger.time_budget()) && within(energy, ledger.energy_budget()))
    }
}

/// Builds and runs a simulation.
pub fn run(config: SimulationConfig) -> Result<RunOutput> {
    Simulation::new(config)?.run()
}
