//! Round-loop orchestration: schedule, broadcast, local training, timed
//! uploads, aggregation, split evaluation, and convergence tracking.
//!
//! Each round runs one combined schedule across all clusters (they share
//! the same sub-channels), trains the selected clients against their own
//! cluster's model, and aggregates the updates that beat the deadline.
//! The server keeps the most recent update it received from every client;
//! a cluster becomes split-eligible once that memory covers its whole
//! membership, which lets partial-participation policies split too, just
//! later. A cluster is marked converged only after it was split-eligible,
//! declined to split, and its full-membership training loss plateaued.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::clusterer::{maybe_split, ClusterTree, SplitDecision};
use crate::config::ExperimentConfig;
use crate::dataset::{apply_incongruence, generate, FederatedDataset};
use crate::error::{Error, Result};
use crate::learner::{evaluate, fedavg, init_model, local_train, loss, ModelParams, ModelUpdate};
use crate::radio::{watts_to_dbm, ChannelState, ClientProfile, Latency, RadioConfig};
use crate::scheduler::{
    estimate_and_sort, select_proposed, select_random, simulate_round, Policy, RoundSchedule,
};
use crate::{rng, ClientId, ClusterId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Every cluster reached its plateau without wanting to split.
    Converged,
    /// Hit the configured round count.
    RoundLimit,
    /// The next round could not fit in the simulated-time budget.
    TimeBudget,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::RoundLimit => "round-limit",
            StopReason::TimeBudget => "time-budget",
        })
    }
}

/// Which model an accuracy cell refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ModelRef {
    Feel,
    Cluster(ClusterId),
}

impl std::fmt::Display for ModelRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelRef::Feel => f.write_str("feel"),
            ModelRef::Cluster(id) => write!(f, "cluster_{id}"),
        }
    }
}

/// One (test client, model) evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccuracyCell {
    pub client_id: ClientId,
    pub model: ModelRef,
    pub accuracy: f64,
    /// Whether the client belongs to the cluster this model serves.
    pub is_member: bool,
}

/// Best accuracy any surviving model achieves for a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaxAccRow {
    pub client_id: ClientId,
    pub accuracy: f64,
    pub model: ModelRef,
    /// Whether the best model is the client's own cluster model.
    pub own_cluster: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterRoundRecord {
    pub cluster: ClusterId,
    pub size: usize,
    pub selected: usize,
    pub aggregated: usize,
    /// Weighted mean-update norm over this round's aggregated updates.
    pub mean_update_norm: Option<f64>,
    pub max_update_norm: Option<f64>,
    /// Full-membership weighted train loss after this round's update.
    pub train_loss: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Simulated clock after this round.
    pub clock: f64,
    pub wall_clock: f64,
    pub deadline: f64,
    /// Cluster count after this round's splits.
    pub num_clusters: usize,
    pub selected: usize,
    pub aggregated: usize,
    pub dropped: usize,
    pub clusters: Vec<ClusterRoundRecord>,
}

/// One selected client's scheduling outcome for a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleRecord {
    pub round: u32,
    pub policy: Policy,
    pub client_id: ClientId,
    pub cluster: ClusterId,
    pub rank: usize,
    pub group: usize,
    pub est_total: f64,
    pub actual_finish: f64,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTrace {
    pub config_hash: String,
    pub seed: u64,
    pub policy: Policy,
    pub stop: StopReason,
    pub rounds_executed: u32,
    pub final_clock: f64,
    pub rounds: Vec<RoundRecord>,
    pub schedule: Vec<ScheduleRecord>,
    pub splits: Vec<SplitDecision>,
    pub accuracy: Vec<AccuracyCell>,
    pub max_acc: Vec<MaxAccRow>,
    /// Final clusters, each sorted, ordered by smallest member.
    pub final_partition: Vec<Vec<ClientId>>,
    /// Latent distribution id per client, indexed by client id.
    pub ground_truth: Vec<u32>,
    pub feel_model: ModelParams,
    pub cluster_models: BTreeMap<ClusterId, ModelParams>,
}

impl ExperimentTrace {
    /// Round number and simulated clock of the first accepted split.
    pub fn first_split(&self) -> Option<(u32, f64)> {
        let d = self.splits.iter().find(|d| d.split)?;
        let clock = self.rounds.iter().find(|r| r.round == d.round)?.clock;
        Some((d.round, clock))
    }

    /// Final cluster index per client, aligned with `ground_truth`.
    pub fn partition_labels(&self) -> Vec<u32> {
        let n: usize = self.final_partition.iter().map(Vec::len).sum();
        let mut labels = vec![0u32; n];
        for (g, members) in self.final_partition.iter().enumerate() {
            for &k in members {
                labels[k as usize] = g as u32;
            }
        }
        labels
    }

    pub fn mean_feel_accuracy(&self) -> f64 {
        mean(self.accuracy.iter().filter(|c| c.model == ModelRef::Feel).map(|c| c.accuracy))
    }

    pub fn mean_max_accuracy(&self) -> f64 {
        mean(self.max_acc.iter().map(|r| r.accuracy))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

pub enum RoundStep {
    Executed,
    /// The round's deadline would overrun the time budget; nothing ran.
    BudgetExceeded,
}

/// All mutable state of a running experiment.
pub struct ExperimentState {
    cfg: ExperimentConfig,
    dataset: FederatedDataset,
    profiles: Vec<ClientProfile>,
    radio: RadioConfig,
    pub tree: ClusterTree,
    pub models: BTreeMap<ClusterId, ModelParams>,
    pub feel: ModelParams,
    pub round: u32,
    pub clock: f64,
    /// Most recent update the server received from each client.
    cache: BTreeMap<ClientId, ModelUpdate>,
    /// Per-cluster (last full-membership loss, plateau streak).
    streaks: BTreeMap<ClusterId, (f64, u32)>,
    rounds: Vec<RoundRecord>,
    schedule_rows: Vec<ScheduleRecord>,
    splits: Vec<SplitDecision>,
}

/// Uniform draw that tolerates a degenerate range.
fn uniform(r: &mut rand_chacha::ChaCha8Rng, min: f64, max: f64) -> f64 {
    use rand::Rng;
    if min < max {
        r.random_range(min..max)
    } else {
        min
    }
}

impl ExperimentState {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = apply_incongruence(
            generate(&cfg.dataset, cfg.seed)?,
            cfg.dataset.incongruence,
        )?;

        let init = init_model(cfg.model_shape(), cfg.seed);
        let radio = cfg.radio_config(init.size_bits());

        // Resource profiles: one stream per client, draws in a fixed order
        // (cpu, power, distance). Power is uniform in dBm.
        let r = &cfg.radio;
        let (dbm_min, dbm_max) = (watts_to_dbm(r.power_min.0), watts_to_dbm(r.power_max.0));
        let profiles: Vec<ClientProfile> = dataset
            .clients
            .iter()
            .map(|c| {
                let mut s = rng::stream(cfg.seed, rng::PROFILE, u64::from(c.id), 0);
                let cpu_hz = uniform(&mut s, r.cpu_min.0, r.cpu_max.0);
                let dbm = uniform(&mut s, dbm_min, dbm_max);
                let distance_m = uniform(&mut s, r.distance_min.0, r.distance_max.0);
                ClientProfile {
                    client_id: c.id,
                    num_samples: c.num_samples(),
                    cpu_hz,
                    cycles_per_sample: r.cycles_per_sample,
                    tx_power_w: crate::radio::dbm_to_watts(dbm),
                    distance_m,
                }
            })
            .collect();

        let all: Vec<ClientId> = dataset.clients.iter().map(|c| c.id).collect();
        let mut models = BTreeMap::new();
        models.insert(0, init.clone());
        Ok(Self {
            cfg: cfg.clone(),
            dataset,
            profiles,
            radio,
            tree: ClusterTree::root(all),
            models,
            feel: init,
            round: 0,
            clock: 0.0,
            cache: BTreeMap::new(),
            streaks: BTreeMap::new(),
            rounds: Vec::new(),
            schedule_rows: Vec::new(),
            splits: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &FederatedDataset {
        &self.dataset
    }

    fn schedule(&self, round: u32) -> Result<RoundSchedule> {
        let channel = ChannelState::draw(&self.profiles, &self.radio, round, self.cfg.seed);
        let table =
            estimate_and_sort(&self.profiles, &channel, &self.radio, self.cfg.learner.epochs);
        let deadline = self.cfg.scheduler.deadline.to_policy();
        let n = self.radio.subchannels;
        match self.cfg.scheduler.policy {
            Policy::Proposed => select_proposed(&self.tree, &table, n, deadline, round),
            Policy::Random => select_random(&table, n, deadline, round, self.cfg.seed),
        }
    }

    fn weighted_train_loss(&self, model: &ModelParams, members: &[ClientId]) -> f64 {
        let mut acc = 0.0;
        let mut total = 0.0;
        for &k in members {
            let c = &self.dataset.clients[k as usize];
            let idx: Vec<usize> = (0..c.train.len()).collect();
            let w = f64::from(c.num_samples());
            acc += w * loss(model, &c.train, &idx);
            total += w;
        }
        acc / total
    }

    pub fn run_round(&mut self) -> Result<RoundStep> {
        let r = self.round + 1;
        let schedule = self.schedule(r)?;
        if self.clock + schedule.deadline > self.cfg.engine.time_budget.0 {
            return Ok(RoundStep::BudgetExceeded);
        }
        self.round = r;
        let lrn = &self.cfg.learner;

        // Local training against each client's own cluster model.
        let mut updates: Vec<ModelUpdate> = Vec::with_capacity(schedule.selected.len());
        let mut owner: Vec<ClusterId> = Vec::with_capacity(schedule.selected.len());
        for est in &schedule.selected {
            let k = est.client_id;
            let cid = self.tree.cluster_of(k).expect("selected client is clustered");
            let base = &self.models[&cid];
            let client = &self.dataset.clients[k as usize];
            let train_seed = rng::mix(self.cfg.seed, rng::LOCAL_TRAIN, u64::from(k), u64::from(r));
            updates.push(local_train(
                base,
                client,
                lrn.epochs,
                lrn.batch_size as usize,
                lrn.learning_rate,
                train_seed,
            )?);
            owner.push(cid);
        }

        let actuals: Vec<Latency> = schedule.selected.iter().map(|e| e.latency()).collect();
        let outcome = simulate_round(&schedule, &actuals, self.radio.subchannels);
        let survivors: BTreeSet<ClientId> = outcome.aggregated.iter().copied().collect();

        // Aggregate survivors per cluster in rank order: the cluster model
        // moves by the plain mean of its members' deltas, while the shared
        // feel model takes the sample-weighted average of everything.
        let mut per_cluster: BTreeMap<ClusterId, Vec<usize>> = BTreeMap::new();
        for (rank, est) in schedule.selected.iter().enumerate() {
            if survivors.contains(&est.client_id) {
                per_cluster.entry(owner[rank]).or_default().push(rank);
            }
        }
        for (cid, ranks) in &per_cluster {
            let model = self.models.get_mut(cid).expect("cluster model exists");
            let scale = 1.0 / ranks.len() as f64;
            for &rank in ranks {
                for (w, d) in model.w.iter_mut().zip(&updates[rank].delta) {
                    *w += scale * d;
                }
            }
        }
        if !per_cluster.is_empty() {
            let survivors_rank: Vec<&ModelUpdate> = schedule
                .selected
                .iter()
                .enumerate()
                .filter(|(_, e)| survivors.contains(&e.client_id))
                .map(|(rank, _)| &updates[rank])
                .collect();
            self.feel = fedavg(&self.feel, &survivors_rank)?;
        }
        for m in self.models.values().chain(std::iter::once(&self.feel)) {
            if m.w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { round: r });
            }
        }
        for rank in per_cluster.values().flatten() {
            let u = &updates[*rank];
            self.cache.insert(u.client_id, u.clone());
        }

        // Snapshot per-cluster stats before any split changes the tree.
        let pre_split: Vec<(ClusterId, Vec<ClientId>)> = self
            .tree
            .clusters()
            .iter()
            .map(|c| (c.id, c.members.clone()))
            .collect();
        let mut cluster_stats: Vec<ClusterRoundRecord> = Vec::with_capacity(pre_split.len());
        let selected_ids: BTreeSet<ClientId> =
            schedule.selected.iter().map(|e| e.client_id).collect();
        let mut losses: BTreeMap<ClusterId, f64> = BTreeMap::new();
        for (cid, members) in &pre_split {
            let train_loss = self.weighted_train_loss(&self.models[cid], members);
            losses.insert(*cid, train_loss);
            let agg: Vec<&ModelUpdate> = per_cluster
                .get(cid)
                .map(|ranks| ranks.iter().map(|&rk| &updates[rk]).collect())
                .unwrap_or_default();
            let (mean_n, max_n) = if agg.is_empty() {
                (None, None)
            } else {
                let g = crate::clusterer::split_gate(&agg, f64::INFINITY, 0.0);
                (Some(g.mean_norm), Some(g.max_norm))
            };
            cluster_stats.push(ClusterRoundRecord {
                cluster: *cid,
                size: members.len(),
                selected: members.iter().filter(|m| selected_ids.contains(m)).count(),
                aggregated: agg.len(),
                mean_update_norm: mean_n,
                max_update_norm: max_n,
                train_loss,
                converged: false, // filled in below
            });
        }

        // Split phase: a cluster is eligible once the server has an update
        // from every member. Clusters created this round wait a round.
        let mut eligible_declined: BTreeSet<ClusterId> = BTreeSet::new();
        let mut ids: Vec<ClusterId> = pre_split.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        for cid in ids {
            let members = self.tree.cluster(cid)?.members.clone();
            if !members.iter().all(|m| self.cache.contains_key(m)) {
                continue;
            }
            let refs: Vec<&ModelUpdate> = members.iter().map(|m| &self.cache[m]).collect();
            let decision = maybe_split(
                &mut self.tree,
                r,
                cid,
                &refs,
                self.cfg.clusterer.eps1,
                self.cfg.clusterer.eps2,
                self.cfg.clusterer.exhaustive_limit as usize,
            )?;
            if decision.split {
                let parent_model = self.models.remove(&cid).expect("cluster model exists");
                self.streaks.remove(&cid);
                let rec = *self.tree.split_log().last().expect("split just logged");
                self.models.insert(rec.child_a, parent_model.clone());
                self.models.insert(rec.child_b, parent_model);
            } else {
                eligible_declined.insert(cid);
            }
            self.splits.push(decision);
        }

        // Plateau streaks, then convergence flags. Children created this
        // round seed their history now and cannot be flagged yet.
        for (cid, loss_now) in &losses {
            if self.tree.cluster(*cid).is_err() {
                continue; // split away
            }
            let entry = self.streaks.entry(*cid).or_insert((f64::INFINITY, 0));
            let prev = entry.0;
            let rel = if prev.is_finite() { (prev - loss_now) / prev.max(1e-12) } else { 1.0 };
            entry.1 = if rel < self.cfg.engine.convergence_tol { entry.1 + 1 } else { 0 };
            entry.0 = *loss_now;
        }
        let new_children: Vec<(ClusterId, Vec<ClientId>)> = self
            .tree
            .clusters()
            .iter()
            .filter(|c| !losses.contains_key(&c.id))
            .map(|c| (c.id, c.members.clone()))
            .collect();
        for (cid, members) in new_children {
            let l = self.weighted_train_loss(&self.models[&cid], &members);
            self.streaks.insert(cid, (l, 0));
        }
        for cid in &eligible_declined {
            if self.tree.cluster(*cid).is_ok()
                && self.streaks.get(cid).is_some_and(|&(_, s)| s >= self.cfg.engine.patience)
            {
                self.tree.set_converged(*cid, true);
            }
        }
        for stat in cluster_stats.iter_mut() {
            stat.converged = self
                .tree
                .cluster(stat.cluster)
                .map(|c| c.converged)
                .unwrap_or(false);
        }

        // Clock: the round costs its wall clock, or the full deadline when
        // every upload was dropped (the server waited for nothing).
        let advance = if outcome.aggregated.is_empty() {
            schedule.deadline
        } else {
            outcome.wall_clock
        };
        self.clock += advance;

        for (rank, est) in schedule.selected.iter().enumerate() {
            self.schedule_rows.push(ScheduleRecord {
                round: r,
                policy: schedule.policy,
                client_id: est.client_id,
                cluster: owner[rank],
                rank,
                group: rank / self.radio.subchannels as usize,
                est_total: est.t_total,
                actual_finish: outcome.finishes[rank],
                dropped: !survivors.contains(&est.client_id),
            });
        }
        self.rounds.push(RoundRecord {
            round: r,
            clock: self.clock,
            wall_clock: advance,
            deadline: schedule.deadline,
            num_clusters: self.tree.clusters().len(),
            selected: schedule.selected.len(),
            aggregated: outcome.aggregated.len(),
            dropped: outcome.dropped.len(),
            clusters: cluster_stats,
        });
        Ok(RoundStep::Executed)
    }

    /// Evaluates every client against the feel model and every cluster
    /// model, then folds everything into the final trace.
    pub fn into_trace(self, stop: StopReason) -> Result<ExperimentTrace> {
        let mut accuracy = Vec::new();
        let mut max_acc = Vec::new();
        let cluster_ids: Vec<ClusterId> = {
            let mut v: Vec<ClusterId> = self.tree.clusters().iter().map(|c| c.id).collect();
            v.sort_unstable();
            v
        };
        for client in &self.dataset.clients {
            let own = self.tree.cluster_of(client.id);
            let mut cells = vec![AccuracyCell {
                client_id: client.id,
                model: ModelRef::Feel,
                accuracy: evaluate(&self.feel, &client.test)?,
                is_member: false,
            }];
            for &cid in &cluster_ids {
                cells.push(AccuracyCell {
                    client_id: client.id,
                    model: ModelRef::Cluster(cid),
                    accuracy: evaluate(&self.models[&cid], &client.test)?,
                    is_member: own == Some(cid),
                });
            }
            let best = cells
                .iter()
                .copied()
                .reduce(|a, b| if b.accuracy > a.accuracy { b } else { a })
                .expect("at least the feel cell");
            max_acc.push(MaxAccRow {
                client_id: client.id,
                accuracy: best.accuracy,
                model: best.model,
                own_cluster: best.is_member,
            });
            accuracy.extend(cells);
        }

        let mut final_partition = self.tree.partition();
        final_partition.sort_by_key(|c| c[0]);

        Ok(ExperimentTrace {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            policy: self.cfg.scheduler.policy,
            stop,
            rounds_executed: self.round,
            final_clock: self.clock,
            rounds: self.rounds,
            schedule: self.schedule_rows,
            splits: self.splits,
            accuracy,
            max_acc,
            final_partition,
            ground_truth: self.dataset.ground_truth(),
            feel_model: self.feel,
            cluster_models: self.models,
        })
    }
}

/// Runs the configured number of rounds, stopping early when every cluster
/// is converged or the time budget cannot fit the next round.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentTrace> {
    let mut state = ExperimentState::new(cfg)?;
    let mut stop = StopReason::RoundLimit;
    for _ in 0..cfg.engine.rounds {
        match state.run_round()? {
            RoundStep::BudgetExceeded => {
                stop = StopReason::TimeBudget;
                break;
            }
            RoundStep::Executed => {
                if state.tree.all_converged() {
                    stop = StopReason::Converged;
                    break;
                }
            }
        }
    }
    state.into_trace(stop)
}
