//! Client selection and sub-channel scheduling.
//!
//! Each round the server estimates every client's compute + upload latency,
//! sorts ascending, and picks participants by one of two policies:
//!
//! * `Proposed`: latency-aware grouped scheduling. Clusters still training
//!   contribute all of their members; the sorted selection is packed into
//!   consecutive groups of at most `N` (the sub-channel count), and groups
//!   share the channels back-to-back, so a fast client's upload overlaps a
//!   slow client's computation. Clusters that already converged only send
//!   their quickest members, rationed to the cluster's fair share of the
//!   channels.
//! * `Random`: uniform sample of at most `N` clients, one channel each; the
//!   usual federated-averaging baseline.
//!
//! Upload contention is simulated as `N` serial queues: the client ranked
//! `i` claims channel `i mod N` and starts as soon as both its computation
//! and the channel are done. Clients finishing after the round deadline are
//! dropped from aggregation.

use serde::{Deserialize, Serialize};

use crate::clusterer::ClusterTree;
use crate::error::{Error, Result};
use crate::radio::{data_rate, latencies, ChannelState, ClientProfile, Latency, RadioConfig};
use crate::{rng, ClientId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    Proposed,
    Random,
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Policy::Proposed => "proposed",
            Policy::Random => "random",
        })
    }
}

/// How the round deadline is set from the estimated finish times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeadlinePolicy {
    /// Wait for the slowest estimated finish; admits everyone selected.
    MaxEstimate,
    /// Linear-interpolated quantile of the estimated finishes.
    Quantile(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimate {
    pub client_id: ClientId,
    pub t_cmp: f64,
    pub t_trans: f64,
    pub t_total: f64,
}

impl LatencyEstimate {
    pub fn latency(&self) -> Latency {
        Latency { t_cmp: self.t_cmp, t_trans: self.t_trans }
    }
}

/// A planned round: who participates, in latency order, and how they are
/// packed onto the sub-channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSchedule {
    pub round: u32,
    pub policy: Policy,
    /// Participants sorted by estimated total latency, ties by id.
    pub selected: Vec<LatencyEstimate>,
    /// Rank indices into `selected`, in consecutive chunks of at most `N`.
    pub groups: Vec<Vec<usize>>,
    /// Estimated queue finish time per rank.
    pub est_finish: Vec<f64>,
    /// Uploads finishing after this are dropped.
    pub deadline: f64,
}

/// What actually happened when the schedule ran.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Queue finish time per rank, same order as `selected`.
    pub finishes: Vec<f64>,
    pub aggregated: Vec<ClientId>,
    pub dropped: Vec<ClientId>,
    /// Latest aggregated finish; zero when everything was dropped.
    pub wall_clock: f64,
}

/// Latency table for every client, ascending by total (ties by id).
pub fn estimate_and_sort(
    profiles: &[ClientProfile],
    channel: &ChannelState,
    cfg: &RadioConfig,
    epochs: u32,
) -> Vec<LatencyEstimate> {
    let mut table: Vec<LatencyEstimate> = profiles
        .iter()
        .map(|p| {
            let rate = data_rate(cfg, p.tx_power_w, channel.gain(p.client_id));
            let lat = latencies(p, cfg, epochs, rate);
            LatencyEstimate {
                client_id: p.client_id,
                t_cmp: lat.t_cmp,
                t_trans: lat.t_trans,
                t_total: lat.total(),
            }
        })
        .collect();
    table.sort_by(|a, b| {
        a.t_total.total_cmp(&b.t_total).then(a.client_id.cmp(&b.client_id))
    });
    table
}

/// Consecutive rank chunks of at most `channels`, `ceil(n / channels)` of
/// them. Group `g` holds ranks `g*channels ..` so earlier groups always
/// contain the faster clients.
pub fn build_groups(n_selected: usize, channels: u32) -> Result<Vec<Vec<usize>>> {
    if channels == 0 {
        return Err(Error::InvalidConfig("subchannels must be positive".into()));
    }
    let n = channels as usize;
    Ok((0..n_selected.div_ceil(n))
        .map(|g| (g * n..((g + 1) * n).min(n_selected)).collect())
        .collect())
}

/// Queue finish time per rank: rank `i` uploads on channel `i % N` as soon
/// as its computation and the channel's previous upload are both done.
pub fn queue_finish_times(selected: &[LatencyEstimate], channels: u32) -> Vec<f64> {
    let n = channels.max(1) as usize;
    let mut free = vec![0.0f64; n];
    selected
        .iter()
        .enumerate()
        .map(|(rank, est)| {
            let ch = rank % n;
            let start = est.t_cmp.max(free[ch]);
            let finish = start + est.t_trans;
            free[ch] = finish;
            finish
        })
        .collect()
}

/// Round deadline from the estimated finish times.
pub fn set_deadline(est_finish: &[f64], policy: DeadlinePolicy) -> Result<f64> {
    if est_finish.is_empty() {
        return Err(Error::EmptySchedule);
    }
    match policy {
        DeadlinePolicy::MaxEstimate => {
            Ok(est_finish.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        DeadlinePolicy::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::InvalidQuantile(q));
            }
            let mut sorted = est_finish.to_vec();
            sorted.sort_by(f64::total_cmp);
            let h = (sorted.len() - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        }
    }
}

fn assemble(
    round: u32,
    policy: Policy,
    selected: Vec<LatencyEstimate>,
    channels: u32,
    deadline: DeadlinePolicy,
) -> Result<RoundSchedule> {
    if selected.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let groups = build_groups(selected.len(), channels)?;
    let est_finish = queue_finish_times(&selected, channels);
    let deadline = set_deadline(&est_finish, deadline)?;
    Ok(RoundSchedule { round, policy, selected, groups, est_finish, deadline })
}

/// Fair channel share per cluster: `channels` apportioned proportionally to
/// cluster size, floors first, remainder to the largest clusters.
fn channel_shares(tree: &ClusterTree, channels: u32) -> Vec<(crate::ClusterId, usize)> {
    let total: usize = tree.clusters().iter().map(|c| c.members.len()).sum();
    let mut shares: Vec<(crate::ClusterId, usize)> = tree
        .clusters()
        .iter()
        .map(|c| (c.id, channels as usize * c.members.len() / total))
        .collect();
    let mut leftover = channels as usize - shares.iter().map(|&(_, s)| s).sum::<usize>();
    if leftover > 0 {
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by_key(|&i| {
            (std::cmp::Reverse(tree.clusters()[i].members.len()), tree.clusters()[i].id)
        });
        for i in order {
            if leftover == 0 {
                break;
            }
            shares[i].1 += 1;
            leftover -= 1;
        }
    }
    shares
}

/// Latency-aware selection. Unconverged clusters participate in full (the
/// grouped queue absorbs any count above `channels`); converged clusters
/// send only their fastest members, capped at the cluster's channel share.
pub fn select_proposed(
    tree: &ClusterTree,
    table: &[LatencyEstimate],
    channels: u32,
    deadline: DeadlinePolicy,
    round: u32,
) -> Result<RoundSchedule> {
    let picked: Vec<LatencyEstimate> = if tree.clusters().len() == 1 {
        table.to_vec()
    } else {
        let shares = channel_shares(tree, channels);
        let mut chosen = std::collections::BTreeSet::new();
        for cluster in tree.clusters() {
            if cluster.converged {
                let share =
                    shares.iter().find(|&&(id, _)| id == cluster.id).map_or(0, |&(_, s)| s);
                let mut taken = 0;
                for est in table {
                    if taken == share {
                        break;
                    }
                    if cluster.members.contains(&est.client_id) {
                        chosen.insert(est.client_id);
                        taken += 1;
                    }
                }
            } else {
                chosen.extend(cluster.members.iter().copied());
            }
        }
        table.iter().filter(|e| chosen.contains(&e.client_id)).copied().collect()
    };
    assemble(round, Policy::Proposed, picked, channels, deadline)
}

/// Uniform sample without replacement of `min(channels, K)` clients.
pub fn select_random(
    table: &[LatencyEstimate],
    channels: u32,
    deadline: DeadlinePolicy,
    round: u32,
    seed: u64,
) -> Result<RoundSchedule> {
    if table.is_empty() {
        return Err(Error::EmptySchedule);
    }
    let amount = (channels as usize).min(table.len());
    let mut r = rng::stream(seed, rng::SELECTION, u64::from(round), 0);
    let mut positions = rand::seq::index::sample(&mut r, table.len(), amount).into_vec();
    positions.sort_unstable(); // keep latency order
    let picked: Vec<LatencyEstimate> = positions.into_iter().map(|i| table[i]).collect();
    assemble(round, Policy::Random, picked, channels, deadline)
}

/// Runs the upload queue with the actual latencies (`actuals[rank]` pairs
/// with `schedule.selected[rank]`) and applies the deadline.
pub fn simulate_round(
    schedule: &RoundSchedule,
    actuals: &[Latency],
    channels: u32,
) -> RoundOutcome {
    debug_assert_eq!(actuals.len(), schedule.selected.len());
    let n = channels.max(1) as usize;
    let mut free = vec![0.0f64; n];
    let mut finishes = Vec::with_capacity(actuals.len());
    let mut aggregated = Vec::new();
    let mut dropped = Vec::new();
    let mut wall_clock = 0.0f64;
    for (rank, lat) in actuals.iter().enumerate() {
        let ch = rank % n;
        let start = lat.t_cmp.max(free[ch]);
        let finish = start + lat.t_trans;
        free[ch] = finish;
        finishes.push(finish);
        let id = schedule.selected[rank].client_id;
        if finish.is_finite() && finish <= schedule.deadline {
            aggregated.push(id);
            wall_clock = wall_clock.max(finish);
        } else {
            dropped.push(id);
        }
    }
    RoundOutcome { finishes, aggregated, dropped, wall_clock }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::db_to_linear;
    use approx::assert_relative_eq;

    fn est(id: ClientId, t_cmp: f64, t_trans: f64) -> LatencyEstimate {
        LatencyEstimate { client_id: id, t_cmp, t_trans, t_total: t_cmp + t_trans }
    }

    fn radio_cfg() -> RadioConfig {
        RadioConfig {
            bandwidth_hz: 10e6,
            subchannels: 10,
            noise_w: 1e-6,
            path_gain_ref: db_to_linear(-35.0),
            ref_distance_m: 2.0,
            model_bits: 1e5,
            fading: false,
            rate_log2: false,
        }
    }

    #[test]
    fn table_is_sorted_with_id_ties() {
        let profiles: Vec<ClientProfile> = (0..6u32)
            .map(|k| ClientProfile {
                client_id: k,
                num_samples: 100,
                cpu_hz: 1e9 + f64::from(5 - k) * 1e8,
                cycles_per_sample: 20.0,
                tx_power_w: 0.05,
                distance_m: 30.0 + f64::from(k % 3) * 10.0,
            })
            .collect();
        let cfg = radio_cfg();
        let channel = ChannelState::draw(&profiles, &cfg, 1, 7);
        let table = estimate_and_sort(&profiles, &channel, &cfg, 10);
        for w in table.windows(2) {
            assert!(
                w[0].t_total < w[1].t_total
                    || (w[0].t_total == w[1].t_total && w[0].client_id < w[1].client_id)
            );
        }
    }

    #[test]
    fn groups_chunk_ranks() {
        assert_eq!(build_groups(7, 3).unwrap(), vec![vec![0, 1, 2], vec![3, 4, 5], vec![6]]);
        assert_eq!(build_groups(2, 5).unwrap(), vec![vec![0, 1]]);
        assert!(build_groups(2, 0).is_err());
        assert!(build_groups(0, 3).unwrap().is_empty());
    }

    #[test]
    fn groups_partition_every_rank() {
        for n in 1..40usize {
            for ch in 1..9u32 {
                let groups = build_groups(n, ch).unwrap();
                assert_eq!(groups.len(), n.div_ceil(ch as usize));
                let flat: Vec<usize> = groups.iter().flatten().copied().collect();
                assert_eq!(flat, (0..n).collect::<Vec<_>>());
                assert!(groups.iter().all(|g| g.len() <= ch as usize));
            }
        }
    }

    #[test]
    fn single_channel_serializes_uploads() {
        // The second upload must wait for the channel even though its own
        // computation finished earlier.
        let sel = vec![est(0, 1.0, 2.0), est(1, 2.0, 3.0)];
        assert_eq!(queue_finish_times(&sel, 1), vec![3.0, 6.0]);
    }

    #[test]
    fn two_channels_remove_contention() {
        let sel = vec![est(0, 1.0, 2.0), est(1, 2.0, 3.0)];
        assert_eq!(queue_finish_times(&sel, 2), vec![3.0, 5.0]);
    }

    #[test]
    fn deadline_drops_late_finishers() {
        let sel = vec![est(0, 1.0, 2.0), est(1, 2.0, 3.0)];
        let schedule = RoundSchedule {
            round: 1,
            policy: Policy::Proposed,
            est_finish: queue_finish_times(&sel, 1),
            groups: build_groups(2, 1).unwrap(),
            deadline: 4.0,
            selected: sel.clone(),
        };
        let actuals: Vec<Latency> = sel.iter().map(|e| e.latency()).collect();
        let out = simulate_round(&schedule, &actuals, 1);
        assert_eq!(out.aggregated, vec![0]);
        assert_eq!(out.dropped, vec![1]);
        assert_relative_eq!(out.wall_clock, 3.0);
    }

    #[test]
    fn max_deadline_admits_everyone() {
        let sel = vec![est(0, 0.5, 1.0), est(1, 0.1, 4.0), est(2, 2.0, 0.5)];
        let fins = queue_finish_times(&sel, 2);
        let deadline = set_deadline(&fins, DeadlinePolicy::MaxEstimate).unwrap();
        let schedule = RoundSchedule {
            round: 1,
            policy: Policy::Proposed,
            groups: build_groups(3, 2).unwrap(),
            est_finish: fins.clone(),
            deadline,
            selected: sel.clone(),
        };
        let actuals: Vec<Latency> = sel.iter().map(|e| e.latency()).collect();
        let out = simulate_round(&schedule, &actuals, 2);
        assert!(out.dropped.is_empty());
        assert_eq!(out.aggregated.len(), 3);
        assert_relative_eq!(out.wall_clock, deadline);
    }

    #[test]
    fn quantile_deadline_interpolates() {
        let fins: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_relative_eq!(set_deadline(&fins, DeadlinePolicy::Quantile(0.5)).unwrap(), 5.5);
        assert_relative_eq!(set_deadline(&fins, DeadlinePolicy::Quantile(1.0)).unwrap(), 10.0);
        assert_relative_eq!(set_deadline(&fins, DeadlinePolicy::Quantile(0.0)).unwrap(), 1.0);
        assert!(set_deadline(&fins, DeadlinePolicy::Quantile(1.5)).is_err());
        assert!(set_deadline(&[], DeadlinePolicy::MaxEstimate).is_err());
    }

    #[test]
    fn max_deadline_equals_slowest_estimate() {
        assert_relative_eq!(
            set_deadline(&[0.1, 0.4], DeadlinePolicy::MaxEstimate).unwrap(),
            0.4
        );
    }

    /// Independent queue oracle: each client, in rank order, claims the
    /// earliest-free channel. With equal upload times this is the same
    /// policy as the fixed `rank % N` claim.
    fn earliest_free_oracle(sel: &[LatencyEstimate], channels: usize) -> Vec<f64> {
        let mut free = vec![0.0f64; channels];
        let mut out = Vec::new();
        for e in sel {
            let ch = (0..channels)
                .min_by(|&a, &b| free[a].total_cmp(&free[b]))
                .unwrap();
            let fin = e.t_cmp.max(free[ch]) + e.t_trans;
            free[ch] = fin;
            out.push(fin);
        }
        out
    }

    #[test]
    fn queue_matches_event_oracle_for_equal_uploads() {
        let mut r = crate::rng::stream(11, crate::rng::SELECTION, 0, 0);
        use rand::Rng;
        for case in 0..200 {
            let n = r.random_range(1..=8usize);
            let channels = r.random_range(1..=4u32);
            let tau = r.random_range(0.1..2.0f64);
            let mut sel: Vec<LatencyEstimate> = (0..n as u32)
                .map(|id| est(id, r.random_range(0.0..5.0), tau))
                .collect();
            sel.sort_by(|a, b| a.t_total.total_cmp(&b.t_total));
            let ours = queue_finish_times(&sel, channels);
            let oracle = earliest_free_oracle(&sel, channels as usize);
            for (a, b) in ours.iter().zip(&oracle) {
                assert_relative_eq!(*a, *b, max_relative = 1e-12, epsilon = 1e-12);
            }
            let _ = case;
        }
    }

    #[test]
    fn more_channels_never_hurt() {
        let mut r = crate::rng::stream(12, crate::rng::SELECTION, 1, 0);
        use rand::Rng;
        for _ in 0..100 {
            let n = r.random_range(1..=20usize);
            let mut sel: Vec<LatencyEstimate> = (0..n as u32)
                .map(|id| est(id, r.random_range(0.0..3.0), r.random_range(0.1..4.0)))
                .collect();
            sel.sort_by(|a, b| a.t_total.total_cmp(&b.t_total));
            let wide = r.random_range(2..=8u32);
            let wall = |ch: u32| {
                queue_finish_times(&sel, ch).iter().copied().fold(0.0f64, f64::max)
            };
            assert!(wall(wide) <= wall(1) + 1e-9);
        }
    }

    #[test]
    fn random_selection_is_uniform_enough() {
        let profiles: Vec<ClientProfile> = (0..20u32)
            .map(|k| ClientProfile {
                client_id: k,
                num_samples: 100,
                cpu_hz: 2e9,
                cycles_per_sample: 20.0,
                tx_power_w: 0.05,
                distance_m: 40.0,
            })
            .collect();
        let cfg = radio_cfg();
        let channel = ChannelState::draw(&profiles, &cfg, 0, 3);
        let table = estimate_and_sort(&profiles, &channel, &cfg, 10);

        let rounds = 10_000u32;
        let mut counts = [0u32; 20];
        for round in 0..rounds {
            let s = select_random(&table, 5, DeadlinePolicy::MaxEstimate, round, 99).unwrap();
            assert_eq!(s.selected.len(), 5);
            let mut ids: Vec<ClientId> = s.selected.iter().map(|e| e.client_id).collect();
            ids.dedup();
            assert_eq!(ids.len(), 5, "sample must be without replacement");
            for id in ids {
                counts[id as usize] += 1;
            }
        }
        // Binomial(10000, 1/4): mean 2500, sigma ~43.3; allow 3 sigma.
        for (id, &c) in counts.iter().enumerate() {
            assert!(
                (2370..=2630).contains(&c),
                "client {id} selected {c} times, outside 3 sigma"
            );
        }
    }

    #[test]
    fn proposed_selects_everyone_while_unconverged() {
        let profiles: Vec<ClientProfile> = (0..9u32)
            .map(|k| ClientProfile {
                client_id: k,
                num_samples: 50 + 10 * k,
                cpu_hz: 2e9,
                cycles_per_sample: 20.0,
                tx_power_w: 0.05,
                distance_m: 25.0 + f64::from(k),
            })
            .collect();
        let cfg = radio_cfg();
        let channel = ChannelState::draw(&profiles, &cfg, 2, 5);
        let table = estimate_and_sort(&profiles, &channel, &cfg, 10);
        let tree = ClusterTree::root((0..9).collect());
        let s = select_proposed(&tree, &table, 3, DeadlinePolicy::MaxEstimate, 2).unwrap();
        assert_eq!(s.selected.len(), 9);
        assert_eq!(s.groups.len(), 3);
    }

    #[test]
    fn converged_clusters_send_their_fastest_fair_share() {
        // 20 clients, two clusters: A (8 members, converged) and B (12, not).
        // With 10 channels A's share is 4, so the round has B's 12 members
        // plus A's 4 fastest.
        let mut tree = ClusterTree::root((0..20).collect());
        let a: Vec<ClientId> = (0..8).collect();
        let b: Vec<ClientId> = (8..20).collect();
        let (ca, _cb) = tree.apply_split(1, 0, a.clone(), b.clone()).unwrap();
        tree.set_converged(ca, true);

        // Latency grows with client id, so A's fastest are ids 0..4.
        let table: Vec<LatencyEstimate> =
            (0..20u32).map(|k| est(k, 0.1, 1.0 + f64::from(k))).collect();
        let s = select_proposed(&tree, &table, 10, DeadlinePolicy::MaxEstimate, 3).unwrap();
        let ids: Vec<ClientId> = s.selected.iter().map(|e| e.client_id).collect();
        let expected: Vec<ClientId> = (0..4).chain(8..20).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn share_never_exceeds_cluster_size() {
        // Converged cluster of 3 with a share of 4 keeps all 3 selected.
        let mut tree = ClusterTree::root((0..4).collect());
        let (ca, _) = tree.apply_split(1, 0, vec![0, 1, 2], vec![3]).unwrap();
        tree.set_converged(ca, true);
        let table: Vec<LatencyEstimate> =
            (0..4u32).map(|k| est(k, 0.1, 1.0 + f64::from(k))).collect();
        let s = select_proposed(&tree, &table, 6, DeadlinePolicy::MaxEstimate, 1).unwrap();
        let ids: Vec<ClientId> = s.selected.iter().map(|e| e.client_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn random_respects_channel_cap() {
        let table: Vec<LatencyEstimate> =
            (0..7u32).map(|k| est(k, 0.1, 1.0 + f64::from(k))).collect();
        let s = select_random(&table, 10, DeadlinePolicy::MaxEstimate, 0, 1).unwrap();
        assert_eq!(s.selected.len(), 7); // min(N, K)
        let s = select_random(&table, 3, DeadlinePolicy::MaxEstimate, 0, 1).unwrap();
        assert_eq!(s.selected.len(), 3);
        assert_eq!(s.groups.len(), 1);
    }
}
