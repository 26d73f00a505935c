//! Cluster maintenance: cosine-similarity analysis of client updates,
//! split gating, optimal bipartitioning, and the cluster tree.
//!
//! A cluster is split when its members have jointly reached a stationary
//! point (small weighted mean update) while individual updates stay large,
//! which means one shared model cannot serve them all. The split minimizes
//! the maximum cosine similarity across the cut; a post-check on the
//! relative deviation of each member from its side's consensus direction
//! (`gamma`) rejects cuts that merely separate noise.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::learner::ModelUpdate;
use crate::{ClientId, ClusterId};

/// Exact bipartition search is exponential; above this size we fall back
/// to agglomerative merging.
pub const EXHAUSTIVE_LIMIT_DEFAULT: usize = 16;

/// Cosine of the angle between two flat vectors. Callers must ensure both
/// are nonzero; summation order is fixed for determinism.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Symmetric pairwise-similarity matrix over a set of client updates.
/// Entries are clamped to [-1, 1]; the diagonal is exactly 1.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    ids: Vec<ClientId>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Errors with the offending client id when any update has zero norm;
    /// similarity is undefined there and the caller must treat the cluster
    /// as unsplittable this round.
    pub fn from_updates(updates: &[&ModelUpdate]) -> Result<Self> {
        for u in updates {
            if u.norm() == 0.0 {
                return Err(Error::ZeroUpdate(u.client_id));
            }
        }
        let n = updates.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = cosine_similarity(&updates[i].delta, &updates[j].delta)
                    .clamp(-1.0, 1.0);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(Self { ids: updates.iter().map(|u| u.client_id).collect(), values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ClientId] {
        &self.ids
    }

    /// Similarity by row/column index (not client id).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    #[cfg(test)]
    fn from_raw(values: Vec<f64>) -> Self {
        let n = (values.len() as f64).sqrt() as usize;
        assert_eq!(n * n, values.len());
        Self { ids: (0..n as ClientId).collect(), values }
    }
}

/// Stationary-point gate: split candidates must have a small weighted mean
/// update while at least one member still moves a lot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateResult {
    /// Norm of the sample-count-weighted mean update.
    pub mean_norm: f64,
    /// Largest individual update norm.
    pub max_norm: f64,
    pub passes: bool,
}

pub fn split_gate(updates: &[&ModelUpdate], eps1: f64, eps2: f64) -> GateResult {
    if updates.len() < 2 {
        // A singleton never splits; still report its norms.
        let norm = updates.first().map_or(0.0, |u| u.norm());
        return GateResult { mean_norm: norm, max_norm: norm, passes: false };
    }
    let total: f64 = updates.iter().map(|u| u.num_samples as f64).sum();
    let dim = updates[0].delta.len();
    let mut mean = vec![0.0; dim];
    let mut max_norm = 0.0f64;
    for u in updates {
        let w = u.num_samples as f64 / total;
        for (m, d) in mean.iter_mut().zip(&u.delta) {
            *m += w * d;
        }
        max_norm = max_norm.max(u.norm());
    }
    let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    GateResult { mean_norm, max_norm, passes: mean_norm < eps1 && max_norm > eps2 }
}

/// A two-way split of matrix indices with its objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct Bipartition {
    /// Sorted indices; always contains index 0.
    pub c1: Vec<usize>,
    pub c2: Vec<usize>,
    /// max similarity across the cut (the minimized objective).
    pub cross_max: f64,
}

fn cross_max(sim: &SimilarityMatrix, c1: &[usize], c2: &[usize]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &i in c1 {
        for &j in c2 {
            m = m.max(sim.get(i, j));
        }
    }
    m
}

fn exhaustive_bipartition(sim: &SimilarityMatrix) -> Bipartition {
    let n = sim.len();
    let mut best: Option<Bipartition> = None;
    // Index 0 stays in c1, so each unordered bipartition appears once.
    for mask in 1u32..(1 << (n - 1)) {
        let mut c1 = vec![0usize];
        let mut c2 = Vec::new();
        for i in 1..n {
            if mask >> (i - 1) & 1 == 1 {
                c2.push(i);
            } else {
                c1.push(i);
            }
        }
        let obj = cross_max(sim, &c1, &c2);
        let better = match &best {
            None => true,
            Some(b) => obj < b.cross_max || (obj == b.cross_max && c1 < b.c1),
        };
        if better {
            best = Some(Bipartition { c1, c2, cross_max: obj });
        }
    }
    best.expect("n >= 2 yields at least one bipartition")
}

/// Max-linkage agglomeration: repeatedly merge the two groups whose
/// cross-group maximum similarity is highest, until two groups remain.
fn agglomerative_bipartition(sim: &SimilarityMatrix) -> Bipartition {
    let mut groups: Vec<Vec<usize>> = (0..sim.len()).map(|i| vec![i]).collect();
    while groups.len() > 2 {
        let mut best = (f64::NEG_INFINITY, 0usize, 1usize);
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let link = cross_max(sim, &groups[a], &groups[b]);
                if link > best.0 {
                    best = (link, a, b);
                }
            }
        }
        let merged = groups.remove(best.2);
        groups[best.1].extend(merged);
        groups[best.1].sort_unstable();
    }
    let (mut c1, mut c2) = (groups.swap_remove(0), groups.pop().unwrap());
    if !c1.contains(&0) {
        std::mem::swap(&mut c1, &mut c2);
    }
    let obj = cross_max(sim, &c1, &c2);
    Bipartition { c1, c2, cross_max: obj }
}

/// Minimizes the maximum similarity across the cut: exact search up to
/// `exhaustive_limit` members, agglomerative above. Ties in the exact
/// search go to the lexicographically smallest first side.
pub fn optimal_bipartition(sim: &SimilarityMatrix, exhaustive_limit: usize) -> Result<Bipartition> {
    if sim.len() < 2 {
        return Err(Error::SingletonCluster(0));
    }
    if sim.len() <= exhaustive_limit.min(30) {
        Ok(exhaustive_bipartition(sim))
    } else {
        Ok(agglomerative_bipartition(sim))
    }
}

/// Separation quality of a cut: worst within-side similarity minus best
/// cross-side similarity. Positive gaps mean clean separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationGap {
    pub sim_within_min: f64,
    pub sim_cross_max: f64,
    pub gap: f64,
    /// True when a side has fewer than two members, in which case the
    /// within-minimum over that side is the empty-minimum convention 1.
    pub degenerate_side: bool,
}

pub fn separation_gap(sim: &SimilarityMatrix, c1: &[usize], c2: &[usize]) -> SeparationGap {
    let mut within = f64::INFINITY;
    for side in [c1, c2] {
        for (a, &i) in side.iter().enumerate() {
            for &j in &side[a + 1..] {
                within = within.min(sim.get(i, j));
            }
        }
    }
    let degenerate_side = c1.len() < 2 || c2.len() < 2;
    if within == f64::INFINITY {
        within = 1.0;
    }
    let cross = cross_max(sim, c1, c2);
    SeparationGap {
        sim_within_min: within,
        sim_cross_max: cross,
        gap: within - cross,
        degenerate_side,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaCheck {
    pub max_gamma: f64,
    pub threshold: f64,
    pub passes: bool,
}

/// Post-split consistency check. Each member's reference gradient is the
/// sample-weighted mean update of its side's similarity neighborhood: the
/// other members of the side at least as similar to it as anything across
/// the cut. gamma is the member's relative deviation from that reference.
/// Singleton sides have gamma 0 (nothing to deviate from). An empty
/// neighborhood or a zero reference leaves gamma undefined and the check
/// fails closed.
pub fn gamma_check(
    sim: &SimilarityMatrix,
    updates: &[&ModelUpdate],
    c1: &[usize],
    c2: &[usize],
) -> GammaCheck {
    let cross = cross_max(sim, c1, c2);
    let threshold = ((1.0 - cross).max(0.0) / 2.0).sqrt();
    let mut max_gamma = 0.0f64;
    for side in [c1, c2] {
        if side.len() < 2 {
            continue;
        }
        // The reference consensus for k takes same-side updates at least as
        // similar to k as the midpoint between perfect alignment and the
        // best cross pair. The midpoint keeps a foreign block out of the
        // reference when a side still contains several blocks; the slack
        // admits bitwise-equal neighbors whose similarity rounds below 1.
        let cutoff = (1.0 + cross) / 2.0 - 1e-9;
        for &k in side {
            let neighborhood: Vec<usize> = side
                .iter()
                .copied()
                .filter(|&j| j != k && sim.get(k, j) >= cutoff)
                .collect();
            if neighborhood.is_empty() {
                max_gamma = f64::INFINITY;
                continue;
            }
            let total: f64 = neighborhood
                .iter()
                .map(|&j| updates[j].num_samples as f64)
                .sum();
            let dim = updates[k].delta.len();
            let mut reference = vec![0.0; dim];
            for &j in &neighborhood {
                let w = updates[j].num_samples as f64 / total;
                for (r, d) in reference.iter_mut().zip(&updates[j].delta) {
                    *r += w * d;
                }
            }
            let ref_norm = reference.iter().map(|x| x * x).sum::<f64>().sqrt();
            if ref_norm == 0.0 {
                max_gamma = f64::INFINITY;
                continue;
            }
            let dev = reference
                .iter()
                .zip(&updates[k].delta)
                .map(|(r, d)| (r - d) * (r - d))
                .sum::<f64>()
                .sqrt();
            max_gamma = max_gamma.max(dev / ref_norm);
        }
    }
    // Identical updates yield gamma 0 and pass even at a zero threshold.
    let passes = max_gamma == 0.0 || max_gamma < threshold;
    GammaCheck { max_gamma, threshold, passes }
}

/// Everything a split evaluation produced, whether or not it was applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitDecision {
    pub cluster: ClusterId,
    pub round: u32,
    pub mean_norm: f64,
    pub max_norm: f64,
    pub gate_passed: bool,
    pub sim_cross_max: Option<f64>,
    pub sim_within_min: Option<f64>,
    pub gap: Option<f64>,
    pub degenerate_side: bool,
    pub max_gamma: Option<f64>,
    pub gamma_threshold: Option<f64>,
    pub split: bool,
    pub children: Option<(Vec<ClientId>, Vec<ClientId>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub id: ClusterId,
    /// Sorted, deduplicated client ids.
    pub members: Vec<ClientId>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitRecord {
    pub round: u32,
    pub parent: ClusterId,
    pub child_a: ClusterId,
    pub child_b: ClusterId,
}

/// The current partitioning of clients, maintained by binary splits.
/// Cluster ids are never reused, so the split log replays to the tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterTree {
    clusters: Vec<Cluster>,
    next_id: ClusterId,
    log: Vec<SplitRecord>,
}

impl ClusterTree {
    /// Single root cluster 0 holding every client.
    pub fn root(mut members: Vec<ClientId>) -> Self {
        members.sort_unstable();
        members.dedup();
        Self {
            clusters: vec![Cluster { id: 0, members, converged: false }],
            next_id: 1,
            log: Vec::new(),
        }
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, id: ClusterId) -> Result<&Cluster> {
        self.clusters
            .iter()
            .find(|c| c.id == id)
            .ok_or(Error::UnknownCluster(id))
    }

    pub fn cluster_of(&self, client: ClientId) -> Option<ClusterId> {
        self.clusters
            .iter()
            .find(|c| c.members.binary_search(&client).is_ok())
            .map(|c| c.id)
    }

    pub fn num_clients(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }

    pub fn all_clients(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> =
            self.clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn all_converged(&self) -> bool {
        self.clusters.iter().all(|c| c.converged)
    }

    pub fn set_converged(&mut self, id: ClusterId, converged: bool) {
        if let Some(c) = self.clusters.iter_mut().find(|c| c.id == id) {
            c.converged = converged;
        }
    }

    pub fn split_log(&self) -> &[SplitRecord] {
        &self.log
    }

    /// Replaces `parent` with two children. The children must be nonempty,
    /// disjoint, and cover the parent exactly.
    pub fn apply_split(
        &mut self,
        round: u32,
        parent: ClusterId,
        mut c1: Vec<ClientId>,
        mut c2: Vec<ClientId>,
    ) -> Result<(ClusterId, ClusterId)> {
        c1.sort_unstable();
        c2.sort_unstable();
        let p = self.cluster(parent)?;
        let mut union: Vec<ClientId> = c1.iter().chain(&c2).copied().collect();
        union.sort_unstable();
        let disjoint = union.windows(2).all(|w| w[0] != w[1]);
        if c1.is_empty() || c2.is_empty() || !disjoint || union != p.members {
            return Err(Error::SplitPartition(parent));
        }
        let (a, b) = (self.next_id, self.next_id + 1);
        self.next_id += 2;
        self.clusters.retain(|c| c.id != parent);
        self.clusters.push(Cluster { id: a, members: c1, converged: false });
        self.clusters.push(Cluster { id: b, members: c2, converged: false });
        self.log.push(SplitRecord { round, parent, child_a: a, child_b: b });
        Ok((a, b))
    }

    /// Disjoint cover of exactly the given client set.
    pub fn is_sound(&self, clients: &[ClientId]) -> bool {
        let mut expected = clients.to_vec();
        expected.sort_unstable();
        expected.dedup();
        self.all_clients() == expected && self.num_clients() == expected.len()
    }

    pub fn partition(&self) -> Vec<Vec<ClientId>> {
        self.clusters.iter().map(|c| c.members.clone()).collect()
    }
}

/// Fraction of element pairs on which two labelings agree (grouped together
/// in both, or separated in both). 1.0 means identical partitions. Both
/// slices label the same elements in the same order.
pub fn rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same elements");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// Runs the full split pipeline on one cluster: gate, bipartition, gap,
/// gamma. Mutates the tree only when every check passes. `updates` must
/// cover the cluster's membership exactly.
pub fn maybe_split(
    tree: &mut ClusterTree,
    round: u32,
    cluster_id: ClusterId,
    updates: &[&ModelUpdate],
    eps1: f64,
    eps2: f64,
    exhaustive_limit: usize,
) -> Result<SplitDecision> {
    let members = tree.cluster(cluster_id)?.members.clone();
    let mut covered: Vec<ClientId> = updates.iter().map(|u| u.client_id).collect();
    covered.sort_unstable();
    if covered != members {
        return Err(Error::IncompleteUpdates(cluster_id));
    }

    let gate = split_gate(updates, eps1, eps2);
    let mut decision = SplitDecision {
        cluster: cluster_id,
        round,
        mean_norm: gate.mean_norm,
        max_norm: gate.max_norm,
        gate_passed: gate.passes,
        sim_cross_max: None,
        sim_within_min: None,
        gap: None,
        degenerate_side: false,
        max_gamma: None,
        gamma_threshold: None,
        split: false,
        children: None,
    };
    if !gate.passes {
        return Ok(decision);
    }

    let sim = match SimilarityMatrix::from_updates(updates) {
        Ok(s) => s,
        // A zero-norm update makes similarity undefined; not splittable now.
        Err(Error::ZeroUpdate(_)) => return Ok(decision),
        Err(e) => return Err(e),
    };
    let part = optimal_bipartition(&sim, exhaustive_limit)?;
    let gap = separation_gap(&sim, &part.c1, &part.c2);
    let gamma = gamma_check(&sim, updates, &part.c1, &part.c2);
    decision.sim_cross_max = Some(gap.sim_cross_max);
    decision.sim_within_min = Some(gap.sim_within_min);
    decision.gap = Some(gap.gap);
    decision.degenerate_side = gap.degenerate_side;
    decision.max_gamma = Some(gamma.max_gamma);
    decision.gamma_threshold = Some(gamma.threshold);
    if !gamma.passes {
        return Ok(decision);
    }

    let ids = |side: &[usize]| side.iter().map(|&i| sim.ids()[i]).collect::<Vec<_>>();
    let (kids1, kids2) = (ids(&part.c1), ids(&part.c2));
    tree.apply_split(round, cluster_id, kids1.clone(), kids2.clone())?;
    decision.split = true;
    decision.children = Some((kids1, kids2));
    Ok(decision)
}
