//! Synthetic federated datasets with controlled heterogeneity.
//!
//! Clients draw labeled samples from shared Gaussian class blobs. Each
//! client is assigned one of `latent_clusters` latent distributions
//! round-robin (client `k` gets `k % latent_clusters`), and an incongruence
//! mode makes distributions with different latent ids impossible to fit with
//! a single model: label permutation relabels classes per latent id, feature
//! rotation applies a per-latent orthogonal transform to the inputs. The
//! latent assignment is kept as ground truth for evaluation only; nothing on
//! the training path reads it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, ClientId};

/// How latent distributions disagree with each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Incongruence {
    /// All latent ids share one distribution.
    None,
    /// Latent id `i` relabels classes by the cyclic shift `y -> (y + i) % C`.
    /// Requires `latent_clusters <= classes` so the shifts stay distinct.
    LabelPermutation,
    /// Latent id `i` rotates the first two feature coordinates by
    /// `2*pi*i / latent_clusters`. Requires at least two features.
    FeatureRotation,
}

/// Generation parameters. `clients` is the population size K, and
/// `latent_clusters` the number of distinct data distributions M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub clients: u32,
    pub latent_clusters: u32,
    pub features: usize,
    pub classes: u32,
    /// Each client only ever sees this many of the `classes` labels.
    pub labels_per_client: u32,
    pub samples_min: u32,
    pub samples_max: u32,
    /// Held-out fraction, drawn fresh from the same distribution.
    pub test_fraction: f64,
    /// Scale of the blob means; larger means easier classes.
    pub class_spread: f64,
    /// Standard deviation of the per-sample noise around a blob mean.
    pub noise_sigma: f64,
    pub incongruence: Incongruence,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            clients: 16,
            latent_clusters: 4,
            features: 8,
            classes: 4,
            labels_per_client: 4,
            samples_min: 50,
            samples_max: 200,
            test_fraction: 0.25,
            class_spread: 3.0,
            noise_sigma: 1.0,
            incongruence: Incongruence::LabelPermutation,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidDataset(msg));
        if self.clients < 2 {
            return fail(format!("need at least 2 clients, got {}", self.clients));
        }
        if self.latent_clusters < 1 {
            return fail("latent_clusters must be at least 1".into());
        }
        if self.clients < self.latent_clusters {
            return fail(format!(
                "{} clients cannot cover {} latent clusters",
                self.clients, self.latent_clusters
            ));
        }
        if self.features < 1 {
            return fail("features must be at least 1".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.labels_per_client < 1 || self.labels_per_client > self.classes {
            return fail(format!(
                "labels_per_client {} outside 1..={}",
                self.labels_per_client, self.classes
            ));
        }
        if self.samples_min < 1 {
            return fail("samples_min must be at least 1".into());
        }
        if self.samples_max < self.samples_min {
            return fail(format!(
                "samples_max {} below samples_min {}",
                self.samples_max, self.samples_min
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction <= 1.0) {
            return fail(format!("test_fraction {} outside (0, 1]", self.test_fraction));
        }
        if !(self.noise_sigma > 0.0) || !(self.class_spread > 0.0) {
            return fail("class_spread and noise_sigma must be positive".into());
        }
        match self.incongruence {
            Incongruence::LabelPermutation if self.latent_clusters > self.classes => fail(format!(
                "label permutation supports at most {} latent clusters for {} classes",
                self.classes, self.classes
            )),
            Incongruence::FeatureRotation if self.features < 2 => {
                fail("feature rotation needs at least 2 features".into())
            }
            _ => Ok(()),
        }
    }
}

/// Row-major labeled sample block.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dims: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl SampleSet {
    pub fn with_capacity(dims: usize, rows: usize) -> Self {
        SampleSet {
            dims,
            features: Vec::with_capacity(dims * rows),
            labels: Vec::with_capacity(rows),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    pub fn push(&mut self, row: &[f64], label: u32) {
        debug_assert_eq!(row.len(), self.dims);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub id: ClientId,
    /// Ground-truth latent distribution id; evaluation only.
    pub latent: u32,
    pub train: SampleSet,
    pub test: SampleSet,
}

impl ClientData {
    /// Training-set size, the weight this client carries in aggregation.
    pub fn num_samples(&self) -> u32 {
        self.train.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub features: usize,
    pub classes: u32,
    pub latent_clusters: u32,
    pub clients: Vec<ClientData>,
}

impl FederatedDataset {
    /// Ground-truth latent id per client, indexed by client id.
    pub fn ground_truth(&self) -> Vec<u32> {
        self.clients.iter().map(|c| c.latent).collect()
    }
}

/// Draws the full population. Deterministic in `seed`; each client uses an
/// independent stream so client order never matters.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<FederatedDataset> {
    spec.validate()?;
    let d = spec.features;
    let c = spec.classes as usize;

    let mut means_rng = rng::stream(seed, rng::CLASS_MEANS, 0, 0);
    let mut means = vec![0.0f64; c * d];
    for v in means.iter_mut() {
        let z: f64 = means_rng.sample(StandardNormal);
        *v = spec.class_spread * z;
    }

    let mut clients = Vec::with_capacity(spec.clients as usize);
    for k in 0..spec.clients {
        let mut r = rng::stream(seed, rng::CLIENT_DATA, u64::from(k), 0);
        let n_train = r.random_range(spec.samples_min..=spec.samples_max) as usize;
        let n_test = ((spec.test_fraction * n_train as f64).ceil() as usize).max(1);

        let mut label_pool: Vec<u32> = (0..spec.classes).collect();
        label_pool.shuffle(&mut r);
        let mut labels: Vec<u32> = label_pool[..spec.labels_per_client as usize].to_vec();
        labels.sort_unstable();

        let draw = |set: &mut SampleSet, rows: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let mut row = vec![0.0f64; d];
            for _ in 0..rows {
                let y = labels[r.random_range(0..labels.len())];
                let mean = &means[y as usize * d..(y as usize + 1) * d];
                for (x, m) in row.iter_mut().zip(mean) {
                    let z: f64 = r.sample(StandardNormal);
                    *x = m + spec.noise_sigma * z;
                }
                set.push(&row, y);
            }
        };

        let mut train = SampleSet::with_capacity(d, n_train);
        draw(&mut train, n_train, &mut r);
        let mut test = SampleSet::with_capacity(d, n_test);
        draw(&mut test, n_test, &mut r);

        clients.push(ClientData {
            id: k,
            latent: k % spec.latent_clusters,
            train,
            test,
        });
    }

    Ok(FederatedDataset {
        features: d,
        classes: spec.classes,
        latent_clusters: spec.latent_clusters,
        clients,
    })
}

/// Transforms each client's samples according to its latent id. With one
/// latent cluster (or `Incongruence::None`) the data comes back unchanged.
pub fn apply_incongruence(
    mut data: FederatedDataset,
    mode: Incongruence,
) -> Result<FederatedDataset> {
    let m = data.latent_clusters;
    if m <= 1 || mode == Incongruence::None {
        return Ok(data);
    }
    match mode {
        Incongruence::None => unreachable!(),
        Incongruence::LabelPermutation => {
            if data.classes < 2 {
                return Err(Error::InvalidDataset(
                    "label permutation needs at least 2 classes".into(),
                ));
            }
            if m > data.classes {
                return Err(Error::InvalidDataset(format!(
                    "label permutation supports at most {} latent clusters for {} classes",
                    data.classes, data.classes
                )));
            }
            let c = data.classes;
            for client in data.clients.iter_mut() {
                let shift = client.latent;
                for set in [&mut client.train, &mut client.test] {
                    for y in set.labels.iter_mut() {
                        *y = (*y + shift) % c;
                    }
                }
            }
        }
        Incongruence::FeatureRotation => {
            if data.features < 2 {
                return Err(Error::InvalidDataset(
                    "feature rotation needs at least 2 features".into(),
                ));
            }
            for client in data.clients.iter_mut() {
                let theta = 2.0 * std::f64::consts::PI * f64::from(client.latent) / f64::from(m);
                let (sin, cos) = theta.sin_cos();
                for set in [&mut client.train, &mut client.test] {
                    let dims = set.dims;
                    for row in set.features.chunks_exact_mut(dims) {
                        let (a, b) = (row[0], row[1]);
                        row[0] = cos * a - sin * b;
                        row[1] = sin * a + cos * b;
                    }
                }
            }
        }
    }
    Ok(data)
}

/// Index batches for `epochs` passes over a client's training set. Each
/// epoch is an independent reshuffle covering every sample exactly once;
/// only the last batch of an epoch may be short. Total batch count is
/// `epochs * ceil(n / batch_size)`.
pub fn minibatches(
    client: &ClientData,
    batch_size: usize,
    epochs: u32,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = client.train.len();
    if batch_size < 1 || batch_size > n {
        return Err(Error::BatchSize {
            batch: batch_size,
            samples: n,
        });
    }
    let per_epoch = n.div_ceil(batch_size);
    let mut batches = Vec::with_capacity(per_epoch * epochs as usize);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, rng::SHUFFLE, u64::from(epoch), 0));
        for chunk in order.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    Ok(batches)
}
