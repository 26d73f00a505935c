//! Local training and aggregation.
//!
//! Two small model families cover the simulator's needs: multinomial
//! logistic regression (zero-initialized, convex) and an optional one-hidden-
//! layer tanh MLP. Parameters live in a single flat `Vec<f64>` so updates,
//! averages and cosine similarities are plain vector arithmetic. All batch
//! reductions run in a fixed left-to-right order, which keeps runs bit-for-
//! bit reproducible.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{minibatches, ClientData, SampleSet};
use crate::error::{Error, Result};
use crate::{rng, ClientId};

/// Probabilities are clamped here before taking logs.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelShape {
    Logistic { features: usize, classes: usize },
    Mlp { features: usize, hidden: usize, classes: usize },
}

impl ModelShape {
    pub fn param_len(&self) -> usize {
        match *self {
            ModelShape::Logistic { features, classes } => classes * (features + 1),
            ModelShape::Mlp { features, hidden, classes } => {
                hidden * (features + 1) + classes * (hidden + 1)
            }
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            ModelShape::Logistic { classes, .. } | ModelShape::Mlp { classes, .. } => classes,
        }
    }

    pub fn features(&self) -> usize {
        match *self {
            ModelShape::Logistic { features, .. } | ModelShape::Mlp { features, .. } => features,
        }
    }

    /// Layer widths, input first. Two entries mean logistic, three an MLP.
    pub fn dims(&self) -> Vec<u32> {
        match *self {
            ModelShape::Logistic { features, classes } => vec![features as u32, classes as u32],
            ModelShape::Mlp { features, hidden, classes } => {
                vec![features as u32, hidden as u32, classes as u32]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub w: Vec<f64>,
}

/// One client's training result for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub client_id: ClientId,
    /// Training-set size; the aggregation weight.
    pub num_samples: u32,
    pub delta: Vec<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl ModelUpdate {
    pub fn norm(&self) -> f64 {
        self.delta.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Zero weights for the logistic model, small seeded normals for the MLP.
pub fn init_model(shape: ModelShape, seed: u64) -> ModelParams {
    let n = shape.param_len();
    let w = match shape {
        ModelShape::Logistic { .. } => vec![0.0; n],
        ModelShape::Mlp { features, hidden, .. } => {
            let mut r = rng::stream(seed, rng::MODEL_INIT, 0, 0);
            let mut w = vec![0.0; n];
            let s1 = 1.0 / (features as f64 + 1.0).sqrt();
            let s2 = 1.0 / (hidden as f64 + 1.0).sqrt();
            for (i, v) in w.iter_mut().enumerate() {
                let scale = if i < hidden * (features + 1) { s1 } else { s2 };
                let z: f64 = r.sample(StandardNormal);
                *v = scale * z;
            }
            w
        }
    };
    ModelParams { shape, w }
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities for one input row.
fn forward(model: &ModelParams, x: &[f64], hidden_buf: &mut Vec<f64>) -> Vec<f64> {
    match model.shape {
        ModelShape::Logistic { features, classes } => {
            let mut logits = vec![0.0; classes];
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &model.w[c * (features + 1)..(c + 1) * (features + 1)];
                let mut acc = row[features];
                for (wj, xj) in row[..features].iter().zip(x) {
                    acc += wj * xj;
                }
                *l = acc;
            }
            softmax_in_place(&mut logits);
            logits
        }
        ModelShape::Mlp { features, hidden, classes } => {
            hidden_buf.clear();
            hidden_buf.resize(hidden, 0.0);
            for (j, a) in hidden_buf.iter_mut().enumerate() {
                let row = &model.w[j * (features + 1)..(j + 1) * (features + 1)];
                let mut acc = row[features];
                for (wj, xj) in row[..features].iter().zip(x) {
                    acc += wj * xj;
                }
                *a = acc.tanh();
            }
            let w2 = &model.w[hidden * (features + 1)..];
            let mut logits = vec![0.0; classes];
            for (c, l) in logits.iter_mut().enumerate() {
                let row = &w2[c * (hidden + 1)..(c + 1) * (hidden + 1)];
                let mut acc = row[hidden];
                for (wj, aj) in row[..hidden].iter().zip(hidden_buf.iter()) {
                    acc += wj * aj;
                }
                *l = acc;
            }
            softmax_in_place(&mut logits);
            logits
        }
    }
}

/// Mean cross-entropy over the indexed rows.
pub fn loss(model: &ModelParams, set: &SampleSet, idx: &[usize]) -> f64 {
    let mut hidden_buf = Vec::new();
    let mut total = 0.0;
    for &i in idx {
        let p = forward(model, set.row(i), &mut hidden_buf);
        total += -(p[set.labels[i] as usize].max(PROB_FLOOR)).ln();
    }
    total / idx.len() as f64
}

/// Mean cross-entropy and its gradient over the indexed rows.
pub fn loss_and_gradient(model: &ModelParams, set: &SampleSet, idx: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.w.len()];
    let mut hidden_buf = Vec::new();
    let mut total = 0.0;
    let scale = 1.0 / idx.len() as f64;
    for &i in idx {
        let x = set.row(i);
        let y = set.labels[i] as usize;
        let mut p = forward(model, x, &mut hidden_buf);
        total += -(p[y].max(PROB_FLOOR)).ln();
        p[y] -= 1.0; // now the logit error
        match model.shape {
            ModelShape::Logistic { features, .. } => {
                for (c, err) in p.iter().enumerate() {
                    let row = &mut grad[c * (features + 1)..(c + 1) * (features + 1)];
                    for (g, xj) in row[..features].iter_mut().zip(x) {
                        *g += err * xj;
                    }
                    row[features] += err;
                }
            }
            ModelShape::Mlp { features, hidden, .. } => {
                let w2_off = hidden * (features + 1);
                let mut d_hidden = vec![0.0; hidden];
                for (c, err) in p.iter().enumerate() {
                    let w2_row = &model.w[w2_off + c * (hidden + 1)..w2_off + (c + 1) * (hidden + 1)];
                    let g2_row =
                        &mut grad[w2_off + c * (hidden + 1)..w2_off + (c + 1) * (hidden + 1)];
                    for j in 0..hidden {
                        g2_row[j] += err * hidden_buf[j];
                        d_hidden[j] += err * w2_row[j];
                    }
                    g2_row[hidden] += err;
                }
                for j in 0..hidden {
                    let dz = d_hidden[j] * (1.0 - hidden_buf[j] * hidden_buf[j]);
                    let row = &mut grad[j * (features + 1)..(j + 1) * (features + 1)];
                    for (g, xj) in row[..features].iter_mut().zip(x) {
                        *g += dz * xj;
                    }
                    row[features] += dz;
                }
            }
        }
    }
    for g in grad.iter_mut() {
        *g *= scale;
    }
    (total * scale, grad)
}

/// Runs `epochs` passes of minibatch SGD from `base` and returns the weight
/// delta together with the full-train-set loss before and after.
pub fn local_train(
    base: &ModelParams,
    client: &ClientData,
    epochs: u32,
    batch_size: usize,
    eta: f64,
    seed: u64,
) -> Result<ModelUpdate> {
    if !(eta > 0.0) {
        return Err(Error::LearningRate(eta));
    }
    let batches = minibatches(client, batch_size, epochs, seed)?;
    let all: Vec<usize> = (0..client.train.len()).collect();
    let loss_before = loss(base, &client.train, &all);

    let mut model = base.clone();
    for batch in &batches {
        let (_, grad) = loss_and_gradient(&model, &client.train, batch);
        for (w, g) in model.w.iter_mut().zip(&grad) {
            *w -= eta * g;
        }
    }
    let loss_after = loss(&model, &client.train, &all);
    let delta = model.w.iter().zip(&base.w).map(|(a, b)| a - b).collect();
    Ok(ModelUpdate {
        client_id: client.id,
        num_samples: client.train.len() as u32,
        delta,
        loss_before,
        loss_after,
    })
}

/// Fraction of rows whose predicted class matches the label. Argmax ties go
/// to the lowest class index.
pub fn evaluate(model: &ModelParams, set: &SampleSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut hidden_buf = Vec::new();
    let mut hits = 0usize;
    for i in 0..set.len() {
        let p = forward(model, set.row(i), &mut hidden_buf);
        let mut best = 0usize;
        for (c, v) in p.iter().enumerate().skip(1) {
            if *v > p[best] {
                best = c;
            }
        }
        if best == set.labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Sample-size-weighted federated average: `base + sum_k (n_k / n) delta_k`.
pub fn fedavg(base: &ModelParams, updates: &[&ModelUpdate]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdateList);
    }
    for u in updates {
        if u.delta.len() != base.w.len() {
            return Err(Error::ShapeMismatch { expected: base.w.len(), got: u.delta.len() });
        }
    }
    let total: f64 = updates.iter().map(|u| f64::from(u.num_samples)).sum();
    let mut w = base.w.clone();
    for u in updates {
        let weight = f64::from(u.num_samples) / total;
        for (wi, di) in w.iter_mut().zip(&u.delta) {
            *wi += weight * di;
        }
    }
    Ok(ModelParams { shape: base.shape, w })
}

// Binary model encoding: a little-endian header of layer widths followed by
// the flat little-endian f64 parameter vector.
//
//   [n_dims: u32] [dims: u32 * n_dims] [n_params: u64] [params: f64 * n_params]
impl ModelParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.shape.dims();
        let mut out = Vec::with_capacity(4 + 4 * dims.len() + 8 + 8 * self.w.len());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.w.len() as u64).to_le_bytes());
        for v in &self.w {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
        let bad = |msg: &str| Error::ModelEncoding(msg.into());
        let take4 = |b: &[u8], at: usize| -> Result<u32> {
            Ok(u32::from_le_bytes(
                b.get(at..at + 4).ok_or_else(|| bad("truncated"))?.try_into().unwrap(),
            ))
        };
        let n_dims = take4(bytes, 0)? as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for i in 0..n_dims {
            dims.push(take4(bytes, 4 + 4 * i)? as usize);
        }
        let shape = match dims.as_slice() {
            [f, c] => ModelShape::Logistic { features: *f, classes: *c },
            [f, h, c] => ModelShape::Mlp { features: *f, hidden: *h, classes: *c },
            _ => return Err(bad("unsupported layer count")),
        };
        let mut at = 4 + 4 * n_dims;
        let n_params = u64::from_le_bytes(
            bytes.get(at..at + 8).ok_or_else(|| bad("truncated"))?.try_into().unwrap(),
        ) as usize;
        if n_params != shape.param_len() {
            return Err(bad("parameter count disagrees with layer widths"));
        }
        at += 8;
        if bytes.len() != at + 8 * n_params {
            return Err(bad("payload length mismatch"));
        }
        let mut w = Vec::with_capacity(n_params);
        for i in 0..n_params {
            let o = at + 8 * i;
            w.push(f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()));
        }
        Ok(ModelParams { shape, w })
    }

    /// Size of the encoded model; the default upload payload size.
    pub fn size_bits(&self) -> f64 {
        (self.to_bytes().len() * 8) as f64
    }
}
