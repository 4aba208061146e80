//! Differentiable predictors (softmax regression and a one-hidden-layer
//! tanh MLP) and the local mini-batch SGD loop run by each client.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    MlpOneHidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub hidden_units: usize,
    #[serde(default)]
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn softmax(n_features: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            n_features,
            n_classes,
            hidden_units: 0,
            init_scale: 0.0,
        }
    }

    pub fn mlp(n_features: usize, n_classes: usize, hidden_units: usize, init_scale: f64) -> Self {
        Self {
            kind: ModelKind::MlpOneHidden,
            n_features,
            n_classes,
            hidden_units,
            init_scale,
        }
    }

    /// Parameter dimension. Layouts (row-major):
    /// softmax: `W[C x F] | b[C]`; mlp: `W1[H x F] | b1[H] | W2[C x H] | b2[C]`.
    pub fn dim(&self) -> usize {
        let (f, c, h) = (self.n_features, self.n_classes, self.hidden_units);
        match self.kind {
            ModelKind::SoftmaxRegression => c * f + c,
            ModelKind::MlpOneHidden => h * f + h + c * h + c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_classes < 2 {
            return Err(Error::config(
                "model",
                "n_features must be positive and n_classes at least 2",
            ));
        }
        if self.kind == ModelKind::MlpOneHidden && self.hidden_units == 0 {
            return Err(Error::config("model.hidden_units", "must be positive for mlp"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::config("model.init_scale", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Initial weights: `init_scale * N(0, 1)` on every coordinate.
    pub fn init_params(&self, rng: RngStream) -> ParamVector {
        let dim = self.dim();
        if self.init_scale == 0.0 {
            return ParamVector::zeros(dim);
        }
        let mut r = rng.rng();
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let v = (0..dim).map(|_| self.init_scale * n.sample(&mut r)).collect();
        ParamVector::new(v).expect("finite init")
    }

    fn check(&self, w: &ParamVector, data: &ClientDataset) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: w.dim(),
            });
        }
        if data.n_features != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: data.n_features,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub eta_local: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        // eta_local = 0 is allowed for diagnostics (it yields a zero update).
        if !(self.eta_local.is_finite() && self.eta_local >= 0.0) {
            return Err(Error::config("model.train.eta_local", "must be finite and non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("model.train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("model.train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

/// Softmax cross-entropy for one sample: fills `probs` with the predictive
/// distribution and returns the loss.
fn softmax_xent(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln() - logits[label]
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    logits: Vec<f64>,
    probs: Vec<f64>,
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            logits: vec![0.0; spec.n_classes],
            probs: vec![0.0; spec.n_classes],
            hidden: vec![0.0; spec.hidden_units],
            dhidden: vec![0.0; spec.hidden_units],
        }
    }
}

/// Computes logits for one row into `ws.logits` (and hidden activations for the MLP).
fn forward(spec: &ModelSpec, w: &[f64], x: &[f64], ws: &mut Workspace) {
    let (f, c, h) = (spec.n_features, spec.n_classes, spec.hidden_units);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (weights, bias) = w.split_at(c * f);
            for j in 0..c {
                let row = &weights[j * f..(j + 1) * f];
                ws.logits[j] = bias[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        ModelKind::MlpOneHidden => {
            let (w1, rest) = w.split_at(h * f);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(c * h);
            for u in 0..h {
                let row = &w1[u * f..(u + 1) * f];
                let pre = b1[u] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                ws.hidden[u] = pre.tanh();
            }
            for j in 0..c {
                let row = &w2[j * h..(j + 1) * h];
                ws.logits[j] = b2[j] + row.iter().zip(&ws.hidden).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Adds the gradient of one sample's loss (given `ws.probs`) into `grad`.
fn backward(spec: &ModelSpec, w: &[f64], x: &[f64], label: usize, ws: &mut Workspace, grad: &mut [f64]) {
    let (f, c, h) = (spec.n_features, spec.n_classes, spec.hidden_units);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (gw, gb) = grad.split_at_mut(c * f);
            for j in 0..c {
                let d = ws.probs[j] - if j == label { 1.0 } else { 0.0 };
                gb[j] += d;
                for (g, &xi) in gw[j * f..(j + 1) * f].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        ModelKind::MlpOneHidden => {
            let w2 = &w[h * f + h..h * f + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * f);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            ws.dhidden.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..c {
                let d = ws.probs[j] - if j == label { 1.0 } else { 0.0 };
                gb2[j] += d;
                let w2row = &w2[j * h..(j + 1) * h];
                for u in 0..h {
                    gw2[j * h + u] += d * ws.hidden[u];
                    ws.dhidden[u] += d * w2row[u];
                }
            }
            for u in 0..h {
                let dpre = ws.dhidden[u] * (1.0 - ws.hidden[u] * ws.hidden[u]);
                gb1[u] += dpre;
                for (g, &xi) in gw1[u * f..(u + 1) * f].iter_mut().zip(x) {
                    *g += dpre * xi;
                }
            }
        }
    }
}

/// Mean cross-entropy over the rows named by `indices` and its exact gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &ClientDataset,
    indices: &[usize],
) -> Result<(f64, ParamVector)> {
    spec.check(w, data)?;
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let wv = w.as_slice();
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; spec.dim()];
    let mut loss = 0.0;
    for &i in indices {
        let x = data.row(i);
        let label = data.labels[i];
        forward(spec, wv, x, &mut ws);
        loss += softmax_xent(&ws.logits, label, &mut ws.probs);
        backward(spec, wv, x, label, &mut ws, &mut grad);
    }
    let n = indices.len() as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grad = ParamVector::new(grad).map_err(|_| Error::NonFinite("gradient"))?;
    Ok((loss, grad))
}

/// Full-batch loss and gradient over the whole dataset.
pub fn full_loss_and_grad(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &ClientDataset,
) -> Result<(f64, ParamVector)> {
    let all: Vec<usize> = (0..data.len()).collect();
    loss_and_grad(spec, w, data, &all)
}

/// Everything produced by one client's local training pass.
#[derive(Debug, Clone)]
pub struct LocalTrace {
    /// `w_E - w_0`, computed from the parameter recursion.
    pub delta: ParamVector,
    /// Sum of the E mini-batch gradients, accumulated alongside.
    pub grad_sum: ParamVector,
    pub losses: Vec<f64>,
}

/// Runs `cfg.epochs` SGD steps from `w_t`, each on a mini-batch drawn with
/// replacement from `data` using `rng`, and returns the trace. A batch size
/// of at least the dataset size means full-batch gradient descent.
pub fn local_update_traced(
    spec: &ModelSpec,
    w_t: &ParamVector,
    data: &ClientDataset,
    cfg: &LocalTrainConfig,
    rng: RngStream,
) -> Result<LocalTrace> {
    spec.check(w_t, data)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("client dataset is empty".into()));
    }
    let mut r = rng.rng();
    let mut w = w_t.as_slice().to_vec();
    let mut grad_sum = vec![0.0; w.len()];
    let mut losses = Vec::with_capacity(cfg.epochs);
    let full_batch = cfg.batch_size >= data.len();
    let mut batch: Vec<usize> = if full_batch {
        (0..data.len()).collect()
    } else {
        vec![0; cfg.batch_size]
    };
    for _ in 0..cfg.epochs {
        if !full_batch {
            for b in batch.iter_mut() {
                *b = r.random_range(0..data.len());
            }
        }
        let wv = ParamVector::new(w.clone()).map_err(|_| Error::NonFinite("local model"))?;
        let (loss, g) = loss_and_grad(spec, &wv, data, &batch)?;
        losses.push(loss);
        for ((wi, gs), gi) in w.iter_mut().zip(grad_sum.iter_mut()).zip(g.as_slice()) {
            *wi -= cfg.eta_local * gi;
            *gs += gi;
        }
    }
    let delta: Vec<f64> = w.iter().zip(w_t.as_slice()).map(|(a, b)| a - b).collect();
    Ok(LocalTrace {
        delta: ParamVector::new(delta).map_err(|_| Error::NonFinite("local update"))?,
        grad_sum: ParamVector::new(grad_sum).map_err(|_| Error::NonFinite("gradient sum"))?,
        losses,
    })
}

/// Local model update `w_{t,E} - w_t` after E mini-batch SGD steps.
pub fn local_update(
    spec: &ModelSpec,
    w_t: &ParamVector,
    data: &ClientDataset,
    cfg: &LocalTrainConfig,
    rng: RngStream,
) -> Result<ParamVector> {
    local_update_traced(spec, w_t, data, cfg, rng).map(|t| t.delta)
}

/// Top-1 accuracy (ties go to the lowest class id) and mean loss.
pub fn evaluate(spec: &ModelSpec, w: &ParamVector, test: &ClientDataset) -> Result<(f64, f64)> {
    spec.check(w, test)?;
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let wv = w.as_slice();
    let mut ws = Workspace::new(spec);
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        forward(spec, wv, test.row(i), &mut ws);
        let label = test.labels[i];
        loss += softmax_xent(&ws.logits, label, &mut ws.probs);
        let mut best = 0;
        for j in 1..spec.n_classes {
            if ws.logits[j] > ws.logits[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    let n = test.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("test loss"));
    }
    Ok((correct as f64 / n, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clustered, ClusteredParams};
    use crate::rng::Purpose;
    use crate::vector::axpy;

    fn toy() -> ClientDataset {
        let p = ClusteredParams {
            n_clients: 2,
            n_clusters: 1,
            labels_per_cluster: 3,
            n_classes: 3,
            n_features: 4,
            samples_per_client: 30,
            noise_scale: 0.3,
            test_size: 60,
        };
        generate_clustered(&p, 1).unwrap().clients.remove(0)
    }

    fn random_w(spec: &ModelSpec, seed: u64) -> ParamVector {
        let mut s = spec.clone();
        s.init_scale = 0.5;
        s.init_params(RngStream::server(seed, Purpose::ModelInit, 0))
    }

    #[test]
    fn zero_weights_give_log_c_loss() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let (loss, _) = full_loss_and_grad(&spec, &ParamVector::zeros(spec.dim()), &data).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let data = toy();
        for spec in [ModelSpec::softmax(4, 3), ModelSpec::mlp(4, 3, 5, 0.5)] {
            let w = random_w(&spec, 3);
            let idx: Vec<usize> = (0..10).collect();
            let dup: Vec<usize> = idx.iter().chain(idx.iter()).copied().collect();
            let (l1, g1) = loss_and_grad(&spec, &w, &data, &idx).unwrap();
            let (l2, g2) = loss_and_grad(&spec, &w, &data, &dup).unwrap();
            assert!((l1 - l2).abs() < 1e-12);
            for i in 0..g1.dim() {
                assert!((g1[i] - g2[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_zero_gives_zero_update() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let cfg = LocalTrainConfig { eta_local: 0.0, epochs: 3, batch_size: 4 };
        let d = local_update(&spec, &random_w(&spec, 1), &data, &cfg, RngStream::server(0, Purpose::LocalTrain, 0)).unwrap();
        assert!(d.is_zero());
    }

    #[test]
    fn single_full_batch_step_is_scaled_gradient() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let w = random_w(&spec, 2);
        let cfg = LocalTrainConfig { eta_local: 0.1, epochs: 1, batch_size: data.len() };
        let stream = RngStream::server(4, Purpose::LocalTrain, 0);
        let delta = local_update(&spec, &w, &data, &cfg, stream).unwrap();
        let (_, g) = full_loss_and_grad(&spec, &w, &data).unwrap();
        for i in 0..g.dim() {
            assert!((delta[i] + 0.1 * g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn local_update_is_pure() {
        let data = toy();
        let spec = ModelSpec::mlp(4, 3, 6, 0.3);
        let w = random_w(&spec, 5);
        let cfg = LocalTrainConfig { eta_local: 0.05, epochs: 4, batch_size: 8 };
        let s = RngStream::new(9, Purpose::LocalTrain, 2, 7);
        let a = local_update(&spec, &w, &data, &cfg, s).unwrap();
        let b = local_update(&spec, &w, &data, &cfg, s).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(w, random_w(&spec, 5));
    }

    #[test]
    fn evaluate_zero_weights_ties_to_class_zero() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let (acc, loss) = evaluate(&spec, &ParamVector::zeros(spec.dim()), &data).unwrap();
        let zeros = data.labels.iter().filter(|&&l| l == 0).count() as f64;
        assert_eq!(acc, zeros / data.len() as f64);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_order_invariant() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let w = random_w(&spec, 8);
        let rev: Vec<usize> = (0..data.len()).rev().collect();
        let (a1, l1) = evaluate(&spec, &w, &data).unwrap();
        let (a2, l2) = evaluate(&spec, &w, &data.subset(&rev)).unwrap();
        assert_eq!(a1, a2);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let spec = ModelSpec::softmax(4, 3);
        let empty = ClientDataset::new(4, 3, vec![], vec![], None).unwrap();
        assert!(evaluate(&spec, &ParamVector::zeros(spec.dim()), &empty).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        assert!(matches!(
            loss_and_grad(&spec, &ParamVector::zeros(3), &data, &[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy();
        let spec = ModelSpec::softmax(4, 3);
        let cfg = LocalTrainConfig { eta_local: f64::MAX, epochs: 20, batch_size: 4 };
        let w = random_w(&spec, 1);
        let err = local_update(&spec, &w, &data, &cfg, RngStream::server(0, Purpose::LocalTrain, 0)).unwrap_err();
        assert!(err.is_divergence(), "{err}");
    }

    #[test]
    fn fit_reaches_perfect_accuracy_on_separable_toy() {
        let p = ClusteredParams {
            n_clients: 1,
            n_clusters: 1,
            labels_per_cluster: 3,
            n_classes: 3,
            n_features: 6,
            samples_per_client: 60,
            noise_scale: 0.05,
            test_size: 60,
        };
        let data = generate_clustered(&p, 2).unwrap().clients.remove(0);
        let spec = ModelSpec::softmax(6, 3);
        let cfg = LocalTrainConfig { eta_local: 0.5, epochs: 400, batch_size: 60 };
        let w0 = ParamVector::zeros(spec.dim());
        let d = local_update(&spec, &w0, &data, &cfg, RngStream::server(1, Purpose::LocalTrain, 0)).unwrap();
        let w = axpy(1.0, &d, &w0).unwrap();
        assert_eq!(evaluate(&spec, &w, &data).unwrap().0, 1.0);
    }
}
