//! A deliberately tiny attention classifier, used to demonstrate the
//! regularizer end to end: synthetic class-conditional Gaussian sequences, a
//! stack of multi-head attention layers trained by full-batch gradient
//! descent with hand-written backprop, and an exact measurement of the
//! trained stack's local Lipschitz constant via chained dense Jacobians.
//!
//! Everything here is sequential and accumulation order is fixed, so a
//! training run is a pure function of its seeds — the determinism test
//! asserts bitwise equality of repeated runs.

use serde::{Deserialize, Serialize};

use crate::attention::{exact_attention_jacobian, AttentionHeadWeights, AttentionMap, InputSequence};
use crate::error::{Error, Result};
use crate::jasmin::{jasmin_loss, jasmin_map_gradient, HeadGradients, JasminConfig};
use crate::linalg::{spectral_norm, Matrix, PowerIterationConfig, SpectralResult};
use crate::rng::{gaussian_matrix, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub classes: usize,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::dim("ModelConfig", "layers, heads, head_dim must be positive".to_string()));
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(Error::dim(
                "ModelConfig",
                format!(
                    "model_dim {} must equal heads * head_dim = {}",
                    self.model_dim,
                    self.heads * self.head_dim
                ),
            ));
        }
        if self.classes < 2 {
            return Err(Error::dim("ModelConfig", format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Attention stack plus a mean-pool linear readout. Heads within a layer are
/// concatenated along the feature axis, so `heads * head_dim = model_dim`
/// keeps the token width constant through the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ModelConfig,
    heads: Vec<Vec<AttentionHeadWeights>>,
    readout_w: Matrix,
    readout_b: Vec<f64>,
}

impl ToyModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, 0);
        let scale = 1.0 / (cfg.model_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut layer = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                let w_q = gaussian_matrix(&mut rng, cfg.model_dim, cfg.head_dim).scale(scale);
                let w_k = gaussian_matrix(&mut rng, cfg.model_dim, cfg.head_dim).scale(scale);
                let w_v = gaussian_matrix(&mut rng, cfg.model_dim, cfg.head_dim).scale(scale);
                layer.push(AttentionHeadWeights::new(w_q, w_k, w_v)?);
            }
            heads.push(layer);
        }
        let readout_w = gaussian_matrix(&mut rng, cfg.model_dim, cfg.classes).scale(scale);
        Ok(ToyModel {
            cfg,
            heads,
            readout_w,
            readout_b: vec![0.0; cfg.classes],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn heads(&self) -> &[Vec<AttentionHeadWeights>] {
        &self.heads
    }

    /// Runs only the attention stack, returning the final token matrix.
    pub fn stack_output(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.1)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (_, tokens) = self.forward_cached(x)?;
        let pooled = mean_pool(&tokens);
        self.readout(&pooled)
    }

    pub fn predict(&self, x: &Matrix) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    fn readout(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.readout_b.clone();
        for c in 0..self.cfg.classes {
            let mut acc = 0.0;
            for (r, &p) in pooled.iter().enumerate() {
                acc += p * self.readout_w[(r, c)];
            }
            logits[c] += acc;
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "readout" });
        }
        Ok(logits)
    }

    fn forward_cached(&self, x: &Matrix) -> Result<(Vec<LayerCache>, Matrix)> {
        if x.cols() != self.cfg.model_dim {
            return Err(Error::dim(
                "ToyModel forward",
                format!("input has {} columns, model expects {}", x.cols(), self.cfg.model_dim),
            ));
        }
        let mut caches = Vec::with_capacity(self.cfg.layers);
        let mut current = x.clone();
        for layer in &self.heads {
            let mut head_caches = Vec::with_capacity(layer.len());
            let mut outputs = Vec::with_capacity(layer.len());
            for w in layer {
                let scale = 1.0 / (w.head_dim() as f64).sqrt();
                let q = current.matmul(w.w_q())?;
                let k = current.matmul(w.w_k())?;
                let v = current.matmul(w.w_v())?;
                let z = q.matmul(&k.transpose())?.scale(scale);
                let mut p = Matrix::zeros(z.rows(), z.cols());
                for i in 0..z.rows() {
                    let row = crate::softmax::softmax(z.row(i))?;
                    for (j, &pj) in row.probs().iter().enumerate() {
                        p.set(i, j, pj);
                    }
                }
                let map = AttentionMap::new(p.clone())?;
                outputs.push(p.matmul(&v)?);
                head_caches.push(HeadCache { q, k, v, map });
            }
            let next = hconcat(&outputs)?;
            caches.push(LayerCache {
                input: current,
                heads: head_caches,
            });
            current = next;
        }
        Ok((caches, current))
    }
}

struct HeadCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    map: AttentionMap,
}

struct LayerCache {
    input: Matrix,
    heads: Vec<HeadCache>,
}

fn mean_pool(tokens: &Matrix) -> Vec<f64> {
    let n = tokens.rows();
    let mut pooled = vec![0.0; tokens.cols()];
    for i in 0..n {
        for (j, &v) in tokens.row(i).iter().enumerate() {
            pooled[j] += v;
        }
    }
    for v in &mut pooled {
        *v /= n as f64;
    }
    pooled
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn hconcat(blocks: &[Matrix]) -> Result<Matrix> {
    let row: Vec<Matrix> = blocks.to_vec();
    Matrix::from_blocks(&[row])
}

fn col_block(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        for j in 0..width {
            out.set(i, j, m[(i, start + j)]);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub seq_len: usize,
    pub model_dim: usize,
    pub classes: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    /// Standard deviation of the per-token Gaussian noise.
    pub token_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_size: 64,
            test_size: 64,
            seq_len: 12,
            model_dim: 4,
            classes: 2,
            separation: 3.0,
            token_noise: 1.0,
        }
    }
}

/// Balanced class-conditional Gaussian sequences: every token of an example
/// is its class mean plus isotropic noise, labels assigned round-robin. With
/// `classes <= model_dim` the means sit on scaled coordinate axes, so the
/// separation is exact rather than left to chance.
pub fn generate_synthetic_dataset(cfg: &DatasetConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.classes < 2 || cfg.seq_len == 0 || cfg.model_dim == 0 {
        return Err(Error::dim("generate_synthetic_dataset", "degenerate dataset config".to_string()));
    }
    if cfg.train_size < cfg.classes || cfg.test_size < cfg.classes {
        return Err(Error::dim(
            "generate_synthetic_dataset",
            "each split needs at least one example per class".to_string(),
        ));
    }
    if !(cfg.separation.is_finite() && cfg.separation > 0.0) || !(cfg.token_noise.is_finite() && cfg.token_noise >= 0.0) {
        return Err(Error::domain("generate_synthetic_dataset", "separation must be positive and noise non-negative".to_string()));
    }
    let means = class_means(cfg, seed)?;
    let train = sample_split(cfg, &means, cfg.train_size, substream(seed, 1));
    let test = sample_split(cfg, &means, cfg.test_size, substream(seed, 2));
    Ok((train, test))
}

fn class_means(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut means = Vec::with_capacity(cfg.classes);
    if cfg.classes <= cfg.model_dim {
        for c in 0..cfg.classes {
            let mut m = vec![0.0; cfg.model_dim];
            m[c] = cfg.separation;
            means.push(m);
        }
    } else {
        let mut rng = substream(seed, 0);
        for _ in 0..cfg.classes {
            let u = crate::rng::unit_sphere_vector(&mut rng, cfg.model_dim);
            means.push(u.iter().map(|v| v * cfg.separation).collect());
        }
    }
    Ok(means)
}

fn sample_split(
    cfg: &DatasetConfig,
    means: &[Vec<f64>],
    size: usize,
    mut rng: rand_chacha::ChaCha8Rng,
) -> Dataset {
    let mut inputs = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let c = i % cfg.classes;
        let noise = gaussian_matrix(&mut rng, cfg.seq_len, cfg.model_dim);
        let mut x = Matrix::zeros(cfg.seq_len, cfg.model_dim);
        for r in 0..cfg.seq_len {
            for (j, &mu) in means[c].iter().enumerate() {
                x.set(r, j, mu + cfg.token_noise * noise[(r, j)]);
            }
        }
        inputs.push(x);
        labels.push(c);
    }
    Dataset { inputs, labels }
}

/// Accuracy of the nearest-class-mean classifier on pooled features: the
/// oracle that says whether the synthetic task is actually learnable.
pub fn nearest_mean_accuracy(train: &Dataset, test: &Dataset) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::dim("nearest_mean_accuracy", "empty split".to_string()));
    }
    let classes = 1 + train.labels.iter().chain(&test.labels).max().copied().unwrap_or(0);
    let dim = train.inputs[0].cols();
    let mut sums = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &c) in train.inputs.iter().zip(&train.labels) {
        for (j, v) in mean_pool(x).iter().enumerate() {
            sums[c][j] += v;
        }
        counts[c] += 1;
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::domain("nearest_mean_accuracy", format!("class {c} absent from the training split")));
        }
        for v in &mut sums[c] {
            *v /= *count as f64;
        }
    }
    let mut correct = 0usize;
    for (x, &label) in test.inputs.iter().zip(&test.labels) {
        let pooled = mean_pool(x);
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, mean) in sums.iter().enumerate() {
            let dist: f64 = pooled.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// `None` trains the plain task loss; `Some` adds the lambda-scaled
    /// penalty to every attention map in the stack.
    pub jasmin: Option<JasminConfig>,
    /// Trace (and probe, if enabled) every this many steps.
    pub trace_every: usize,
    /// Number of training inputs whose exact stack Lipschitz constant is
    /// measured at each trace point; 0 disables probing.
    pub probe_count: usize,
    pub power: PowerIterationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            learning_rate: 0.05,
            jasmin: None,
            trace_every: 25,
            probe_count: 0,
            power: PowerIterationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub task_loss: f64,
    /// Unscaled penalty value, averaged over the batch (absent when training
    /// without the regularizer).
    pub jasmin_loss: Option<f64>,
    pub train_accuracy: f64,
    pub g1_max: f64,
    pub g1_mean: f64,
    /// Mean measured stack Lipschitz constant over the probe inputs.
    pub measured_lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainTrace {
    pub fn final_record(&self) -> &TraceRecord {
        self.records.last().expect("trace always holds the final record")
    }
}

struct Gradients {
    heads: Vec<Vec<HeadGradients>>,
    readout_w: Matrix,
    readout_b: Vec<f64>,
}

struct BatchStats {
    task_loss: f64,
    jasmin_loss: Option<f64>,
    accuracy: f64,
    g1_max: f64,
    g1_mean: f64,
}

impl ToyModel {
    /// Full-batch loss gradients by reverse accumulation. The penalty enters
    /// as an extra `dP` term on every attention map before the softmax
    /// backward, which routes it through Q, K and the inputs of deeper
    /// layers exactly like the task loss.
    fn batch_gradients(&self, data: &Dataset, jasmin: Option<&JasminConfig>) -> Result<(Gradients, BatchStats)> {
        let b = data.len() as f64;
        let mut grads = Gradients {
            heads: self
                .heads
                .iter()
                .map(|layer| {
                    layer
                        .iter()
                        .map(|_| HeadGradients {
                            w_q: Matrix::zeros(self.cfg.model_dim, self.cfg.head_dim),
                            w_k: Matrix::zeros(self.cfg.model_dim, self.cfg.head_dim),
                            w_v: Matrix::zeros(self.cfg.model_dim, self.cfg.head_dim),
                        })
                        .collect()
                })
                .collect(),
            readout_w: Matrix::zeros(self.cfg.model_dim, self.cfg.classes),
            readout_b: vec![0.0; self.cfg.classes],
        };
        let mut task_sum = 0.0;
        let mut jasmin_sum = 0.0;
        let mut correct = 0usize;
        let mut g1_max = f64::NEG_INFINITY;
        let mut g1_sum = 0.0;
        let mut g1_count = 0usize;

        for (x, &label) in data.inputs.iter().zip(&data.labels) {
            if label >= self.cfg.classes {
                return Err(Error::dim("train", format!("label {label} out of range")));
            }
            let (caches, tokens) = self.forward_cached(x)?;
            for cache in &caches {
                for head in &cache.heads {
                    for i in 0..head.map.seq_len() {
                        let sorted = head.map.row_simplex(i).sorted_desc();
                        let x2 = if sorted.len() > 1 { sorted[1] } else { 0.0 };
                        let g1 = sorted[0] * (1.0 - sorted[0] + x2);
                        g1_max = g1_max.max(g1);
                        g1_sum += g1;
                        g1_count += 1;
                    }
                }
            }
            let n = tokens.rows();
            let pooled = mean_pool(&tokens);
            let logits = self.readout(&pooled)?;
            let probs = crate::softmax::softmax(&logits)?;
            let p_label = probs.probs()[label];
            task_sum += -(p_label.max(f64::MIN_POSITIVE)).ln();
            if argmax(&logits) == label {
                correct += 1;
            }
            if let Some(cfg) = jasmin {
                let maps: Vec<AttentionMap> = caches
                    .iter()
                    .flat_map(|c| c.heads.iter().map(|h| h.map.clone()))
                    .collect();
                jasmin_sum += jasmin_loss(&maps, cfg)?.loss;
            }

            // Readout backward: d(logits) = softmax(logits) - onehot(label).
            let mut dlogits = probs.probs().to_vec();
            dlogits[label] -= 1.0;
            let mut dpooled = vec![0.0; self.cfg.model_dim];
            for (c, &dl) in dlogits.iter().enumerate() {
                grads.readout_b[c] += dl;
                for (r, &p) in pooled.iter().enumerate() {
                    let v = grads.readout_w[(r, c)] + p * dl;
                    grads.readout_w.set(r, c, v);
                    dpooled[r] += self.readout_w[(r, c)] * dl;
                }
            }
            let mut dx = Matrix::zeros(n, self.cfg.model_dim);
            for i in 0..n {
                for (j, &dv) in dpooled.iter().enumerate() {
                    dx.set(i, j, dv / n as f64);
                }
            }

            for (layer_idx, cache) in caches.iter().enumerate().rev() {
                let mut dx_prev = Matrix::zeros(n, self.cfg.model_dim);
                for (head_idx, (w, hc)) in self.heads[layer_idx].iter().zip(&cache.heads).enumerate() {
                    let scale = 1.0 / (w.head_dim() as f64).sqrt();
                    let dout = col_block(&dx, head_idx * self.cfg.head_dim, self.cfg.head_dim);
                    let p = hc.map.matrix();
                    let mut dp = dout.matmul(&hc.v.transpose())?;
                    let dv = p.transpose().matmul(&dout)?;
                    if let Some(cfg) = jasmin {
                        if cfg.lambda != 0.0 {
                            let inject = jasmin_map_gradient(&hc.map, cfg)?.scale(cfg.lambda);
                            dp = dp.add(&inject)?;
                        }
                    }
                    // Softmax backward per row:
                    //   dz_i = p_i ⊙ (dp_i - <p_i, dp_i>).
                    let mut dz = Matrix::zeros(n, n);
                    for i in 0..n {
                        let pi = p.row(i);
                        let dpi = dp.row(i);
                        let dot: f64 = pi.iter().zip(dpi).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dz.set(i, j, pi[j] * (dpi[j] - dot));
                        }
                    }
                    let dq = dz.matmul(&hc.k)?.scale(scale);
                    let dk = dz.transpose().matmul(&hc.q)?.scale(scale);
                    let xt = cache.input.transpose();
                    let g = &mut grads.heads[layer_idx][head_idx];
                    g.w_q = g.w_q.add(&xt.matmul(&dq)?)?;
                    g.w_k = g.w_k.add(&xt.matmul(&dk)?)?;
                    g.w_v = g.w_v.add(&xt.matmul(&dv)?)?;
                    dx_prev = dx_prev.add(&dq.matmul(&w.w_q().transpose())?)?;
                    dx_prev = dx_prev.add(&dk.matmul(&w.w_k().transpose())?)?;
                    dx_prev = dx_prev.add(&dv.matmul(&w.w_v().transpose())?)?;
                }
                dx = dx_prev;
            }
        }

        let inv_b = 1.0 / b;
        for layer in &mut grads.heads {
            for g in layer {
                g.w_q = g.w_q.scale(inv_b);
                g.w_k = g.w_k.scale(inv_b);
                g.w_v = g.w_v.scale(inv_b);
            }
        }
        grads.readout_w = grads.readout_w.scale(inv_b);
        for v in &mut grads.readout_b {
            *v *= inv_b;
        }
        Ok((
            grads,
            BatchStats {
                task_loss: task_sum * inv_b,
                jasmin_loss: jasmin.map(|_| jasmin_sum * inv_b),
                accuracy: correct as f64 / b,
                g1_max,
                g1_mean: g1_sum / g1_count as f64,
            },
        ))
    }

    fn apply_update(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        let finite = |m: &Matrix| m.data().iter().all(|v| v.is_finite());
        for (layer, glayer) in self.heads.iter_mut().zip(&grads.heads) {
            for (w, g) in layer.iter_mut().zip(glayer) {
                let w_q = w.w_q().sub(&g.w_q.scale(lr))?;
                let w_k = w.w_k().sub(&g.w_k.scale(lr))?;
                let w_v = w.w_v().sub(&g.w_v.scale(lr))?;
                if !(finite(&w_q) && finite(&w_k) && finite(&w_v)) {
                    return Err(Error::NonFinite { op: "parameter update" });
                }
                *w = AttentionHeadWeights::new(w_q, w_k, w_v)?;
            }
        }
        self.readout_w = self.readout_w.sub(&grads.readout_w.scale(lr))?;
        for (v, g) in self.readout_b.iter_mut().zip(&grads.readout_b) {
            *v -= lr * g;
        }
        if !finite(&self.readout_w) || self.readout_b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "parameter update" });
        }
        Ok(())
    }
}

/// Exact local Lipschitz constant of the attention stack (readout excluded)
/// at `x`: the per-layer dense Jacobians are assembled from the per-head
/// exact Jacobians by row interleaving, chained, and the spectral norm of
/// the product taken.
pub fn measure_model_lipschitz(model: &ToyModel, x: &Matrix, power: &PowerIterationConfig) -> Result<SpectralResult> {
    let (caches, _) = model.forward_cached(x)?;
    let n = x.rows();
    let dd = model.cfg.model_dim;
    let hd = model.cfg.head_dim;
    let mut product: Option<Matrix> = None;
    for (layer_idx, cache) in caches.iter().enumerate() {
        let input = InputSequence::new(cache.input.clone())?;
        let mut layer_jac = Matrix::zeros(n * dd, n * dd);
        for (head_idx, w) in model.heads[layer_idx].iter().enumerate() {
            let jh = exact_attention_jacobian(&input, w)?;
            for i in 0..n {
                for r in 0..hd {
                    let dst = i * dd + head_idx * hd + r;
                    let src = i * hd + r;
                    for c in 0..n * dd {
                        layer_jac.set(dst, c, jh[(src, c)]);
                    }
                }
            }
        }
        product = Some(match product {
            None => layer_jac,
            Some(total) => layer_jac.matmul(&total)?,
        });
    }
    spectral_norm(&product.expect("at least one layer"), power)
}

pub fn train(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::dim("train", "empty dataset".to_string()));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::domain("train", format!("learning rate {} must be positive", cfg.learning_rate)));
    }
    if cfg.trace_every == 0 {
        return Err(Error::domain("train", "trace_every must be at least 1".to_string()));
    }
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let (grads, stats) = match model.batch_gradients(data, cfg.jasmin.as_ref()) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                return Err(Error::Divergence {
                    step,
                    details: format!("non-finite values in {op}"),
                })
            }
            Err(e) => return Err(e),
        };
        if !stats.task_loss.is_finite() || stats.jasmin_loss.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                details: "loss became non-finite".to_string(),
            });
        }
        if step % cfg.trace_every == 0 {
            records.push(trace_record(model, step, &stats, data, cfg)?);
        }
        match model.apply_update(&grads, cfg.learning_rate) {
            Ok(()) => {}
            Err(Error::NonFinite { op }) => {
                return Err(Error::Divergence {
                    step,
                    details: format!("non-finite values in {op}"),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let (_, stats) = model.batch_gradients(data, cfg.jasmin.as_ref())?;
    records.push(trace_record(model, cfg.steps, &stats, data, cfg)?);
    Ok(TrainTrace { records })
}

fn trace_record(
    model: &ToyModel,
    step: usize,
    stats: &BatchStats,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TraceRecord> {
    let measured = if cfg.probe_count > 0 {
        let count = cfg.probe_count.min(data.len());
        let mut sum = 0.0;
        for x in data.inputs.iter().take(count) {
            sum += measure_model_lipschitz(model, x, &cfg.power)?.value;
        }
        Some(sum / count as f64)
    } else {
        None
    };
    Ok(TraceRecord {
        step,
        task_loss: stats.task_loss,
        jasmin_loss: stats.jasmin_loss,
        train_accuracy: stats.accuracy,
        g1_max: stats.g1_max,
        g1_mean: stats.g1_mean,
        measured_lipschitz: measured,
    })
}
