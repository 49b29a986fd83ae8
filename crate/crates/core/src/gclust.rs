//! Graph-driven clustering: a cosine-similarity graph over a feature pool,
//! one graph convolution plus three fully connected layers producing
//! cluster scores, and the pseudo-labels that supervise the clustering
//! pretext head. A k-means baseline is provided for comparison.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, LinearHead};
use crate::ndgrad::{Scalar, Sgd, Tensor};

/// Embeddings of the unlabeled pool, one row per sample id.
#[derive(Debug, Clone)]
pub struct FeaturePool<T: Scalar = f32> {
    /// `[N_v × d]`, constant.
    pub features: Tensor<T>,
    pub ids: Vec<usize>,
}

impl<T: Scalar> FeaturePool<T> {
    pub fn new(features: Tensor<T>, ids: Vec<usize>) -> Result<Self> {
        let [n, _] = *features.shape() else {
            return Err(Error::Dimension(format!("pool features must be a matrix, got {:?}", features.shape())));
        };
        if ids.len() != n {
            return Err(Error::Dimension(format!("{n} pool rows but {} ids", ids.len())));
        }
        Ok(Self { features: features.detach(), ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Pairwise cosine similarities. Symmetric and unit-diagonal (for nonzero
/// rows) exactly, by construction.
#[derive(Debug, Clone)]
pub struct AdjacencyMatrix<T: Scalar = f32> {
    pub n: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> AdjacencyMatrix<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![T::zero(); n * n];
        (0..n).for_each(|i| values[i * n + i] = T::one());
        Self { n, values }
    }

    pub fn to_tensor(&self) -> Result<Tensor<T>> {
        Tensor::new(&[self.n, self.n], self.values.clone())
    }

    /// Number of undirected edges, `N(N−1)/2`.
    pub fn edge_count(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }
}

/// Cosine similarity of every pair of pool rows. Zero rows get similarity 0
/// to everything, including themselves.
pub fn build_adjacency<T: Scalar>(pool: &FeaturePool<T>) -> Result<AdjacencyMatrix<T>> {
    if pool.is_empty() {
        return Err(Error::Contract("adjacency of an empty pool".into()));
    }
    let n = pool.len();
    let unit = pool.features.normalize_rows()?.to_vec();
    let d = pool.dim();
    let nonzero: Vec<bool> = unit.chunks(d).map(|r| r.iter().any(|v| *v != T::zero())).collect();
    let mut values = vec![T::zero(); n * n];
    for i in 0..n {
        if nonzero[i] {
            values[i * n + i] = T::one();
        }
        for j in i + 1..n {
            let dot: T = unit[i * d..(i + 1) * d].iter().zip(&unit[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum();
            let c = dot.max(-T::one()).min(T::one());
            values[i * n + j] = c;
            values[j * n + i] = c;
        }
    }
    Ok(AdjacencyMatrix { n, values })
}

/// How the graph operator is applied before the learnable projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// `A·X`.
    Raw,
    /// `A·X / N_v`: a constant rescaling (equivalent to rescaling `W`) that
    /// keeps activations independent of pool size.
    Mean,
    /// `(A·X − μ) / s` with the column means `μ` and the RMS `s` of the
    /// centered entries held constant. The shift folds into `b` and the
    /// scale into `W`, so the model class is unchanged; activations become
    /// unit-scale and free of the component shared by every pool row.
    Standardized,
}

/// Graph convolution `A·X·W + b` followed by `fc₃(relu(fc₂(relu(fc₁(·)))))`.
#[derive(Debug, Clone)]
pub struct GcHead<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub fc: Vec<LinearHead<T>>,
    pub propagation: Propagation,
}

impl<T: Scalar> GcHead<T> {
    /// `W` (`d×d`) is drawn from the fan-in uniform (He/Kaiming) range
    /// `±√(6/d)`; the FC stack has widths `hidden[0], hidden[1], k`.
    pub fn new(dim: usize, hidden: [usize; 2], k: usize, propagation: Propagation, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || k == 0 || hidden.contains(&0) {
            return Err(Error::Config(format!("GC head dims d={dim} hidden={hidden:?} k={k}")));
        }
        let bound = (6.0 / dim as f64).sqrt();
        let weight = Tensor::param(&[dim, dim], (0..dim * dim).map(|_| T::of(rng.gen_range(-bound..=bound))).collect())?;
        let bias = Tensor::param(&[dim], vec![T::zero(); dim])?;
        let fc = vec![
            LinearHead::new(dim, hidden[0], rng)?,
            LinearHead::new(hidden[0], hidden[1], rng)?,
            LinearHead::new(hidden[1], k, rng)?,
        ];
        Ok(Self { weight, bias, fc, propagation })
    }

    pub fn k(&self) -> usize {
        self.fc.last().map(LinearHead::output_dim).unwrap_or(0)
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        let mut p = vec![self.weight.clone(), self.bias.clone()];
        for l in &self.fc {
            p.push(l.weight.clone());
            p.push(l.bias.clone());
        }
        p
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut p = vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ];
        for (i, l) in self.fc.iter().enumerate() {
            p.extend(l.named_parameters(&format!("{prefix}.fc{}", i + 1)));
        }
        p
    }
}

/// Cluster scores `[N_v × k]` for every pool sample. The adjacency is a
/// constant; gradients reach `W`, `b`, the FC layers and the pool features.
pub fn gc_forward<T: Scalar>(features: &Tensor<T>, adjacency: &AdjacencyMatrix<T>, head: &GcHead<T>) -> Result<Tensor<T>> {
    let [n, d] = *features.shape() else {
        return Err(Error::Dimension(format!("pool features must be a matrix, got {:?}", features.shape())));
    };
    if adjacency.n != n || head.weight.shape()[0] != d {
        return Err(Error::Dimension(format!(
            "GC forward: {n}×{d} pool, {}-node adjacency, {:?} projection",
            adjacency.n,
            head.weight.shape()
        )));
    }
    let mut ax = adjacency.to_tensor()?.matmul(features)?;
    match head.propagation {
        Propagation::Raw => {}
        Propagation::Mean => ax = ax.scale(T::one() / T::of(n as f64)),
        Propagation::Standardized => {
            let (shift, scale) = {
                let v = ax.data();
                let mut mu = vec![0.0; d];
                v.chunks(d).for_each(|r| mu.iter_mut().zip(r).for_each(|(m, x)| *m += x.as_f64() / n as f64));
                let ms = v.chunks(d).flat_map(|r| r.iter().zip(&mu).map(|(x, m)| (x.as_f64() - m).powi(2))).sum::<f64>()
                    / (n * d) as f64;
                let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
                (mu.iter().map(|m| T::of(-m)).collect::<Vec<_>>(), scale)
            };
            ax = ax.add_row_bias(&Tensor::new(&[d], shift)?)?.scale(T::of(scale));
        }
    }
    let mut h = ax.matmul(&head.weight)?.add_row_bias(&head.bias)?;
    for (i, layer) in head.fc.iter().enumerate() {
        if i > 0 {
            h = h.relu();
        }
        h = layer.forward(&h)?;
    }
    Ok(h)
}

/// Cluster ids for a feature pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub k: usize,
    /// Epoch of the last refresh.
    pub epoch: usize,
}

impl PseudoLabels {
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.k];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }

    /// Label lookup by sample id.
    pub fn lookup(&self) -> HashMap<usize, usize> {
        self.ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }

    /// Labels for the given sample ids, failing on ids outside the pool.
    pub fn labels_for(&self, ids: &[usize]) -> Result<Vec<usize>> {
        let map = self.lookup();
        ids.iter().map(|id| map.get(id).copied().ok_or(Error::Staleness(*id))).collect()
    }
}

/// Row-wise argmax; ties go to the lowest cluster index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, k] = *scores.shape() else {
        return Err(Error::Dimension(format!("scores must be a matrix, got {:?}", scores.shape())));
    };
    Ok(scores
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

pub fn assign_pseudo_labels<T: Scalar>(scores: &Tensor<T>, ids: &[usize], epoch: usize) -> Result<PseudoLabels> {
    let labels = argmax_rows(scores)?;
    if labels.len() != ids.len() {
        return Err(Error::Dimension(format!("{} score rows for {} ids", labels.len(), ids.len())));
    }
    Ok(PseudoLabels {
        labels,
        ids: ids.to_vec(),
        k: scores.shape()[1],
        epoch,
    })
}

pub fn clustering_loss_from_features<T: Scalar>(
    features: &Tensor<T>,
    ids: &[usize],
    pseudo: &PseudoLabels,
    head: &LinearHead<T>,
) -> Result<Tensor<T>> {
    let targets = pseudo.labels_for(ids)?;
    head.forward(features)?.softmax_cross_entropy(&targets)
}

/// Cross-entropy of the k-way clustering head against each image's
/// pseudo-label.
pub fn clustering_loss<T: Scalar>(
    images: &Tensor<T>,
    ids: &[usize],
    pseudo: &PseudoLabels,
    backbone: &Backbone<T>,
    head: &LinearHead<T>,
) -> Result<Tensor<T>> {
    // check ids before paying for the forward pass
    pseudo.labels_for(ids)?;
    clustering_loss_from_features(&backbone.extract_features(images)?, ids, pseudo, head)
}

/// Self-training settings for the GC head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcUpdateConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Weight of `KL(mean assignment ‖ uniform)`.
    pub lambda_bal: f64,
    /// Softmax temperature of the assignments entering the balance term.
    /// Below 1 the penalty tracks the hard assignment histogram.
    pub balance_temperature: f64,
    /// Joint gradient-norm cap per step.
    pub clip_norm: Option<f64>,
}

impl Default for GcUpdateConfig {
    fn default() -> Self {
        Self { steps: 50, lr: 0.05, momentum: 0.9, lambda_bal: 10.0, balance_temperature: 0.1, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct GcUpdateOutcome {
    pub labels: PseudoLabels,
    /// Objective after the last step, if any step ran.
    pub final_loss: Option<f64>,
    /// The refresh was abandoned on a non-finite loss; `labels` are the
    /// previous ones.
    pub aborted: bool,
}

/// `KL(mean softmax assignment ‖ uniform)`.
pub fn balance_penalty<T: Scalar>(scores: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let k = scores.shape()[1];
    let mean = scores.scale(T::of(1.0 / temperature)).softmax_rows()?.mean_rows()?;
    let log_ratio = mean.add_const(T::of(1e-12)).log()?.add_const(T::of((k as f64).ln()));
    Ok(mean.mul(&log_ratio)?.sum())
}

/// Alternating self-training: freeze the current argmax labels, take
/// `steps` SGD steps on cross-entropy to them plus the balance penalty,
/// then reassign. `previous` is returned unchanged when `steps == 0` or the
/// objective goes non-finite.
pub fn gc_update<T: Scalar>(
    pool: &FeaturePool<T>,
    adjacency: &AdjacencyMatrix<T>,
    head: &GcHead<T>,
    previous: &PseudoLabels,
    config: &GcUpdateConfig,
    epoch: usize,
) -> Result<GcUpdateOutcome> {
    if config.steps == 0 {
        return Ok(GcUpdateOutcome { labels: previous.clone(), final_loss: None, aborted: false });
    }
    let frozen = argmax_rows(&gc_forward(&pool.features, adjacency, head)?)?;
    let mut opt = Sgd::new(T::of(config.lr), T::of(config.momentum), T::zero());
    for (i, p) in head.parameters().iter().enumerate() {
        opt.register(format!("gc.{i}"), p);
    }
    let mut last = None;
    for _ in 0..config.steps {
        let scores = gc_forward(&pool.features, adjacency, head)?;
        let mut loss = scores.softmax_cross_entropy(&frozen)?;
        if config.lambda_bal > 0.0 {
            loss = loss.add(&balance_penalty(&scores, config.balance_temperature)?.scale(T::of(config.lambda_bal)))?;
        }
        let value = loss.item().as_f64();
        if !value.is_finite() {
            opt.zero_grad();
            return Ok(GcUpdateOutcome { labels: previous.clone(), final_loss: Some(value), aborted: true });
        }
        loss.backward()?;
        if let Some(c) = config.clip_norm {
            opt.clip_grad_norm(T::of(c));
        }
        opt.step();
        last = Some(value);
    }
    let labels = assign_pseudo_labels(&gc_forward(&pool.features, adjacency, head)?, &pool.ids, epoch)?;
    Ok(GcUpdateOutcome { labels, final_loss: last, aborted: false })
}

/// Lloyd's algorithm result.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: PseudoLabels,
    /// `k × d`, row-major.
    pub centroids: Vec<f64>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding. A cluster left empty takes the
/// point farthest from its own centroid. Stops when assignments repeat or
/// after `max_iters` assignment steps.
pub fn kmeans_baseline<T: Scalar>(pool: &FeaturePool<T>, k: usize, max_iters: usize, rng: &mut impl Rng) -> Result<KMeansResult> {
    let n = pool.len();
    if k == 0 || n < k {
        return Err(Error::Capacity(format!("k-means with k={k} over {n} points")));
    }
    let d = pool.dim();
    let x = pool.features.to_f64_vec();
    let point = |i: usize| &x[i * d..(i + 1) * d];

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    let mut picked = vec![first];
    while picked.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all remaining points coincide with a centroid
            let free: Vec<usize> = (0..n).filter(|i| !picked.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        picked.push(next);
        centroids.extend_from_slice(point(next));
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(point(i), point(next)));
        }
    }

    let mut assign: Vec<usize> = vec![usize::MAX; n];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dist = sq_dist(point(i), &centroids[c * d..(c + 1) * d]);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            changed |= assign[i] != best;
            assign[i] = best;
            total += best_d;
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            sums[assign[i] * d..(assign[i] + 1) * d].iter_mut().zip(point(i)).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(point(a), &centroids[assign[a] * d..(assign[a] + 1) * d]);
                    let db = sq_dist(point(b), &centroids[assign[b] * d..(assign[b] + 1) * d]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n ≥ k leaves a donor cluster");
            counts[assign[far]] -= 1;
            counts[c] = 1;
            assign[far] = c;
            centroids[c * d..(c + 1) * d].copy_from_slice(point(far));
        }
    }
    Ok(KMeansResult {
        labels: PseudoLabels { labels: assign, ids: pool.ids.clone(), k, epoch: 0 },
        centroids,
        inertia,
        iterations,
    })
}
