use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::episodes::Dataset;
use crate::error::Result;
use crate::gclust::{
    assign_pseudo_labels, build_adjacency, gc_forward, gc_update, kmeans_baseline, FeaturePool, GcHead, GcUpdateConfig,
};
use crate::model::Backbone;
use crate::ndgrad::Tensor;
use crate::sampling::derive_seed;

/// Off-diagonal statistics of the cosine adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyStats {
    pub nodes: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub symmetric: bool,
    pub unit_diagonal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub adjacency: AdjacencyStats,
    pub gc_histogram: Vec<usize>,
    pub gc_final_loss: Option<f64>,
    pub gc_purity: f64,
    pub kmeans_histogram: Vec<usize>,
    /// Inertia after each assignment step.
    pub kmeans_inertia: Vec<f64>,
    pub kmeans_purity: f64,
}

/// Share of points whose cluster's majority class matches their own.
pub fn purity(assignment: &[usize], truth: &[usize], k: usize) -> f64 {
    let classes = truth.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; k];
    for (&a, &t) in assignment.iter().zip(truth) {
        counts[a][t] += 1;
    }
    let hits: usize = counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    hits as f64 / assignment.len().max(1) as f64
}

/// Embeds the base pool with `backbone`, runs one pseudo-label refresh and
/// k-means on the same features, and summarizes both.
pub fn cluster_demo(config: &TrainConfig, dataset: &Dataset, backbone: &Backbone<f32>) -> Result<ClusterReport> {
    let split = dataset.split()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.model, 3));
    let mut ids = dataset.ids_in(&split.base);
    if let Some(cap) = config.gc.pool_cap {
        ids = crate::episodes::UnlabeledPool::from_base(dataset, Some(cap), &mut rng)?.ids;
    }
    let frozen = backbone.frozen();
    let mut rows = Vec::new();
    for chunk in ids.chunks(128) {
        rows.extend(frozen.extract_features(&dataset.batch::<f32>(chunk)?)?.to_vec());
    }
    let pool = FeaturePool::new(Tensor::new(&[ids.len(), frozen.embedding_dim()], rows)?, ids.clone())?;
    let adjacency = build_adjacency(&pool)?;
    let n = pool.len();
    let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    let (mut symmetric, mut unit_diagonal) = (true, true);
    for i in 0..n {
        unit_diagonal &= adjacency.get(i, i) == 1.0;
        for j in 0..n {
            let v = adjacency.get(i, j) as f64;
            symmetric &= adjacency.get(i, j) == adjacency.get(j, i);
            if i != j {
                sum += v;
                min = min.min(v);
                max = max.max(v);
            }
        }
    }
    let pairs = (n * n.saturating_sub(1)).max(1) as f64;
    let gc = &config.gc;
    let head = GcHead::new(pool.dim(), gc.hidden, gc.k, gc.propagation, &mut rng)?;
    let initial = assign_pseudo_labels(&gc_forward(&pool.features, &adjacency, &head)?, &ids, 0)?;
    let cfg = GcUpdateConfig {
        steps: gc.steps,
        lr: gc.lr,
        momentum: gc.momentum,
        lambda_bal: gc.lambda_bal,
        balance_temperature: gc.balance_temperature,
        clip_norm: gc.clip_norm,
    };
    let refreshed = gc_update(&pool, &adjacency, &head, &initial, &cfg, 1)?;
    let km = kmeans_baseline(&pool, gc.k, 100, &mut rng)?;
    let truth: Vec<usize> = ids.iter().map(|&i| dataset.labels[i]).collect();
    Ok(ClusterReport {
        k: gc.k,
        adjacency: AdjacencyStats { nodes: n, mean: sum / pairs, min, max, symmetric, unit_diagonal },
        gc_histogram: refreshed.labels.histogram(),
        gc_final_loss: refreshed.final_loss,
        gc_purity: purity(&refreshed.labels.labels, &truth, gc.k),
        kmeans_histogram: km.labels.histogram(),
        kmeans_inertia: km.inertia,
        kmeans_purity: purity(&km.labels.labels, &truth, gc.k),
    })
}
