use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{sample_episode_from, Dataset, Episode};
use crate::error::{Error, Result};
use crate::model::{Backbone, CosineClassifier};
use crate::ndgrad::{Scalar, Sgd, Tensor};
use crate::sampling::derive_seed;

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInit {
    /// Class weights start at the support-set mean embedding of each class.
    Prototype,
    /// Uniform in `±1`.
    Random,
}

/// Stage-2 classifier fitting on a frozen embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub init: ClassifierInit,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { steps: 100, lr: 0.01, momentum: 0.9, weight_decay: 5e-4, gamma: 10.0, init: ClassifierInit::Prototype }
    }
}

/// Fixed embeddings for a set of sample ids.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    pub dim: usize,
    index: HashMap<usize, usize>,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn from_rows(ids: &[usize], dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Dimension(format!("{} values for {} rows of width {dim}", data.len(), ids.len())));
        }
        Ok(Self { dim, index: ids.iter().enumerate().map(|(r, &id)| (id, r)).collect(), data })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn row(&self, id: usize) -> Result<&[f64]> {
        let r = *self.index.get(&id).ok_or_else(|| Error::Index(format!("sample {id} has no embedding")))?;
        Ok(&self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn matrix(&self, ids: &[usize]) -> Result<Tensor<f64>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.row(id)?);
        }
        Tensor::new(&[ids.len(), self.dim], data)
    }
}

/// Embeds `ids` through a frozen copy of `backbone`, `chunk` images at a
/// time.
pub fn embed_samples<T: Scalar>(dataset: &Dataset, ids: &[usize], backbone: &Backbone<T>, chunk: usize) -> Result<EmbeddingTable> {
    let frozen = backbone.frozen();
    let dim = frozen.embedding_dim();
    let mut data = Vec::with_capacity(ids.len() * dim);
    for part in ids.chunks(chunk.max(1)) {
        data.extend(frozen.extract_features(&dataset.batch::<T>(part)?)?.to_f64_vec());
    }
    EmbeddingTable::from_rows(ids, dim, data)
}

/// Fits a fresh N-way cosine classifier on the support embeddings and
/// returns its query accuracy.
pub fn score_episode(table: &EmbeddingTable, episode: &Episode, config: &FineTuneConfig, rng: &mut impl Rng) -> Result<f64> {
    let n = episode.n_way();
    let support = table.matrix(&episode.support)?;
    let query = table.matrix(&episode.query)?;
    if episode.query.is_empty() {
        return Err(Error::Contract("episode without queries".into()));
    }
    let d = table.dim;
    let weight = match config.init {
        ClassifierInit::Prototype => {
            let s = support.to_vec();
            let mut w = vec![0.0; n * d];
            let mut counts = vec![0usize; n];
            for (row, &l) in s.chunks(d).zip(&episode.support_labels) {
                counts[l] += 1;
                w[l * d..(l + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            for (c, &cnt) in counts.iter().enumerate() {
                w[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= cnt.max(1) as f64);
            }
            w
        }
        ClassifierInit::Random => (0..n * d).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
    };
    let clf = CosineClassifier::from_parts(Tensor::param(&[n, d], weight)?, Tensor::param(&[], vec![config.gamma])?)?;
    let mut opt = Sgd::new(config.lr, config.momentum, config.weight_decay);
    opt.register("weight", &clf.weight);
    opt.register("gamma", &clf.gamma);
    for _ in 0..config.steps {
        clf.logits(&support)?.softmax_cross_entropy(&episode.support_labels)?.backward()?;
        opt.step();
    }
    let logits = clf.logits(&query)?.to_vec();
    let correct = logits
        .chunks(n)
        .zip(&episode.query_labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for c in 1..n {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Freezes the backbone, embeds the episode's images, and scores it.
pub fn fine_tune_and_score<T: Scalar>(
    dataset: &Dataset,
    episode: &Episode,
    backbone: &Backbone<T>,
    config: &FineTuneConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let ids: Vec<usize> = episode.support.iter().chain(&episode.query).copied().collect();
    let table = embed_samples(dataset, &ids, backbone, 64)?;
    score_episode(&table, episode, config, rng)
}

/// Shape of the evaluated episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
}

/// Per-episode accuracies, indexed by episode. Episode `e` draws from its
/// own stream derived from `seed`, so the result does not depend on
/// `threads`.
pub fn evaluate_episodes(
    dataset: &Dataset,
    classes: &[usize],
    table: &EmbeddingTable,
    spec: EpisodeSpec,
    episodes: usize,
    seed: u64,
    config: &FineTuneConfig,
    threads: usize,
) -> Result<Vec<f64>> {
    let by_class = dataset.ids_by_class();
    let run = |e: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, e as u64));
        let ep = sample_episode_from(dataset, classes, &by_class, spec.n_way, spec.k_shot, spec.t_query, &mut rng)?;
        score_episode(table, &ep, config, &mut rng)
    };
    let threads = threads.clamp(1, episodes.max(1));
    if threads == 1 {
        return (0..episodes).map(run).collect();
    }
    let results: Vec<Result<Vec<(usize, f64)>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let run = &run;
                scope.spawn(move || (w..episodes).step_by(threads).map(|e| run(e).map(|a| (e, a))).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut acc = vec![0.0; episodes];
    for part in results {
        for (e, a) in part? {
            acc[e] = a;
        }
    }
    Ok(acc)
}

/// Mean accuracy with a 95% normal-approximation interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub ci95_halfwidth: f64,
    pub episodes: usize,
}

impl AccuracySummary {
    pub fn contains(&self, value: f64) -> bool {
        (value - self.mean).abs() <= self.ci95_halfwidth
    }
}

/// `mean ± 1.96·s/√E`.
pub fn aggregate(accuracies: &[f64]) -> Result<AccuracySummary> {
    let e = accuracies.len();
    if e < 2 {
        return Err(Error::Contract(format!("confidence interval needs at least 2 episodes, got {e}")));
    }
    let mean = accuracies.iter().sum::<f64>() / e as f64;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
    let std = var.sqrt();
    Ok(AccuracySummary { mean, std, ci95_halfwidth: Z95 * std / (e as f64).sqrt(), episodes: e })
}
