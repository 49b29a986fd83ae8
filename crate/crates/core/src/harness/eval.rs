use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::model::MpanModel;
use crate::episodes::{aggregate, embed_samples, evaluate_episodes, Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::ndgrad::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub std: f64,
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
    /// Hash of the training config the evaluated weights came from.
    pub config_hash: String,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub accuracies: Vec<f64>,
}

/// Worker count from `MPAN_THREADS`; unset or `0` uses every core.
pub fn eval_threads() -> Result<usize> {
    let auto = || std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MPAN_THREADS") {
        Err(_) => Ok(auto()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(auto()),
            Ok(n) => Ok(n),
            Err(_) => Err(Error::Config(format!("MPAN_THREADS must be a non-negative integer, got `{v}`"))),
        },
    }
}

/// Few-shot accuracy of `backbone` on novel-class episodes.
pub fn evaluate_backbone<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    backbone: &Backbone<T>,
    episodes: usize,
    threads: usize,
    config_hash: u64,
) -> Result<EvalReport> {
    let novel = &dataset.split()?.novel;
    let ids = dataset.ids_in(novel);
    let table = embed_samples(dataset, &ids, &backbone.frozen(), 128)?;
    let e = config.eval;
    let spec = EpisodeSpec { n_way: e.n_way, k_shot: e.k_shot, t_query: e.t_query };
    let accuracies = evaluate_episodes(dataset, novel, &table, spec, episodes, config.seeds.episode, &config.finetune, threads)?;
    let summary = aggregate(&accuracies)?;
    Ok(EvalReport {
        mean_accuracy: summary.mean,
        ci95_halfwidth: summary.ci95_halfwidth,
        std: summary.std,
        episodes,
        n_way: e.n_way,
        k_shot: e.k_shot,
        t_query: e.t_query,
        config_hash: format!("{config_hash:016x}"),
        finetune_steps: config.finetune.steps,
        finetune_lr: config.finetune.lr,
        accuracies,
    })
}

/// Stage 2: restores the checkpoint into a model shaped by `config` and
/// scores `episodes` novel-class episodes (the config's count if `None`).
pub fn eval_stage2(checkpoint: &Checkpoint, config: &TrainConfig, dataset: &Dataset, episodes: Option<usize>) -> Result<EvalReport> {
    config.validate()?;
    let base = dataset.split()?.base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = MpanModel::<f32>::new(config, dataset.channels, dataset.image_size, base, &mut rng)?;
    checkpoint.restore(&model, None)?;
    let episodes = episodes.unwrap_or(config.eval.episodes);
    evaluate_backbone(config, dataset, &model.backbone, episodes, eval_threads()?, checkpoint.config_hash)
}
