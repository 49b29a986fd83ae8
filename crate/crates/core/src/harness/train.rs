use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{DataSource, TrainConfig};
use super::metrics::{Anomalies, MetricsRecord, MetricsWriter};
use super::model::MpanModel;
use crate::attention::{total_loss, LossComponents};
use crate::episodes::{generate_synthetic, split_classes, Dataset, UnlabeledPool};
use crate::error::{Error, Result};
use crate::gclust::{
    assign_pseudo_labels, build_adjacency, clustering_loss_from_features, gc_forward, gc_update, FeaturePool,
    GcUpdateConfig, PseudoLabels,
};
use crate::ndgrad::{take_zero_norm_events, Sgd, Tensor};
use crate::pretext::{
    color_jitter, embed_patches, extract_patches, jigsaw_loss_from_embeddings, location_loss_from_embeddings,
    generate_permutation_set, patch_branch_loss_from_embeddings, rotation_loss, sample_permutation_choices,
    PermutationSet, RotationTask, LOCATIONS, ROTATIONS,
};
use crate::sampling::derive_seed;

/// Images embedded per forward pass when building the feature pool.
const POOL_CHUNK: usize = 128;

/// Builds (or reads) the dataset named by the config and applies the split.
pub fn prepare_dataset(config: &TrainConfig) -> Result<Dataset> {
    let raw = match &config.data.source {
        DataSource::Synthetic { num_classes, per_class, image_size } => {
            generate_synthetic(*num_classes, *per_class, *image_size, config.seeds.data)?
        }
        DataSource::Directory(dir) => Dataset::load(dir)?,
    };
    split_classes(&raw, config.data.base_frac, config.data.val_frac, config.seeds.data)
}

/// Result of a stage-1 run.
pub struct TrainOutcome {
    pub model: MpanModel<f32>,
    pub optimizer: Sgd<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoint: Checkpoint,
    pub pseudo_labels: Option<PseudoLabels>,
}

/// Where stage-1 outputs go.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    /// Receives `metrics.jsonl`, `checkpoint.mpan`, `config.json`, and on
    /// abort `emergency.mpan`.
    pub dir: Option<PathBuf>,
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub dataset: &'a Dataset,
    pub model: MpanModel<f32>,
    pub permset: Option<PermutationSet>,
    pub base_ids: Vec<usize>,
    /// Dataset class → base-local label.
    label_map: Vec<usize>,
    pub pool: UnlabeledPool,
    pub pseudo: Option<PseudoLabels>,
    rng: ChaCha8Rng,
    gc_aborted: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let split = dataset.split()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.model, 0));
        let model = MpanModel::new(config, dataset.channels, dataset.image_size, split.base.len(), &mut init_rng)?;
        let permset = if config.branches.jig {
            Some(generate_permutation_set(crate::pretext::NUM_PATCHES, config.jigsaw.permutations, config.jigsaw.permset_seed)?)
        } else {
            None
        };
        let mut label_map = vec![usize::MAX; dataset.num_classes()];
        split.base.iter().enumerate().for_each(|(i, &c)| label_map[c] = i);
        let base_ids = dataset.ids_in(&split.base);
        let pool = UnlabeledPool::from_base(dataset, config.gc.pool_cap, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.model, 2)))?;
        Ok(Self {
            config,
            dataset,
            model,
            permset,
            base_ids,
            label_map,
            pool,
            pseudo: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seeds.model, 1)),
            gc_aborted: 0,
        })
    }

    pub fn base_classes(&self) -> usize {
        self.dataset.split().map(|s| s.base.len()).unwrap_or(0)
    }

    fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.label_map[self.dataset.labels[i]]).collect()
    }

    /// Embeds the pool with the current backbone and runs one pseudo-label
    /// refresh. The first call seeds the labels from the untrained head.
    pub fn refresh_pseudo_labels(&mut self, epoch: usize) -> Result<()> {
        let frozen = self.model.backbone.frozen();
        let mut rows = Vec::with_capacity(self.pool.ids.len() * frozen.embedding_dim());
        for chunk in self.pool.ids.chunks(POOL_CHUNK) {
            rows.extend(frozen.extract_features(&self.dataset.batch::<f32>(chunk)?)?.to_vec());
        }
        let features = Tensor::new(&[self.pool.ids.len(), frozen.embedding_dim()], rows)?;
        let pool = FeaturePool::new(features, self.pool.ids.clone())?;
        let adjacency = build_adjacency(&pool)?;
        let previous = match self.pseudo.take() {
            Some(p) => p,
            None => assign_pseudo_labels(&gc_forward(&pool.features, &adjacency, &self.model.gc)?, &pool.ids, epoch)?,
        };
        let gc = &self.config.gc;
        let cfg = GcUpdateConfig {
            steps: gc.steps,
            lr: gc.lr,
            momentum: gc.momentum,
            lambda_bal: gc.lambda_bal,
            balance_temperature: gc.balance_temperature,
            clip_norm: gc.clip_norm,
        };
        let out = gc_update(&pool, &adjacency, &self.model.gc, &previous, &cfg, epoch)?;
        if out.aborted {
            self.gc_aborted += 1;
        }
        self.pseudo = Some(out.labels);
        Ok(())
    }

    fn patch_embeddings(&mut self, ids: &[usize]) -> Result<Tensor<f32>> {
        let geometry = self.config.patch_geometry();
        let mut grids = Vec::with_capacity(ids.len());
        for &id in ids {
            let grid = extract_patches(&self.dataset.image::<f32>(id)?, geometry, &mut self.rng)?;
            for p in &grid.patches {
                color_jitter(p, self.config.patch.brightness, self.config.patch.contrast, &mut self.rng);
            }
            grids.push(grid);
        }
        embed_patches(&grids, &self.model.backbone)
    }

    /// Every enabled branch's loss on one batch. `unlabeled` is the pretext
    /// view; by default it is the same images as `ids`.
    pub fn batch_losses(&mut self, ids: &[usize], unlabeled: &[usize]) -> Result<LossComponents<f32>> {
        let b = self.config.branches;
        let same_view = ids == unlabeled;
        let labels = self.labels_of(ids);
        let mut out = LossComponents::default();

        let mut feats = None;
        if b.few {
            let f = self.model.backbone.extract_features(&self.dataset.batch::<f32>(ids)?)?;
            out.few = Some(self.model.cc_few.logits(&f)?.softmax_cross_entropy(&labels)?);
            feats = Some(f);
        }
        if b.clu {
            let pseudo = self.pseudo.as_ref().ok_or_else(|| Error::Contract("clustering loss before the first refresh".into()))?;
            let lookup = pseudo.lookup();
            let members: Vec<usize> = unlabeled.iter().copied().filter(|id| lookup.contains_key(id)).collect();
            if !members.is_empty() {
                let f = match (&feats, same_view && members.len() == ids.len()) {
                    (Some(f), true) => f.clone(),
                    _ => self.model.backbone.extract_features(&self.dataset.batch::<f32>(&members)?)?,
                };
                out.clu = Some(clustering_loss_from_features(&f, &members, pseudo, &self.model.head_clu)?);
            }
        }
        if b.rot {
            let task = RotationTask::new(&self.dataset.batch::<f32>(unlabeled)?)?;
            out.rot = Some(rotation_loss(&task, &self.model.backbone, &self.model.head_rot)?);
        }
        if b.uses_patches() {
            let pretext_emb = if b.loc || b.jig { Some(self.patch_embeddings(unlabeled)?) } else { None };
            if b.loc {
                out.loc = Some(location_loss_from_embeddings(pretext_emb.as_ref().expect("embedded"), &self.model.head_loc)?);
            }
            if b.jig {
                let set = self.permset.as_ref().expect("built when enabled");
                let choices = sample_permutation_choices(unlabeled.len(), set, self.config.jigsaw.all_perms, &mut self.rng);
                out.jig = Some(jigsaw_loss_from_embeddings(pretext_emb.as_ref().expect("embedded"), set, &self.model.head_jig, &choices)?);
            }
            if b.pat {
                let emb = match pretext_emb {
                    Some(e) if same_view => e,
                    _ => self.patch_embeddings(ids)?,
                };
                out.pat = Some(patch_branch_loss_from_embeddings(&emb, &self.model.cc_patch, &labels)?);
            }
        }
        Ok(out)
    }

    /// Batches of base ids for one epoch, in seeded shuffled order.
    pub fn epoch_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order = self.base_ids.clone();
        order.shuffle(&mut self.rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn unlabeled_view(&mut self, batch: &[usize]) -> Vec<usize> {
        if self.config.independent_unlabeled_batch {
            (0..batch.len()).map(|_| self.pool.ids[self.rng.gen_range(0..self.pool.ids.len())]).collect()
        } else {
            batch.to_vec()
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Stage 1: joint training of the few-shot, patch, and enabled pretext
/// branches on the base split.
pub fn train_stage1(config: &TrainConfig, dataset: &Dataset, outputs: &TrainOutputs) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, dataset)?;
    let hash = config.hash();
    let mut opt = trainer.model.optimizer(config);
    let mut writer = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("config.json");
            std::fs::write(&path, config.to_json()).map_err(|e| Error::io(&path, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    if config.branches.clu {
        trainer.refresh_pseudo_labels(0)?;
    }
    take_zero_norm_events();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let lr = config.lr_at(epoch);
        opt.state.learning_rate = lr as f32;
        let mut sums: [Vec<f64>; 6] = Default::default();
        let mut totals = Vec::new();
        let mut skipped = 0;
        let aborted_before = trainer.gc_aborted;
        for batch in trainer.epoch_batches() {
            let unlabeled = trainer.unlabeled_view(&batch);
            let losses = trainer.batch_losses(&batch, &unlabeled)?;
            let total = total_loss(&losses, &trainer.model.weights).and_then(|t| {
                let v = t.item() as f64;
                if v.is_finite() {
                    Ok(t)
                } else {
                    Err(Error::NonFinite(format!("total loss = {v}")))
                }
            });
            let total = match total {
                Ok(t) => t,
                Err(Error::NonFinite(msg)) => {
                    let diag = emergency_stop(&trainer.model, &opt, epoch, hash, outputs)?;
                    return Err(Error::NonFinite(format!("epoch {epoch}: {msg}; {diag}")));
                }
                Err(e) => return Err(e),
            };
            for (acc, v) in sums.iter_mut().zip(losses.values()) {
                if let Some(v) = v {
                    acc.push(v);
                }
            }
            totals.push(total.item() as f64);
            total.backward()?;
            if let Some(c) = config.clip_norm {
                opt.clip_grad_norm(c as f32);
            }
            skipped += opt.step();
        }
        let mut cluster_sizes = None;
        if config.branches.clu && epoch % config.gc.refresh_every == 0 && epoch < config.epochs {
            trainer.refresh_pseudo_labels(epoch)?;
            cluster_sizes = trainer.pseudo.as_ref().map(PseudoLabels::histogram);
        }
        let lambdas = trainer.model.weights.lambdas();
        let [few, pat, rot, loc, jig, clu] = sums.map(|v| mean(&v));
        let record = MetricsRecord {
            epoch,
            loss_few: few,
            loss_pat: pat,
            loss_rot: rot,
            loss_loc: loc,
            loss_jig: jig,
            loss_clu: clu,
            loss_total: mean(&totals).unwrap_or(0.0),
            lambda_rot: lambdas[0],
            lambda_loc: lambdas[1],
            lambda_jig: lambdas[2],
            lambda_clu: lambdas[3],
            lr,
            wall_time: start.elapsed().as_secs_f64(),
            anomalies: Anomalies {
                zero_norm: take_zero_norm_events(),
                skipped_updates: skipped,
                gc_aborted: trainer.gc_aborted - aborted_before,
            },
            cluster_sizes,
        };
        if let Some(w) = writer.as_mut() {
            w.write(&record)?;
        }
        metrics.push(record);
    }
    let checkpoint = Checkpoint::capture(&trainer.model, Some(&opt), config.epochs as u64, hash);
    if let Some(dir) = &outputs.dir {
        checkpoint.save(&dir.join("checkpoint.mpan"))?;
    }
    Ok(TrainOutcome { model: trainer.model, optimizer: opt, metrics, checkpoint, pseudo_labels: trainer.pseudo })
}

fn emergency_stop(model: &MpanModel<f32>, opt: &Sgd<f32>, epoch: usize, hash: u64, outputs: &TrainOutputs) -> Result<String> {
    let ckpt = Checkpoint::capture(model, Some(opt), epoch as u64, hash);
    match &outputs.dir {
        Some(dir) => {
            let path = dir.join("emergency.mpan");
            ckpt.save(&path)?;
            Ok(format!("state before the failing step saved to {}", path.display()))
        }
        None => Ok("no output directory, emergency checkpoint not written".into()),
    }
}

/// Per-branch loss on the first training batch and the value an
/// uninformed predictor would score (`ln` of the branch's class count).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub branch: &'static str,
    pub measured: f64,
    pub expected: f64,
}

/// First-batch losses of a fresh model. With `uniform_heads` every head
/// starts from a constant prediction.
pub fn first_batch_calibration(config: &TrainConfig, dataset: &Dataset, uniform_heads: bool) -> Result<Vec<Calibration>> {
    let mut trainer = Trainer::new(config, dataset)?;
    if uniform_heads {
        trainer.model.make_heads_uniform()?;
    }
    if config.branches.clu {
        trainer.refresh_pseudo_labels(0)?;
    }
    let batch = trainer.epoch_batches().swap_remove(0);
    let unlabeled = trainer.unlabeled_view(&batch);
    let losses = trainer.batch_losses(&batch, &unlabeled)?;
    let c = trainer.base_classes() as f64;
    let expected = [c, c, ROTATIONS as f64, LOCATIONS as f64, config.jigsaw.permutations as f64, config.gc.k as f64];
    let names = ["few", "pat", "rot", "loc", "jig", "clu"];
    Ok(losses
        .values()
        .iter()
        .zip(names)
        .zip(expected)
        .filter_map(|((v, branch), n)| v.map(|measured| Calibration { branch, measured, expected: n.ln() }))
        .collect())
}

/// Reads `checkpoint.mpan` from a stage-1 output directory.
pub fn load_run_checkpoint(dir: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&dir.join("checkpoint.mpan"))
}
