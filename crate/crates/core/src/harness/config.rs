use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::WeightMode;
use crate::episodes::FineTuneConfig;
use crate::error::{Error, Result};
use crate::gclust::Propagation;
use crate::pretext::PatchGeometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { num_classes: usize, per_class: usize, image_size: usize },
    /// A directory holding `manifest.json` and `.ten` images.
    Directory(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub base_frac: f64,
    pub val_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub few: bool,
    pub pat: bool,
    pub rot: bool,
    pub loc: bool,
    pub jig: bool,
    pub clu: bool,
}

impl Branches {
    pub fn baseline() -> Self {
        Self { few: true, pat: false, rot: false, loc: false, jig: false, clu: false }
    }

    pub fn all() -> Self {
        Self { few: true, pat: true, rot: true, loc: true, jig: true, clu: true }
    }

    pub fn any(&self) -> bool {
        self.few || self.pat || self.rot || self.loc || self.jig || self.clu
    }

    /// Whether any enabled branch consumes the 3×3 patch grid.
    pub fn uses_patches(&self) -> bool {
        self.pat || self.loc || self.jig
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub resize_to: usize,
    pub crop: usize,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JigsawConfig {
    pub permutations: usize,
    pub permset_seed: u64,
    /// Train every image under every permutation instead of one sampled.
    pub all_perms: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcConfig {
    pub k: usize,
    pub hidden: [usize; 2],
    /// Refresh pseudo-labels after every `refresh_every` epochs.
    pub refresh_every: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_bal: f64,
    pub balance_temperature: f64,
    pub clip_norm: Option<f64>,
    pub propagation: Propagation,
    /// Uniform subsample of the base split used as the pool.
    pub pool_cap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub t_query: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic generation and the class split.
    pub data: u64,
    /// Parameter initialization, batch order, and augmentation.
    pub model: u64,
    /// Evaluation episodes.
    pub episode: u64,
}

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: DataConfig,
    /// Block widths; the last is the embedding dimension.
    pub backbone: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(first epoch, lr)` pairs, 1-based, strictly increasing.
    pub lr_schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap applied before each step.
    pub clip_norm: Option<f64>,
    pub sigma_lr_scale: f64,
    pub gamma_init: f64,
    pub branches: Branches,
    pub attention: WeightMode,
    pub patch: PatchConfig,
    pub jigsaw: JigsawConfig,
    pub gc: GcConfig,
    pub finetune: FineTuneConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    /// Draw the pretext batch independently of the supervised one.
    pub independent_unlabeled_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                source: DataSource::Synthetic { num_classes: 16, per_class: 60, image_size: 32 },
                base_frac: 10.0 / 16.0,
                val_frac: 3.0 / 16.0,
            },
            backbone: vec![32, 32, 64, 64],
            batch_size: 32,
            epochs: 30,
            lr_schedule: vec![(1, 0.1), (23, 0.01), (26, 0.001)],
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: Some(1.0),
            sigma_lr_scale: 1.0,
            gamma_init: 10.0,
            branches: Branches::all(),
            attention: WeightMode::Attention,
            patch: PatchConfig { resize_to: 36, crop: 9, brightness: 0.1, contrast: 0.1 },
            jigsaw: JigsawConfig { permutations: 64, permset_seed: 0, all_perms: false },
            gc: GcConfig {
                k: 10,
                hidden: [512, 256],
                refresh_every: 1,
                steps: 50,
                lr: 0.05,
                momentum: 0.9,
                lambda_bal: 10.0,
                balance_temperature: 0.1,
                clip_norm: Some(1.0),
                propagation: Propagation::Standardized,
                pool_cap: None,
            },
            finetune: FineTuneConfig::default(),
            eval: EvalConfig { n_way: 3, k_shot: 1, t_query: 15, episodes: 2000 },
            seeds: Seeds { data: 0, model: 0, episode: 0 },
            independent_unlabeled_batch: false,
        }
    }
}

impl TrainConfig {
    /// A configuration that trains in about a second, for pipelines and
    /// tests. Every branch is on.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data = DataConfig {
            source: DataSource::Synthetic { num_classes: 8, per_class: 10, image_size: 12 },
            base_frac: 0.5,
            val_frac: 0.125,
        };
        c.backbone = vec![8, 8];
        c.batch_size = 8;
        c.epochs = 2;
        c.lr_schedule = vec![(1, 0.05), (2, 0.01)];
        c.patch = PatchConfig { resize_to: 12, crop: 3, ..c.patch };
        c.jigsaw.permutations = 8;
        c.gc.k = 4;
        c.gc.hidden = [16, 8];
        c.gc.steps = 5;
        c.eval.episodes = 20;
        c.eval.t_query = 5;
        c.finetune.steps = 10;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.branches.any() {
            return bad("every loss branch is disabled".into());
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 1 {
            return bad(format!("lr schedule must start at epoch 1: {:?}", self.lr_schedule));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad(format!("lr schedule epochs must increase strictly: {:?}", self.lr_schedule));
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return bad(format!("learning rates must be positive: {:?}", self.lr_schedule));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad(format!("clip_norm must be positive, got {:?}", self.clip_norm));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs={} batch_size={}", self.epochs, self.batch_size));
        }
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return bad(format!("backbone widths {:?}", self.backbone));
        }
        if self.gc.k < 2 || self.gc.refresh_every == 0 || self.gc.hidden.contains(&0) || self.gc.balance_temperature <= 0.0 {
            return bad(format!("gc settings {:?}", self.gc));
        }
        if self.jigsaw.permutations < 2 {
            return bad(format!("jigsaw needs at least 2 permutations, got {}", self.jigsaw.permutations));
        }
        if let WeightMode::Manual(w) = self.attention {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("manual pretext weights {w:?}"));
            }
        }
        if self.eval.n_way < 2 || self.eval.k_shot == 0 || self.eval.t_query == 0 {
            return bad(format!("evaluation episodes {:?}", self.eval));
        }
        if let DataSource::Synthetic { image_size, .. } = self.data.source {
            if image_size < 4 {
                return bad(format!("image size {image_size}"));
            }
        }
        PatchGeometry::new(self.patch.resize_to, self.patch.crop)?;
        Ok(())
    }

    /// Learning rate in force at 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|&&(e, _)| e <= epoch).last().map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }

    pub fn patch_geometry(&self) -> PatchGeometry {
        PatchGeometry { resize_to: self.patch.resize_to, crop: self.patch.crop }
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
