use rand::Rng;

use super::config::TrainConfig;
use crate::attention::{PretextWeights, WeightMode};
use crate::error::Result;
use crate::gclust::GcHead;
use crate::model::{Backbone, CosineClassifier, LinearHead};
use crate::ndgrad::{Scalar, Sgd, Tensor};
use crate::pretext::{LOCATIONS, NUM_PATCHES, ROTATIONS};

/// Every trainable piece of a run.
#[derive(Debug, Clone)]
pub struct MpanModel<T: Scalar = f32> {
    pub backbone: Backbone<T>,
    pub cc_few: CosineClassifier<T>,
    pub cc_patch: CosineClassifier<T>,
    pub head_rot: LinearHead<T>,
    pub head_loc: LinearHead<T>,
    pub head_jig: LinearHead<T>,
    pub head_clu: LinearHead<T>,
    pub weights: PretextWeights<T>,
    pub gc: GcHead<T>,
}

impl<T: Scalar> MpanModel<T> {
    pub fn new(config: &TrainConfig, channels: usize, image_size: usize, base_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::new(channels, &config.backbone, &[image_size, config.patch.crop], rng)?;
        let d = backbone.embedding_dim();
        Ok(Self {
            cc_few: CosineClassifier::new(base_classes, d, config.gamma_init, rng)?,
            cc_patch: CosineClassifier::new(base_classes, d, config.gamma_init, rng)?,
            head_rot: LinearHead::new(d, ROTATIONS, rng)?,
            head_loc: LinearHead::new(2 * d, LOCATIONS, rng)?,
            head_jig: LinearHead::new(NUM_PATCHES * d, config.jigsaw.permutations, rng)?,
            head_clu: LinearHead::new(d, config.gc.k, rng)?,
            weights: PretextWeights::new(config.attention)?,
            gc: GcHead::new(d, config.gc.hidden, config.gc.k, config.gc.propagation, rng)?,
            backbone,
        })
    }

    /// All parameters under their checkpoint names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut p = self.backbone.named_parameters();
        p.extend(self.cc_few.named_parameters("cc_few"));
        p.extend(self.cc_patch.named_parameters("cc_patch"));
        p.extend(self.head_rot.named_parameters("head_rot"));
        p.extend(self.head_loc.named_parameters("head_loc"));
        p.extend(self.head_jig.named_parameters("head_jig"));
        p.extend(self.head_clu.named_parameters("head_clu"));
        p.push(("att.sigma".into(), self.weights.sigma.clone()));
        p.extend(self.gc.named_parameters("gc"));
        p
    }

    /// An optimizer over the parameters the enabled branches train. The GC
    /// head has its own optimizer inside each refresh.
    pub fn optimizer(&self, config: &TrainConfig) -> Sgd<T> {
        let b = config.branches;
        let mut opt = Sgd::new(T::of(config.lr_at(1)), T::of(config.momentum), T::of(config.weight_decay));
        let mut add = |params: Vec<(String, Tensor<T>)>| params.iter().for_each(|(n, t)| opt.register(n.clone(), t));
        add(self.backbone.named_parameters());
        if b.few {
            add(self.cc_few.named_parameters("cc_few"));
        }
        if b.pat {
            add(self.cc_patch.named_parameters("cc_patch"));
        }
        if b.rot {
            add(self.head_rot.named_parameters("head_rot"));
        }
        if b.loc {
            add(self.head_loc.named_parameters("head_loc"));
        }
        if b.jig {
            add(self.head_jig.named_parameters("head_jig"));
        }
        if b.clu {
            add(self.head_clu.named_parameters("head_clu"));
        }
        if config.attention == WeightMode::Attention {
            for (n, t) in self.weights.named_parameters() {
                opt.register_scaled(n, &t, T::of(config.sigma_lr_scale));
            }
        }
        opt
    }

    /// Pretext heads output constants and cosine classifiers get `γ = 0`,
    /// so every branch starts from a uniform prediction.
    pub fn make_heads_uniform(&self) -> Result<()> {
        for h in [&self.head_rot, &self.head_loc, &self.head_jig, &self.head_clu] {
            h.make_uniform();
        }
        self.cc_few.gamma.set_data(vec![T::zero()])?;
        self.cc_patch.gamma.set_data(vec![T::zero()])
    }
}
