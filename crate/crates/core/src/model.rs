//! Shared feature extractor and the classifier heads stacked on it.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndgrad::{Scalar, Tensor};

fn uniform<T: Scalar>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}

/// Stack of `conv3×3 → relu → 2×2 max-pool` blocks followed by global
/// average pooling. One instance serves every branch, so all branches see
/// the same weights.
///
/// Pooling is skipped once a map is smaller than 2×2, which lets the same
/// network embed both full images and the much smaller jigsaw/location
/// patches.
#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar = f32> {
    kernels: Vec<Tensor<T>>,
    in_channels: usize,
    input_sizes: Vec<usize>,
}

impl<T: Scalar> Backbone<T> {
    /// `channels[i]` is the width of block `i`; the embedding dimension is
    /// the last width. `input_sizes` lists the square spatial sizes the
    /// network accepts. Kernels use fan-in uniform (He) initialization.
    pub fn new(in_channels: usize, channels: &[usize], input_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) || in_channels == 0 {
            return Err(Error::Config(format!(
                "backbone needs positive widths, got in={in_channels} blocks={channels:?}"
            )));
        }
        if input_sizes.is_empty() || input_sizes.contains(&0) {
            return Err(Error::Config(format!("backbone input sizes {input_sizes:?}")));
        }
        let mut kernels = Vec::with_capacity(channels.len());
        let mut cin = in_channels;
        for &cout in channels {
            let fan_in = cin * 9;
            let data = uniform(rng, cout * fan_in, (6.0 / fan_in as f64).sqrt());
            kernels.push(Tensor::param(&[cout, cin, 3, 3], data)?);
            cin = cout;
        }
        Ok(Self {
            kernels,
            in_channels,
            input_sizes: input_sizes.to_vec(),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.kernels.last().map(|k| k.shape()[0]).unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_sizes(&self) -> &[usize] {
        &self.input_sizes
    }

    pub fn kernels(&self) -> &[Tensor<T>] {
        &self.kernels
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.kernels
            .iter()
            .enumerate()
            .map(|(i, k)| (format!("backbone.conv{i}.weight"), k.clone()))
            .collect()
    }

    /// A copy whose weights are constants; features computed through it
    /// never feed gradients back into the trainable original.
    pub fn frozen(&self) -> Self {
        Self {
            kernels: self.kernels.iter().map(Tensor::detach).collect(),
            in_channels: self.in_channels,
            input_sizes: self.input_sizes.clone(),
        }
    }

    /// `[batch×c×h×w] → [batch×d]`.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let &[_, c, h, w] = images.shape() else {
            return Err(Error::Dimension(format!(
                "backbone expects [batch×c×h×w], got {:?}",
                images.shape()
            )));
        };
        if c != self.in_channels || h != w || !self.input_sizes.contains(&h) {
            return Err(Error::Dimension(format!(
                "backbone expects {} channel(s) at a size in {:?}, got {c}×{h}×{w}",
                self.in_channels, self.input_sizes
            )));
        }
        let mut x = images.clone();
        for k in &self.kernels {
            x = x.conv2d(k, 1, 1)?.relu();
            if x.shape()[2] >= 2 && x.shape()[3] >= 2 {
                x = x.max_pool2()?;
            }
        }
        x.global_avg_pool()
    }
}

/// Softmax over `γ·cos(feature, w_c)` with a learnable inverse temperature γ.
#[derive(Debug, Clone)]
pub struct CosineClassifier<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
}

impl<T: Scalar> CosineClassifier<T> {
    pub fn new(num_classes: usize, dim: usize, gamma: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(&[num_classes, dim], uniform(rng, num_classes * dim, 1.0))?,
            gamma: Tensor::param(&[], vec![T::of(gamma)])?,
        })
    }

    pub fn from_parts(weight: Tensor<T>, gamma: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || gamma.numel() != 1 {
            return Err(Error::Dimension(format!(
                "cosine classifier weight {:?} / gamma {:?}",
                weight.shape(),
                gamma.shape()
            )));
        }
        Ok(Self { weight, gamma })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.gamma"), self.gamma.clone()),
        ]
    }

    /// Pre-softmax scores `γ·cos(f, w_c)`, shape `[batch×C]`.
    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if features.rank() != 2 || features.shape()[1] != self.dim() {
            return Err(Error::Dimension(format!(
                "cosine classifier over dim {} got features {:?}",
                self.dim(),
                features.shape()
            )));
        }
        let f = features.normalize_rows()?;
        let w = self.weight.normalize_rows()?;
        f.matmul(&w.transpose()?)?.mul_scalar(&self.gamma)
    }
}

/// Class probabilities `softmax(γ·cos(f, W))`; each row sums to one.
pub fn cosine_scores<T: Scalar>(features: &Tensor<T>, classifier: &CosineClassifier<T>) -> Result<Tensor<T>> {
    classifier.logits(features)?.softmax_rows()
}

/// Mean `-log p(true class)` over a batch of probability rows.
pub fn few_shot_loss<T: Scalar>(probabilities: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    probabilities.nll_from_probs(labels)
}

/// Affine classifier used by the pretext tasks.
#[derive(Debug, Clone)]
pub struct LinearHead<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearHead<T> {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: Tensor::param(&[input, output], uniform(rng, input * output, bound))?,
            bias: Tensor::param(&[output], vec![T::zero(); output])?,
        })
    }

    pub fn zeros(input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(&[input, output], vec![T::zero(); input * output])?,
            bias: Tensor::param(&[output], vec![T::zero(); output])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    /// Zeroes all weights so every class gets the same logit.
    pub fn make_uniform(&self) {
        self.weight.update_data(|d| d.fill(T::zero()));
        self.bias.update_data(|d| d.fill(T::zero()));
    }

    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        features.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// `features · W + b`.
pub fn head_forward<T: Scalar>(features: &Tensor<T>, head: &LinearHead<T>) -> Result<Tensor<T>> {
    head.forward(features)
}

/// SHA-256 over names, shapes, and raw values, hex encoded.
pub fn parameter_checksum<T: Scalar>(params: &[(String, Tensor<T>)]) -> String {
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        buf.clear();
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        h.update(&buf);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
