use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Scalar, Tensor};

/// Disjoint class partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub base: Vec<usize>,
    pub val: Vec<usize>,
    pub novel: Vec<usize>,
}

/// Labeled images stored as flat `c×s×s` f32 planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub split: Option<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClass {
    name: String,
    files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    channels: usize,
    classes: Vec<ManifestClass>,
}

impl Dataset {
    pub fn new(image_size: usize, channels: usize, class_names: Vec<String>, images: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * image_size * image_size;
        if per == 0 {
            return Err(Error::Config(format!("image size {image_size} with {channels} channel(s)")));
        }
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = images.iter().position(|im| im.len() != per) {
            return Err(Error::Dimension(format!("image {bad} holds {} values, expected {per}", images[bad].len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Label { label, classes: class_names.len() });
        }
        Ok(Self { image_size, channels, class_names, images, labels, split: None })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Sample ids per class, ascending.
    pub fn ids_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes()];
        self.labels.iter().enumerate().for_each(|(i, &l)| by[l].push(i));
        by
    }

    pub fn split(&self) -> Result<&Split> {
        self.split.as_ref().ok_or_else(|| Error::Contract("dataset has no class split".into()))
    }

    /// Ids of every sample whose class is in `classes`, ascending.
    pub fn ids_in(&self, classes: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.num_classes()];
        classes.iter().for_each(|&c| member[c] = true);
        (0..self.len()).filter(|&i| member[self.labels[i]]).collect()
    }

    /// `[ids.len() × c × s × s]` batch.
    pub fn batch<T: Scalar>(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.channels * self.image_size * self.image_size);
        for &i in ids {
            let im = self.images.get(i).ok_or_else(|| Error::Index(format!("sample {i} of {}", self.len())))?;
            data.extend(im.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[ids.len(), self.channels, self.image_size, self.image_size], data)
    }

    /// One image as `[c × s × s]`.
    pub fn image<T: Scalar>(&self, id: usize) -> Result<Tensor<T>> {
        let im = self.images.get(id).ok_or_else(|| Error::Index(format!("sample {id} of {}", self.len())))?;
        Tensor::new(&[self.channels, self.image_size, self.image_size], im.iter().map(|&v| T::of(v as f64)).collect())
    }

    /// Writes `manifest.json` plus one little-endian `.ten` file per image.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut classes: Vec<ManifestClass> =
            self.class_names.iter().map(|n| ManifestClass { name: n.clone(), files: Vec::new() }).collect();
        for (i, (im, &l)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("{:06}.ten", i);
            let path = dir.join(&name);
            let bytes: Vec<u8> = im.iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            classes[l].files.push(name);
        }
        let manifest = Manifest { image_size: self.image_size, channels: self.channels, classes };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a directory written by [`Dataset::save`] or prepared by hand in
    /// the same layout. Samples are ordered class by class.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let per = manifest.channels * manifest.image_size * manifest.image_size;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (l, class) in manifest.classes.iter().enumerate() {
            for f in &class.files {
                let p = dir.join(f);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                if bytes.len() != per * 4 {
                    return Err(Error::Integrity(format!("{}: {} bytes, expected {}", p.display(), bytes.len(), per * 4)));
                }
                images.push(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect());
                labels.push(l);
            }
        }
        let names = manifest.classes.into_iter().map(|c| c.name).collect();
        Self::new(manifest.image_size, manifest.channels, names, images, labels)
    }
}

/// Seeded class-level partition. Base and val sizes are the rounded
/// fractions; novel takes the remainder.
pub fn split_classes(dataset: &Dataset, base_frac: f64, val_frac: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&base_frac) || !(0.0..=1.0).contains(&val_frac) || base_frac + val_frac > 1.0 + 1e-12 {
        return Err(Error::Config(format!("split fractions base={base_frac} val={val_frac}")));
    }
    let c = dataset.num_classes();
    let n_base = (base_frac * c as f64).round() as usize;
    let n_val = ((val_frac * c as f64).round() as usize).min(c.saturating_sub(n_base));
    let n_novel = c - n_base - n_val;
    if n_base == 0 || n_val == 0 || n_novel == 0 {
        return Err(Error::Config(format!("split of {c} classes gives base={n_base} val={n_val} novel={n_novel}")));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut take = |n: usize| {
        let mut v: Vec<usize> = order.drain(..n).collect();
        v.sort_unstable();
        v
    };
    let base = take(n_base);
    let val = take(n_val);
    let novel = take(n_novel);
    let mut out = dataset.clone();
    out.split = Some(Split { base, val, novel });
    Ok(out)
}

/// Base-split sample ids with labels withheld.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnlabeledPool {
    pub ids: Vec<usize>,
}

impl UnlabeledPool {
    /// The whole base split, or a uniform subsample of at most `cap` ids.
    pub fn from_base(dataset: &Dataset, cap: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        let mut ids = dataset.ids_in(&dataset.split()?.base);
        if let Some(cap) = cap.filter(|&c| c < ids.len()) {
            ids = ids.choose_multiple(rng, cap).copied().collect();
            ids.sort_unstable();
        }
        Ok(Self { ids })
    }
}

/// One N-way K-shot task with T queries per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Dataset class of each episode-local label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }
}

/// Samples an episode from the novel split.
pub fn sample_episode(dataset: &Dataset, n: usize, k: usize, t: usize, rng: &mut impl Rng) -> Result<Episode> {
    sample_episode_from(dataset, &dataset.split()?.novel, &dataset.ids_by_class(), n, k, t, rng)
}

/// Samples `n` of `classes` without replacement, then `k + t` distinct
/// samples of each, the first `k` forming the support set.
pub fn sample_episode_from(
    dataset: &Dataset,
    classes: &[usize],
    by_class: &[Vec<usize>],
    n: usize,
    k: usize,
    t: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(Error::Config(format!("{n}-way {k}-shot episode")));
    }
    if classes.len() < n {
        return Err(Error::Capacity(format!("{n}-way episode from {} classes", classes.len())));
    }
    for &c in classes {
        if by_class[c].len() < k + t {
            return Err(Error::Capacity(format!(
                "class {} ({}) has {} samples, episode needs {}",
                c,
                dataset.class_names[c],
                by_class[c].len(),
                k + t
            )));
        }
    }
    let chosen: Vec<usize> = rand::seq::index::sample(rng, classes.len(), n).into_iter().map(|i| classes[i]).collect();
    let mut ep = Episode {
        classes: chosen.clone(),
        support: Vec::with_capacity(n * k),
        support_labels: Vec::with_capacity(n * k),
        query: Vec::with_capacity(n * t),
        query_labels: Vec::with_capacity(n * t),
    };
    for (local, &c) in chosen.iter().enumerate() {
        let members = &by_class[c];
        let picks = rand::seq::index::sample(rng, members.len(), k + t);
        for (j, idx) in picks.into_iter().enumerate() {
            if j < k {
                ep.support.push(members[idx]);
                ep.support_labels.push(local);
            } else {
                ep.query.push(members[idx]);
                ep.query_labels.push(local);
            }
        }
    }
    Ok(ep)
}
