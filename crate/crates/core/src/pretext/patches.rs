use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Backbone, CosineClassifier, LinearHead};
use crate::ndgrad::{Scalar, Tensor};

pub const GRID: usize = 3;
pub const NUM_PATCHES: usize = GRID * GRID;
/// Raster index of the middle cell.
pub const CENTER: usize = 4;
/// Raster index of the neighbor carrying location label `l`: clockwise
/// starting from the upper-left cell.
pub const LOCATION_CELLS: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];
pub const LOCATIONS: usize = LOCATION_CELLS.len();

/// How an image is cut into jittered grid patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Side of the square the image is resized to before cutting.
    pub resize_to: usize,
    /// Side of each crop taken inside a grid cell.
    pub crop: usize,
}

impl PatchGeometry {
    pub fn new(resize_to: usize, crop: usize) -> Result<Self> {
        let g = Self { resize_to, crop };
        g.validate()?;
        Ok(g)
    }

    pub fn cell(&self) -> usize {
        self.resize_to / GRID
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_to == 0 || self.resize_to % GRID != 0 {
            return Err(Error::Geometry(format!(
                "resize target {} is not divisible by the {GRID}×{GRID} grid",
                self.resize_to
            )));
        }
        if self.crop == 0 || self.crop > self.cell() {
            return Err(Error::Geometry(format!(
                "crop {} does not fit in a {}-pixel cell",
                self.crop,
                self.cell()
            )));
        }
        Ok(())
    }
}

/// Nine equally sized crops, one per grid cell in raster order.
#[derive(Debug, Clone)]
pub struct PatchGrid<T: Scalar = f32> {
    /// Each `[c×crop×crop]`.
    pub patches: Vec<Tensor<T>>,
    /// `(dy, dx)` of each crop inside its cell.
    pub offsets: Vec<(usize, usize)>,
    pub geometry: PatchGeometry,
}

/// Bilinear resampling of `[c×h×w]` planes to `[c×size×size]` with
/// pixel-center alignment. Same-size input is copied unchanged.
pub(crate) fn resize_planes<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, size: usize) -> Vec<T> {
    if h == size && w == size {
        return src.to_vec();
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, T)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, T::of(pos - lo as f64))
            })
            .collect()
    };
    let (ys, xs) = (axis(size, h), axis(size, w));
    let mut out = Vec::with_capacity(c * size * size);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

/// `[c×h×w]` resized to `[c×size×size]`.
pub fn resize_bilinear<T: Scalar>(image: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Geometry(format!("resize expects [c×h×w], got {:?}", image.shape())));
    };
    Tensor::new(&[c, size, size], resize_planes(&image.data(), c, h, w, size))
}

/// Resizes `image` (`[c×h×w]`), cuts a 3×3 grid, and takes a uniformly
/// placed `crop×crop` window inside each cell.
pub fn extract_patches<T: Scalar>(image: &Tensor<T>, geometry: PatchGeometry, rng: &mut impl Rng) -> Result<PatchGrid<T>> {
    geometry.validate()?;
    let &[c, h, w] = image.shape() else {
        return Err(Error::Geometry(format!("patch extraction expects [c×h×w], got {:?}", image.shape())));
    };
    let size = geometry.resize_to;
    let resized = resize_planes(&image.data(), c, h, w, size);
    let (cell, crop) = (geometry.cell(), geometry.crop);
    let slack = cell - crop;
    let mut patches = Vec::with_capacity(NUM_PATCHES);
    let mut offsets = Vec::with_capacity(NUM_PATCHES);
    for idx in 0..NUM_PATCHES {
        let (gy, gx) = (idx / GRID, idx % GRID);
        let dy = rng.gen_range(0..=slack);
        let dx = rng.gen_range(0..=slack);
        let (y0, x0) = (gy * cell + dy, gx * cell + dx);
        let mut data = Vec::with_capacity(c * crop * crop);
        for plane in resized.chunks(size * size) {
            for y in y0..y0 + crop {
                data.extend_from_slice(&plane[y * size + x0..y * size + x0 + crop]);
            }
        }
        patches.push(Tensor::new(&[c, crop, crop], data)?);
        offsets.push((dy, dx));
    }
    Ok(PatchGrid { patches, offsets, geometry })
}

/// Seeded brightness/contrast perturbation of one patch, applied in place:
/// `x ← (x − mean)·contrast + mean + brightness`.
pub fn color_jitter<T: Scalar>(patch: &Tensor<T>, brightness: f64, contrast: f64, rng: &mut impl Rng) {
    let shift = if brightness > 0.0 { rng.gen_range(-brightness..=brightness) } else { 0.0 };
    let gain = if contrast > 0.0 { rng.gen_range(1.0 - contrast..=1.0 + contrast) } else { 1.0 };
    let (shift, gain) = (T::of(shift), T::of(gain));
    patch.update_data(|d| {
        let mean = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        d.iter_mut().for_each(|v| *v = (*v - mean) * gain + mean + shift);
    });
}

/// All patches of all grids as one `[9·batch × c × crop × crop]` tensor,
/// grid-major.
pub fn stack_patches<T: Scalar>(grids: &[PatchGrid<T>]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .and_then(|g| g.patches.first())
        .ok_or_else(|| Error::Contract("no patches to stack".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(grids.len() * NUM_PATCHES * first.numel());
    for g in grids {
        if g.patches.len() != NUM_PATCHES {
            return Err(Error::Geometry(format!("grid holds {} patches", g.patches.len())));
        }
        for p in &g.patches {
            if p.shape() != shape.as_slice() {
                return Err(Error::Geometry(format!("patch shapes {:?} and {:?} differ", shape, p.shape())));
            }
            data.extend_from_slice(&p.data());
        }
    }
    let mut full = vec![grids.len() * NUM_PATCHES];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// `[9·batch × d]` embeddings of every patch.
pub fn embed_patches<T: Scalar>(grids: &[PatchGrid<T>], backbone: &Backbone<T>) -> Result<Tensor<T>> {
    backbone.extract_features(&stack_patches(grids)?)
}

fn patch_rows(embeddings: &Tensor<impl Scalar>) -> Result<usize> {
    match *embeddings.shape() {
        [rows, _] if rows > 0 && rows % NUM_PATCHES == 0 => Ok(rows / NUM_PATCHES),
        ref s => Err(Error::Dimension(format!("patch embeddings must be [9·batch × d], got {s:?}"))),
    }
}

/// Location pairs built from patch embeddings: `[8·batch × 2d]`
/// (center ‖ neighbor) plus labels 0..7 per image.
pub fn location_pairs<T: Scalar>(embeddings: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let batch = patch_rows(embeddings)?;
    let mut centers = Vec::with_capacity(batch * LOCATIONS);
    let mut neighbors = Vec::with_capacity(batch * LOCATIONS);
    let mut labels = Vec::with_capacity(batch * LOCATIONS);
    for b in 0..batch {
        for (label, &cell) in LOCATION_CELLS.iter().enumerate() {
            centers.push(b * NUM_PATCHES + CENTER);
            neighbors.push(b * NUM_PATCHES + cell);
            labels.push(label);
        }
    }
    let pairs = Tensor::concat_cols(&[embeddings.gather_rows(&centers)?, embeddings.gather_rows(&neighbors)?])?;
    Ok((pairs, labels))
}

pub fn location_loss_from_embeddings<T: Scalar>(embeddings: &Tensor<T>, head: &LinearHead<T>) -> Result<Tensor<T>> {
    let (pairs, labels) = location_pairs(embeddings)?;
    head.forward(&pairs)?.softmax_cross_entropy(&labels)
}

/// Mean cross-entropy of the 8-way location head over every
/// (center, neighbor) pair.
pub fn location_loss<T: Scalar>(grids: &[PatchGrid<T>], backbone: &Backbone<T>, head: &LinearHead<T>) -> Result<Tensor<T>> {
    location_loss_from_embeddings(&embed_patches(grids, backbone)?, head)
}

/// Per-image average of the nine patch embeddings, `[batch × d]`.
pub fn merge_patch_embeddings<T: Scalar>(embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    patch_rows(embeddings)?;
    embeddings.group_mean_rows(NUM_PATCHES)
}

pub fn patch_branch_loss_from_embeddings<T: Scalar>(
    embeddings: &Tensor<T>,
    classifier: &CosineClassifier<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    classifier.logits(&merge_patch_embeddings(embeddings)?)?.softmax_cross_entropy(labels)
}

/// Class supervision on merged patch features through the patch branch's
/// own cosine classifier.
pub fn patch_branch_loss<T: Scalar>(
    grids: &[PatchGrid<T>],
    backbone: &Backbone<T>,
    classifier: &CosineClassifier<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    patch_branch_loss_from_embeddings(&embed_patches(grids, backbone)?, classifier, labels)
}
