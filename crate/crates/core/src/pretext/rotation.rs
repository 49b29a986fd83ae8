use crate::error::{Error, Result};
use crate::model::{Backbone, LinearHead};
use crate::ndgrad::{Scalar, Tensor};

/// Number of rotation classes: 0°, 90°, 180°, 270°.
pub const ROTATIONS: usize = 4;

/// Rotates each `n×n` channel plane by `r` quarter turns counter-clockwise.
pub(crate) fn rotate_planes<T: Copy>(src: &[T], n: usize, r: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for plane in src.chunks(n * n) {
        for i in 0..n {
            for j in 0..n {
                let (y, x) = match r % 4 {
                    0 => (i, j),
                    1 => (j, n - 1 - i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (n - 1 - j, i),
                };
                out.push(plane[y * n + x]);
            }
        }
    }
    out
}

/// Lossless rotation of a `[c×h×w]` image by `r·90°` counter-clockwise.
pub fn rotate<T: Scalar>(image: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Geometry(format!("rotate expects [c×h×w], got {:?}", image.shape())));
    };
    if h != w {
        return Err(Error::Geometry(format!("rotate needs a square image, got {h}×{w}")));
    }
    Tensor::new(&[c, h, w], rotate_planes(&image.data(), h, r))
}

/// Every source image under all four rotations, with the rotation index as
/// label. Row `4·i + r` holds image `i` rotated by `r`.
#[derive(Debug, Clone)]
pub struct RotationTask<T: Scalar = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> RotationTask<T> {
    /// Builds the task from a `[batch×c×n×n]` batch.
    pub fn new(batch: &Tensor<T>) -> Result<Self> {
        let &[b, c, h, w] = batch.shape() else {
            return Err(Error::Geometry(format!("rotation task expects rank 4, got {:?}", batch.shape())));
        };
        if h != w {
            return Err(Error::Geometry(format!("rotation task needs square images, got {h}×{w}")));
        }
        let per = c * h * w;
        let src = batch.data();
        let mut data = Vec::with_capacity(ROTATIONS * src.len());
        let mut labels = Vec::with_capacity(ROTATIONS * b);
        for img in src.chunks(per) {
            for r in 0..ROTATIONS {
                data.extend(rotate_planes(img, h, r));
                labels.push(r);
            }
        }
        drop(src);
        Ok(Self {
            images: Tensor::new(&[ROTATIONS * b, c, h, w], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean cross-entropy of the 4-way rotation head over all rotated images.
pub fn rotation_loss<T: Scalar>(task: &RotationTask<T>, backbone: &Backbone<T>, head: &LinearHead<T>) -> Result<Tensor<T>> {
    let features = backbone.extract_features(&task.images)?;
    head.forward(&features)?.softmax_cross_entropy(&task.labels)
}
