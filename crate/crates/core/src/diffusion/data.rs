//! Synthetic image datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetKind {
    /// One Gaussian blob per image at a random position, width and amplitude.
    Blobs,
    /// Every image equal to `value` everywhere.
    Constant { value: f32 },
}

/// `n` images stacked along the leading axis, shape `(n, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
}

impl Dataset {
    pub fn generate(
        kind: DatasetKind,
        n: usize,
        channels: usize,
        resolution: usize,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        let (c, r) = (channels, resolution);
        let mut data = Vec::with_capacity(n * c * r * r);
        match kind {
            DatasetKind::Constant { value } => data.resize(n * c * r * r, value),
            DatasetKind::Blobs => {
                let mut rng = substream(seed, "data");
                let lo = r as f32 * 0.2;
                let hi = r as f32 * 0.8;
                for _ in 0..n {
                    let cy = rng.random_range(lo..hi);
                    let cx = rng.random_range(lo..hi);
                    let sigma = rng.random_range(0.1..0.2) * r as f32;
                    let amp = rng.random_range(0.5f32..1.5);
                    for _ in 0..c {
                        for y in 0..r {
                            for x in 0..r {
                                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                                data.push(amp * (-d2 / (2.0 * sigma * sigma)).exp());
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            images: Tensor::new(&[n, c, r, r], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Mean over every pixel of every image.
    pub fn pixel_mean(&self) -> f64 {
        self.images.data().iter().map(|&v| v as f64).sum::<f64>() / self.images.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_bounded() {
        let a = Dataset::generate(DatasetKind::Blobs, 16, 1, 16, 4).unwrap();
        let b = Dataset::generate(DatasetKind::Blobs, 16, 1, 16, 4).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert!(a.images.data().iter().all(|&v| (0.0..=1.5).contains(&v)));
        assert_eq!(a.images.shape(), &[16, 1, 16, 16]);
    }

    #[test]
    fn empty_is_rejected() {
        assert!(Dataset::generate(DatasetKind::Blobs, 0, 1, 16, 0).is_err());
    }
}
