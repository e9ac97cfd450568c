use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TokenizerError;
use crate::codebook::io::{load_embeddings, Entries};
use crate::codebook::EmbeddingTable;
use crate::numerics::{kernels, Tensor};

/// Source of the whole-image feature vector `f` that global tokens are
/// quantized from.
pub trait GlobalFeatures: Send + Sync {
    fn dim(&self) -> usize;

    /// Feature for the image `[3, H, W]` known as `key`.
    fn feature(&self, key: &str, image: &Tensor) -> Result<Vec<f64>, TokenizerError>;
}

/// Deterministic stand-in for a pretrained image encoder: per-channel mean
/// and variance over a `patches x patches` grid, mapped to `dim` values by a
/// fixed seeded linear map.
#[derive(Clone, Debug)]
pub struct ToyExtractor {
    patches: usize,
    map: Tensor,
}

impl ToyExtractor {
    pub fn new(dim: usize, patches: usize, seed: u64) -> Self {
        let inputs = 6 * patches * patches;
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            patches,
            map: Tensor::uniform(&[dim, inputs], -bound, bound, &mut rng),
        }
    }

    fn pooled(&self, image: &Tensor) -> Result<Vec<f64>, TokenizerError> {
        let (h, w) = match *image.shape() {
            [3, h, w] if h >= self.patches && w >= self.patches => (h, w),
            _ => {
                return Err(TokenizerError::Shape(format!(
                    "toy extractor needs [3, H, W] with H, W >= {}, got {:?}",
                    self.patches,
                    image.shape()
                )))
            }
        };
        let p = self.patches;
        let mut out = Vec::with_capacity(6 * p * p);
        for c in 0..3 {
            let plane = &image.data()[c * h * w..][..h * w];
            for py in 0..p {
                for px in 0..p {
                    let (y0, y1) = (py * h / p, (py + 1) * h / p);
                    let (x0, x1) = (px * w / p, (px + 1) * w / p);
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for y in y0..y1 {
                        for v in &plane[y * w + x0..y * w + x1] {
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mean = sum / count;
                    out.push(mean);
                    out.push((sq / count - mean * mean).max(0.0));
                }
            }
        }
        Ok(out)
    }
}

impl GlobalFeatures for ToyExtractor {
    fn dim(&self) -> usize {
        self.map.shape()[0]
    }

    fn feature(&self, _key: &str, image: &Tensor) -> Result<Vec<f64>, TokenizerError> {
        let pooled = self.pooled(image)?;
        let x = Tensor::new(vec![1, pooled.len()], pooled)?;
        Ok(kernels::linear(&x, &self.map, None)?.into_data())
    }
}

/// Precomputed features keyed by image name, read from an embedding file
/// of feature rows.
#[derive(Clone, Debug)]
pub struct FeatureFile {
    index: HashMap<String, usize>,
    table: EmbeddingTable,
}

impl FeatureFile {
    pub fn new(names: Vec<String>, table: EmbeddingTable) -> Result<Self, TokenizerError> {
        if names.len() != table.rows() {
            return Err(TokenizerError::Shape(format!(
                "{} names for {} feature rows",
                names.len(),
                table.rows()
            )));
        }
        let index = names.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        Ok(Self { index, table })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file = load_embeddings(path)?;
        match file.entries {
            Entries::Features(v) => Self::new(v.entries().to_vec(), file.table),
            _ => Err(TokenizerError::Format(format!(
                "{} holds vocabulary rows, not image features",
                path.display()
            ))),
        }
    }
}

impl GlobalFeatures for FeatureFile {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn feature(&self, key: &str, _image: &Tensor) -> Result<Vec<f64>, TokenizerError> {
        let row = self
            .index
            .get(key)
            .ok_or_else(|| TokenizerError::MissingGlobal(key.to_string()))?;
        Ok(self.table.row(*row).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_extractor_is_deterministic_and_sized() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let a = ToyExtractor::new(12, 4, 3).feature("x", &img).unwrap();
        let b = ToyExtractor::new(12, 4, 3).feature("y", &img).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let c = ToyExtractor::new(12, 4, 4).feature("x", &img).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn feature_file_lookup() {
        let t = EmbeddingTable::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = FeatureFile::new(vec!["a".into(), "b".into()], t).unwrap();
        let img = Tensor::zeros(&[3, 8, 8]);
        assert_eq!(f.feature("b", &img).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(f.feature("c", &img), Err(TokenizerError::MissingGlobal(_))));
    }
}
