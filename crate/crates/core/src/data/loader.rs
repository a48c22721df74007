use std::borrow::Cow;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use super::image_io::{write_window, CropMode, CropWindow, LoadedImage, Normalization};
use super::manifest::{Manifest, ScoreScale};
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum ImageStore {
    Memory(Vec<LoadedImage>),
    Disk(Vec<PathBuf>),
}

/// Images of one domain, optionally with labels in `[0, 5]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: ImageStore,
    labels: Option<Vec<f64>>,
}

/// A preprocessed minibatch: `(B, 3, crop, crop)` images.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<f64>>,
    pub indices: Vec<usize>,
}

impl Dataset {
    fn open(manifest: &Manifest, labels: Option<Vec<f64>>, cache: bool) -> Result<Self> {
        let images = if cache {
            let imgs = manifest
                .records
                .iter()
                .map(|r| LoadedImage::open(&r.path))
                .collect::<Result<Vec<_>>>()?;
            ImageStore::Memory(imgs)
        } else {
            ImageStore::Disk(manifest.paths())
        };
        Ok(Self { images, labels })
    }

    /// Source-domain data: every record must carry a score.
    pub fn labeled(manifest: &Manifest, scale: &ScoreScale, cache: bool) -> Result<Self> {
        let labels = manifest.scores(scale)?;
        Self::open(manifest, Some(labels), cache)
    }

    /// Images only; any score column is dropped.
    pub fn unlabeled(manifest: &Manifest, cache: bool) -> Result<Self> {
        Self::open(manifest, None, cache)
    }

    /// The same images with labels removed.
    pub fn without_labels(&self) -> Self {
        Self {
            images: self.images.clone(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        match &self.images {
            ImageStore::Memory(v) => v.len(),
            ImageStore::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn path(&self, index: usize) -> PathBuf {
        match &self.images {
            ImageStore::Memory(v) => v[index].path.clone(),
            ImageStore::Disk(v) => v[index].clone(),
        }
    }

    fn image(&self, index: usize) -> Result<Cow<'_, LoadedImage>> {
        Ok(match &self.images {
            ImageStore::Memory(v) => Cow::Borrowed(&v[index]),
            ImageStore::Disk(v) => Cow::Owned(LoadedImage::open(&v[index])?),
        })
    }

    /// Crops, flips (train mode) and normalizes the listed samples. Crop
    /// windows are drawn in `indices` order.
    pub fn batch<R: Rng>(
        &self,
        indices: &[usize],
        mode: CropMode,
        crop: usize,
        norm: &Normalization,
        rng: &mut R,
    ) -> Result<Batch> {
        if indices.is_empty() {
            return Err(input_err!("empty batch"));
        }
        let per = 3 * crop * crop;
        let mut data = vec![0.0f32; indices.len() * per];
        for (slot, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(input_err!("sample index {i} out of range for {} samples", self.len()));
            }
            let img = self.image(i)?;
            let win = CropWindow::choose(&img, mode, crop, rng)?;
            write_window(&img, win, norm, &mut data[slot * per..(slot + 1) * per]);
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Batch {
            images: Tensor::new(&[indices.len(), 3, crop, crop], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }
}

pub fn epoch_order<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Shuffled full batches over one domain; the incomplete tail is dropped
/// unless the domain is smaller than a batch.
pub fn single_epoch<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let order = epoch_order(n, rng);
    if n < batch {
        return vec![order];
    }
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

/// Paired source/target batches for one adaptation epoch. The epoch covers
/// the longer domain once; the shorter one cycles through fresh
/// permutations.
pub fn paired_epoch<R: Rng>(n_source: usize, n_target: usize, batch: usize, rng: &mut R) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if n_source == 0 || n_target == 0 || batch == 0 {
        return Err(input_err!(
            "paired epoch over {n_source} source / {n_target} target samples with batch {batch}"
        ));
    }
    let b = batch.min(n_source).min(n_target);
    let steps = (n_source.max(n_target) / b).max(1);
    let stream = |n: usize, rng: &mut R| {
        let mut out = Vec::with_capacity(steps * b);
        while out.len() < steps * b {
            out.extend(epoch_order(n, rng));
        }
        out.truncate(steps * b);
        out
    };
    let s = stream(n_source, rng);
    let t = stream(n_target, rng);
    Ok(s.chunks_exact(b).zip(t.chunks_exact(b)).map(|(a, c)| (a.to_vec(), c.to_vec())).collect())
}

/// Consecutive batches covering every sample once, in order.
pub fn sequential_batches(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paired_epoch_cycles_shorter_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = paired_epoch(10, 25, 4, &mut rng).unwrap();
        assert_eq!(pairs.len(), 6);
        let mut target: Vec<usize> = pairs.iter().flat_map(|p| p.1.clone()).collect();
        target.sort_unstable();
        target.dedup();
        assert_eq!(target.len(), 24);
        let source: Vec<usize> = pairs.iter().flat_map(|p| p.0.clone()).collect();
        assert_eq!(source.len(), 24);
        // the first permutation of the source covers all 10 samples
        let mut first: Vec<usize> = source[..10].to_vec();
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn orders_are_seeded() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (single_epoch(37, 8, &mut rng), paired_epoch(37, 20, 8, &mut rng).unwrap())
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).0, run(4).0);
        assert_eq!(run(3).0.len(), 4);
    }

    #[test]
    fn sequential_keeps_tail() {
        assert_eq!(sequential_batches(5, 2), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }
}
