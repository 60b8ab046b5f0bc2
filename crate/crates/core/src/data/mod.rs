//! Image containers, proxy-dataset construction and batch assembly.

mod augment;
mod container;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{
    augment_pixels, augment_train, center_view, hflip, normalize, resize_crop, sample_crop,
    AugRecipe, Crop,
};
pub use container::{meta_path, DatasetContainer, Image, NormStats, HEADER_LEN, MIN_STD};
pub use synth::{
    class_split, gen_single_image_dataset, gen_source_image, gen_toy_dataset, merge, permutation,
    pick_classes,
    subsample, SubsampleMode, ToySpec,
};

use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub fn load_container(path: impl AsRef<std::path::Path>) -> Result<DatasetContainer> {
    DatasetContainer::load(path)
}

pub fn save_container(ds: &DatasetContainer, path: impl AsRef<std::path::Path>) -> Result<()> {
    ds.save(path)
}

/// Index batches for one epoch: a permutation drawn from `(seed, epoch)`
/// alone, cut into chunks of `batch_size` (the last may be shorter).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    permutation(n, &mut rng)
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// How images are turned into network input.
#[derive(Clone, Copy, Debug)]
pub enum View<'a> {
    /// Full frame resized to the given size; no randomness.
    Center(usize),
    /// Random training augmentation.
    Train(&'a AugRecipe),
}

/// `B×C×S×S` input for the images at `indices`. Sample `i` of the batch
/// uses its own generator derived from `(batch_seed, i)`, so the result
/// does not depend on how many threads assemble it.
pub fn make_batch<T: Element>(
    ds: &DatasetContainer,
    indices: &[usize],
    view: View,
    stats: &NormStats,
    batch_seed: u64,
) -> Result<Tensor<T>> {
    let size = match view {
        View::Center(s) => s,
        View::Train(r) => {
            r.validate()?;
            r.output_size
        }
    };
    let per: Vec<Vec<T>> = indices
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let img = ds.image(idx);
            match view {
                View::Center(s) => center_view(&img, s, stats),
                View::Train(r) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                    rng.set_stream(i as u64);
                    augment_train(&img, r, stats, &mut rng)
                }
            }
        })
        .collect();
    let data = per.into_iter().flatten().collect();
    Tensor::new(vec![indices.len(), ds.channels(), size, size], data)
}

/// Labels at `indices`, if the container has any.
pub fn batch_labels(ds: &DatasetContainer, indices: &[usize]) -> Option<Vec<u16>> {
    ds.labels().map(|l| indices.iter().map(|&i| l[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_cover_every_index_once() {
        let b = epoch_batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 4, 1, 1), b);
        assert_eq!(epoch_batches(10, 4, 1, 0), b);
    }

    #[test]
    fn batches_are_thread_count_independent() {
        let ds = gen_toy_dataset(&ToySpec {
            per_class: 4,
            ..ToySpec::default()
        })
        .unwrap();
        let stats = ds.channel_stats();
        let recipe = AugRecipe::default();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a: Tensor<f32> = one
            .install(|| make_batch(&ds, &idx, View::Train(&recipe), &stats, 5))
            .unwrap();
        let b: Tensor<f32> = four
            .install(|| make_batch(&ds, &idx, View::Train(&recipe), &stats, 5))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[40, 3, 16, 16]);
    }
}
