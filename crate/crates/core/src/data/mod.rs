//! Datasets, class splits, episodes and the synthetic patch-cue generator.

mod augment;
mod cifar;
mod episode;
mod manifest;
mod patchcue;
mod prepare;

pub use augment::augment_batch;
pub use cifar::{load_cifar_binary, parse_cifar, write_cifar_binary, CIFAR_HW, CIFAR_RECORD};
pub use episode::{sample_episode, Episode, EpisodeSampler};
pub use manifest::{read_dataset_dir, write_dataset_dir, Manifest};
pub use patchcue::{class_template, generate_patchcue, nearest_template, PatchCueParams, MAX_PATCHCUE_CLASSES};
pub use prepare::{generate_configured, patchcue_params, prepare, split_for_mode, Prepared};

use rand::seq::SliceRandom;
use rand::Rng;
use rap_autodiff::{Float, Tensor};

use crate::error::{RapError, Result};

/// Location of the informative patch in a synthetic image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.size).contains(&row) && (self.col..self.col + self.size).contains(&col)
    }
}

/// Images kept as bytes (`value / 255` is the pixel in `[0, 1]`), NHWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    hw: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
    patches: Option<Vec<PatchBox>>,
}

impl Dataset {
    pub fn new(hw: usize, pixels: Vec<u8>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if pixels.len() != labels.len() * hw * hw * 3 {
            return Err(RapError::Dataset(format!(
                "{} pixel bytes for {} images of {hw}x{hw}x3",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(RapError::Dataset(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(Self {
            hw,
            pixels,
            labels,
            num_classes,
            patches: None,
        })
    }

    pub fn with_patches(mut self, patches: Vec<PatchBox>) -> Result<Self> {
        if patches.len() != self.len() {
            return Err(RapError::Dataset(format!(
                "{} patch boxes for {} images",
                patches.len(),
                self.len()
            )));
        }
        self.patches = Some(patches);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hw(&self) -> usize {
        self.hw
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn patches(&self) -> Option<&[PatchBox]> {
        self.patches.as_deref()
    }

    pub fn image_bytes(&self, index: usize) -> &[u8] {
        let n = self.hw * self.hw * 3;
        &self.pixels[index * n..(index + 1) * n]
    }

    /// `[indices.len(), hw, hw, 3]` with pixels in `[0, 1]`.
    pub fn batch<F: Float>(&self, indices: &[usize]) -> Tensor<F> {
        let n = self.hw * self.hw * 3;
        let scale = F::from_f64_lossy(255.0);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image_bytes(i).iter().map(|&b| F::from_f64_lossy(b as f64) / scale));
        }
        Tensor::new(vec![indices.len(), self.hw, self.hw, 3], data).expect("batch shape")
    }

    /// Image indices per class id, in dataset order.
    pub fn class_index(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

/// Disjoint sets of ids (classes in few-shot mode, images in
/// classification mode).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSets {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSets {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut all: Vec<usize> = self.train.iter().chain(&self.val).chain(&self.test).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n
    }
}

/// Bucket sizes for `n` items under integer `ratios`: largest-remainder
/// rounding, with every nonzero ratio receiving at least one item.
pub fn ratio_counts(n: usize, ratios: &[u32]) -> Result<Vec<usize>> {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let nonzero = ratios.iter().filter(|&&r| r > 0).count();
    if total == 0 {
        return Err(RapError::InvalidConfig("split ratios must not all be zero".into()));
    }
    if n < nonzero {
        return Err(RapError::InvalidConfig(format!(
            "{n} items cannot fill {nonzero} nonzero split buckets"
        )));
    }
    let mut counts: Vec<usize> = ratios.iter().map(|&r| (n as u64 * r as u64 / total) as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // descending remainder, then ascending index
    order.sort_by_key(|&i| (std::cmp::Reverse(n as u64 * ratios[i] as u64 % total), i));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..ratios.len() {
        if ratios[i] > 0 && counts[i] == 0 {
            let donor = (0..counts.len()).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Shuffles `0..n` and cuts it into buckets sized by [`ratio_counts`].
/// Each bucket is returned sorted.
pub fn partition(n: usize, ratios: &[u32], rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let counts = ratio_counts(n, ratios)?;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for c in counts {
        let mut bucket = ids[start..start + c].to_vec();
        bucket.sort_unstable();
        out.push(bucket);
        start += c;
    }
    Ok(out)
}

fn into_sets(mut buckets: Vec<Vec<usize>>) -> Result<SplitSets> {
    if !(2..=3).contains(&buckets.len()) {
        return Err(RapError::InvalidConfig(format!(
            "expected 2 or 3 split ratios, got {}",
            buckets.len()
        )));
    }
    let test = if buckets.len() == 3 {
        buckets.pop().unwrap()
    } else {
        Vec::new()
    };
    let val = buckets.pop().unwrap();
    let train = buckets.pop().unwrap();
    Ok(SplitSets { train, val, test })
}

/// Few-shot mode: assigns whole classes to train/val/test.
pub fn split_classes(num_classes: usize, ratios: &[u32], rng: &mut impl Rng) -> Result<SplitSets> {
    into_sets(partition(num_classes, ratios, rng)?)
}

/// Classification mode: assigns individual images (e.g. 4:1 train:val).
pub fn split_images(count: usize, ratios: &[u32], rng: &mut impl Rng) -> Result<SplitSets> {
    into_sets(partition(count, ratios, rng)?)
}
