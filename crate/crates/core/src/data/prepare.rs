use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    generate_patchcue, load_cifar_binary, read_dataset_dir, split_classes, split_images, Dataset, PatchCueParams, SplitSets,
};
use crate::config::{DataConfig, DataSource, RunConfig, TrainMode};
use crate::error::{RapError, Result};

/// Data for a run: the training dataset, its split and an optional
/// separate test set (CIFAR test batch).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    /// Class ids in few-shot mode, image indices in classification mode.
    pub split: SplitSets,
    pub test_data: Option<Dataset>,
}

impl Prepared {
    /// Test images for classification mode.
    pub fn test_images(&self) -> (&Dataset, Vec<usize>) {
        match &self.test_data {
            Some(t) => (t, (0..t.len()).collect()),
            None => (&self.data, self.split.test.clone()),
        }
    }
}

fn data_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn patchcue_params(cfg: &DataConfig) -> PatchCueParams {
    PatchCueParams {
        num_classes: cfg.num_classes,
        images_per_class: cfg.images_per_class,
        hw: cfg.hw,
        patch_size: cfg.patch_size,
        clutter: cfg.clutter,
        noise: cfg.noise,
        with_patch: true,
    }
}

/// Generates the configured patch-cue dataset (seeded by `data.seed`).
pub fn generate_configured(cfg: &DataConfig) -> Result<Dataset> {
    generate_patchcue(&patchcue_params(cfg), &mut data_rng(cfg.seed, 0))
}

/// Splits `data` by class or by image, depending on the mode.
pub fn split_for_mode(data: &Dataset, cfg: &DataConfig, mode: TrainMode) -> Result<SplitSets> {
    let mut rng = data_rng(cfg.seed, 1);
    match mode {
        TrainMode::FewShot => split_classes(data.num_classes(), &cfg.split, &mut rng),
        TrainMode::Classification => split_images(data.len(), &cfg.split, &mut rng),
    }
}

fn required<'a>(path: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a std::path::Path> {
    path.as_deref().ok_or_else(|| RapError::BadValue {
        key: key.to_string(),
        reason: "required for this data source".into(),
    })
}

/// Loads or generates the data described by `cfg`.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dc = &cfg.data;
    let (data, split, test_data) = match dc.source {
        DataSource::PatchCue => {
            let data = generate_configured(dc)?;
            let split = split_for_mode(&data, dc, cfg.train.mode)?;
            (data, split, None)
        }
        DataSource::Cifar => {
            let data = load_cifar_binary(required(&dc.path, "data.path")?, dc.num_classes)?;
            let split = split_for_mode(&data, dc, cfg.train.mode)?;
            let test = dc
                .test_path
                .as_deref()
                .map(|p| load_cifar_binary(p, dc.num_classes))
                .transpose()?;
            (data, split, test)
        }
        DataSource::Dir => {
            let (data, split, _) = read_dataset_dir(required(&dc.path, "data.path")?)?;
            (data, split, None)
        }
    };
    if data.hw() != cfg.backbone.input_hw {
        return Err(RapError::InvalidConfig(format!(
            "images are {0}x{0} but the backbone expects {1}x{1}",
            data.hw(),
            cfg.backbone.input_hw
        )));
    }
    Ok(Prepared { data, split, test_data })
}
