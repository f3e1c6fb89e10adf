//! Network architectures, parameter storage, and training.

pub mod densenet;
pub mod store;
pub mod train;
pub mod unet;

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synth::AugmentParams;
use crate::tensor::Tensor;

pub use densenet::{DenseNetOutput, MiniDenseNet, MiniDenseNetConfig};
pub use store::{load_params, save_params, ParamStore};
pub use train::{
    defined_mean_auc, grouped_validation_split, select_best_epoch, train_classifier,
    train_segmenter, ClassifierSample, EpochStats, SegmenterSample,
};
pub use unet::{MiniUNet, MiniUNetConfig};

/// Optimizer and loop settings for one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub augment: AugmentParams,
    /// Fraction of items moved (by whole groups) into the validation split.
    pub validation_fraction: f64,
}

impl TrainConfig {
    /// Classification recipe: Adam 1e-4 with 1e-5 decay, batch 16, up to
    /// 100 epochs, plateau patience 5 with factor 10, flip augmentation.
    pub fn classifier_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay: 1e-5,
            batch_size: 16,
            max_epochs: 100,
            plateau_patience: 5,
            plateau_factor: 10.0,
            seed,
            augment: AugmentParams::flip_default(),
            validation_fraction: 0.1,
        }
    }

    /// Segmentation recipe: Adam 1e-3, batch 8, up to 100 epochs, affine
    /// augmentation.
    pub fn segmenter_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            decay: 0.0,
            batch_size: 8,
            max_epochs: 100,
            plateau_patience: 5,
            plateau_factor: 10.0,
            seed,
            augment: AugmentParams::affine_default(),
            validation_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.decay < 0.0 {
            return Err(Error::InvalidConfig("decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be > 0".into()));
        }
        if self.plateau_factor <= 1.0 || self.plateau_patience == 0 {
            return Err(Error::InvalidConfig(
                "plateau_factor must exceed 1 and plateau_patience must be > 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::InvalidConfig("validation_fraction must be in (0,1)".into()));
        }
        Ok(())
    }
}

/// A trained network: architecture config, the checkpointed parameters, the
/// per-epoch history, and which epoch the checkpoint came from.
#[derive(Clone, Debug)]
pub struct TrainedModel<Cfg> {
    pub config: Cfg,
    pub params: ParamStore,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Value of the checkpoint-selection metric at `best_epoch` (mean AUC
    /// for classifiers, validation loss for segmenters).
    pub best_metric: f64,
}

impl TrainedModel<MiniDenseNetConfig> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.config.echo(), &self.params)
    }

    pub fn load(path: &Path, config: &MiniDenseNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = MiniDenseNet::init(config.clone(), 0)?.params;
        let params = load_params(path, &config.echo(), layout)?;
        Ok(TrainedModel {
            config: config.clone(),
            params,
            history: Vec::new(),
            best_epoch: 0,
            best_metric: f64::NAN,
        })
    }

    pub fn network(&self) -> MiniDenseNet {
        MiniDenseNet { config: self.config.clone(), params: self.params.clone() }
    }
}

impl TrainedModel<MiniUNetConfig> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.config.echo(), &self.params)
    }

    pub fn load(path: &Path, config: &MiniUNetConfig) -> Result<Self> {
        config.validate()?;
        let layout = MiniUNet::init(config.clone(), 0)?.params;
        let params = load_params(path, &config.echo(), layout)?;
        Ok(TrainedModel {
            config: config.clone(),
            params,
            history: Vec::new(),
            best_epoch: 0,
            best_metric: f64::NAN,
        })
    }

    pub fn network(&self) -> MiniUNet {
        MiniUNet { config: self.config.clone(), params: self.params.clone() }
    }
}

/// Stack same-extent grayscale images into an [N,1,H,W] batch tensor.
pub fn batch_from_images(images: &[GrayImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {w}x{h} and {}x{} images",
                img.width, img.height
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), 1, h, w], data)
}
