//! Training loops for the classifier and the segmenter.
//!
//! Both minimize their loss with Adam under a reduce-on-plateau schedule and
//! keep the checkpoint the paper's rule selects: highest validation mean AUC
//! for the classifier, smallest validation loss for the segmenter. Every
//! random choice derives from the run seed, so a rerun reproduces the
//! parameter store bit for bit.

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::labels::{LabelVector, NUM_CLASSES};
use crate::lrg::BinaryMask;
use crate::metrics::roc_auc;
use crate::networks::densenet::{MiniDenseNet, MiniDenseNetConfig};
use crate::networks::unet::{MiniUNet, MiniUNetConfig};
use crate::networks::{batch_from_images, TrainConfig, TrainedModel};
use crate::rng::{derive_seed, Rng};
use crate::synth::{augment, sample_augment, AugmentSample};
use crate::tensor::loss::BCE_EPS;
use crate::tensor::optim::{AdamConfig, AdamState, PlateauScheduler};
use crate::tensor::Tape;

/// One classification example at model input extent.
#[derive(Clone, Debug)]
pub struct ClassifierSample {
    pub image: GrayImage,
    pub labels: LabelVector,
    /// Grouping key for the validation split (patient identifier).
    pub group: String,
}

/// One segmentation example at model input extent.
#[derive(Clone, Debug)]
pub struct SegmenterSample {
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub group: String,
}

/// Per-epoch record kept in the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean AUC over validation classes with both labels present; None when
    /// no class is scoreable (tiny smoke corpora).
    pub val_mean_auc: Option<f64>,
    pub lr_scale: f64,
}

/// Group-aware validation split: whole groups go to validation until the
/// requested item fraction is covered.
pub fn grouped_validation_split(
    groups: &[String],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if groups.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        match names.iter().position(|n| *n == g.as_str()) {
            Some(k) => members[k].push(i),
            None => {
                names.push(g);
                members.push(vec![i]);
            }
        }
    }
    if members.len() < 2 {
        return Err(Error::InvalidConfig(
            "need at least two groups for a disjoint train/validation split".into(),
        ));
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    Rng::new(derive_seed(seed, 0x5B117)).shuffle(&mut order);
    let want = ((groups.len() as f64 * fraction).ceil() as usize).max(1);
    let mut val = Vec::new();
    let mut train = Vec::new();
    let mut val_count = 0usize;
    for &g in &order {
        // Keep at least one group on the training side.
        if val_count < want && val.len() + 1 < members.len() {
            val_count += members[g].len();
            val.push(g);
        } else {
            train.push(g);
        }
    }
    let mut train_idx: Vec<usize> = train.iter().flat_map(|&g| members[g].clone()).collect();
    let mut val_idx: Vec<usize> = val.iter().flat_map(|&g| members[g].clone()).collect();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((train_idx, val_idx))
}

/// Index of the best epoch (0-based): argmax of the metric when maximizing,
/// argmin otherwise; earliest wins ties.
pub fn select_best_epoch(metric: &[f64], maximize: bool) -> usize {
    let mut best = 0usize;
    for (i, &v) in metric.iter().enumerate() {
        let better = if maximize { v > metric[best] } else { v < metric[best] };
        if better {
            best = i;
        }
    }
    best
}

fn adam_config(tc: &TrainConfig) -> AdamConfig {
    AdamConfig { learning_rate: tc.learning_rate, decay: tc.decay, ..AdamConfig::default() }
}

fn flatten_targets(samples: &[&ClassifierSample]) -> Vec<f64> {
    let mut t = Vec::with_capacity(samples.len() * NUM_CLASSES);
    for s in samples {
        t.extend_from_slice(s.labels.as_slice());
    }
    t
}

/// Mean AUC over the classes that have both a positive and a negative
/// validation label.
pub fn defined_mean_auc(probs: &[f64], truths: &[LabelVector]) -> Option<f64> {
    let mut sum = 0.0;
    let mut defined = 0usize;
    for c in 0..NUM_CLASSES {
        let scores: Vec<f64> = (0..truths.len()).map(|i| probs[i * NUM_CLASSES + c]).collect();
        let labels: Vec<bool> = truths.iter().map(|t| t[c] != 0.0).collect();
        if let Ok((_, auc)) = roc_auc(&scores, &labels) {
            sum += auc;
            defined += 1;
        }
    }
    (defined > 0).then(|| sum / defined as f64)
}

/// Train the densely-connected classifier on a labeled image set.
///
/// Augmentation: random horizontal flipping only (labels are flip
/// invariant). Plateau rule: validation loss stalling for `plateau_patience`
/// epochs divides the learning rate by `plateau_factor`. The returned model
/// carries the parameters of the epoch with the highest validation mean AUC.
pub fn train_classifier(
    config: &MiniDenseNetConfig,
    data: &[ClassifierSample],
    tc: &TrainConfig,
) -> Result<TrainedModel<MiniDenseNetConfig>> {
    config.validate()?;
    tc.validate()?;
    for s in data {
        if s.image.width != config.input_size || s.image.height != config.input_size {
            return Err(Error::ShapeMismatch(format!(
                "sample image {}x{} does not match input_size {}",
                s.image.width, s.image.height, config.input_size
            )));
        }
        if !s.labels.is_binary() {
            return Err(Error::InvalidConfig("training labels must be 0/1".into()));
        }
    }
    let groups: Vec<String> = data.iter().map(|s| s.group.clone()).collect();
    let (train_idx, val_idx) = grouped_validation_split(&groups, tc.validation_fraction, tc.seed)?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig("empty train or validation split".into()));
    }

    let mut net = MiniDenseNet::init(config.clone(), tc.seed)?;
    let mut adam = AdamState::new(&net.params.trainable_sizes(), adam_config(tc));
    let mut scheduler = PlateauScheduler::new(tc.plateau_patience, tc.plateau_factor);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best: Option<(f64, usize, crate::networks::store::ParamStore)> = None;
    let mut best_loss: Option<(f64, usize, crate::networks::store::ParamStore)> = None;

    for epoch in 1..=tc.max_epochs {
        let mut order = train_idx.clone();
        Rng::new(derive_seed(tc.seed, 0xE000 + epoch as u64)).shuffle(&mut order);
        let mut aug_rng = Rng::new(derive_seed(tc.seed, 0xA000 + epoch as u64));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&ClassifierSample> = chunk.iter().map(|&i| &data[i]).collect();
            let images: Vec<GrayImage> = batch
                .iter()
                .map(|s| {
                    let sample = sample_augment(&tc.augment, &mut aug_rng, s.image.width);
                    let flip_only = AugmentSample { flip: sample.flip, ..AugmentSample::identity() };
                    augment(&s.image, None, &flip_only).0
                })
                .collect();
            let input = batch_from_images(&images)?;
            let mut tape = Tape::new();
            let input = tape.leaf(input);
            let nodes = net.forward(&mut tape, input, true)?;
            let targets = flatten_targets(&batch);
            let loss = tape.bce(nodes.probs, &targets, BCE_EPS)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss_val} at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;

            let grads: Vec<Vec<f64>> = nodes
                .bindings
                .iter()
                .map(|&(_, node)| {
                    tape.grad(node).map(<[f64]>::to_vec).unwrap_or_else(|| {
                        vec![0.0; tape.tensor(node).numel()]
                    })
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut param_refs: Vec<&mut [f64]> = Vec::with_capacity(grads.len());
            // bindings follow declaration order, so pairing with the
            // trainable entries in store order is sound.
            let trainable_ids: Vec<usize> = nodes.bindings.iter().map(|&(id, _)| id).collect();
            let entries = net.params.entries_mut();
            let mut cursor = 0usize;
            for (id, entry) in entries.iter_mut().enumerate() {
                if cursor < trainable_ids.len() && trainable_ids[cursor] == id {
                    param_refs.push(entry.data.as_mut_slice());
                    cursor += 1;
                }
            }
            adam.step(&mut param_refs, &grad_refs, scheduler.lr_scale())?;

            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        // Validation pass (inference mode, no augmentation).
        let mut val_probs = Vec::with_capacity(val_idx.len() * NUM_CLASSES);
        let mut val_truth = Vec::with_capacity(val_idx.len());
        let mut val_loss_sum = 0.0;
        for chunk in val_idx.chunks(tc.batch_size) {
            let images: Vec<GrayImage> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            let out = net.predict(batch_from_images(&images)?)?;
            for (k, &i) in chunk.iter().enumerate() {
                let row = &out.probs.data[k * NUM_CLASSES..(k + 1) * NUM_CLASSES];
                val_loss_sum +=
                    crate::tensor::loss::bce_slices(data[i].labels.as_slice(), row)?;
                val_probs.extend_from_slice(row);
                val_truth.push(data[i].labels);
            }
        }
        let val_loss = val_loss_sum / val_idx.len() as f64;
        let val_mean_auc = defined_mean_auc(&val_probs, &val_truth);

        if let Some(auc) = val_mean_auc {
            if best.as_ref().map_or(true, |(b, _, _)| auc > *b) {
                best = Some((auc, epoch, net.params.clone()));
            }
        }
        if best_loss.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best_loss = Some((val_loss, epoch, net.params.clone()));
        }

        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_mean_auc,
            lr_scale: scheduler.lr_scale(),
        });
        scheduler.observe(val_loss);
    }

    // Highest validation mean AUC; when no epoch could score an AUC,
    // fall back to the smallest validation loss.
    let (metric, best_epoch, params) = best
        .or(best_loss)
        .expect("at least one epoch ran");
    Ok(TrainedModel { config: config.clone(), params, history, best_epoch, best_metric: metric })
}

/// Train the encoder-decoder segmenter on image/mask pairs.
///
/// Augmentation: affine (rotation, shift, zoom) applied identically to the
/// image and its mask. The returned model carries the parameters of the
/// epoch with the smallest validation loss.
pub fn train_segmenter(
    config: &MiniUNetConfig,
    data: &[SegmenterSample],
    tc: &TrainConfig,
) -> Result<TrainedModel<MiniUNetConfig>> {
    config.validate()?;
    tc.validate()?;
    for s in data {
        if s.image.width != config.input_size
            || s.image.height != config.input_size
            || s.mask.width() != config.input_size
            || s.mask.height() != config.input_size
        {
            return Err(Error::ShapeMismatch(format!(
                "sample {}x{} / mask {}x{} does not match input_size {}",
                s.image.width,
                s.image.height,
                s.mask.width(),
                s.mask.height(),
                config.input_size
            )));
        }
    }
    let groups: Vec<String> = data.iter().map(|s| s.group.clone()).collect();
    let (train_idx, val_idx) = grouped_validation_split(&groups, tc.validation_fraction, tc.seed)?;

    let mut net = MiniUNet::init(config.clone(), tc.seed)?;
    let mut adam = AdamState::new(&net.params.trainable_sizes(), adam_config(tc));
    let mut scheduler = PlateauScheduler::new(tc.plateau_patience, tc.plateau_factor);
    let mut history: Vec<EpochStats> = Vec::new();
    let mut best: Option<(f64, usize, crate::networks::store::ParamStore)> = None;

    for epoch in 1..=tc.max_epochs {
        let mut order = train_idx.clone();
        Rng::new(derive_seed(tc.seed, 0xE000 + epoch as u64)).shuffle(&mut order);
        let mut aug_rng = Rng::new(derive_seed(tc.seed, 0xA000 + epoch as u64));

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len() * config.input_size.pow(2));
            for &i in chunk {
                let s = &data[i];
                let transform = sample_augment(&tc.augment, &mut aug_rng, s.image.width);
                // Geometry must stay aligned with the mask; flips are not
                // part of the segmentation recipe.
                let transform = AugmentSample { flip: false, ..transform };
                let (img, mask) = augment(&s.image, Some(&s.mask), &transform);
                images.push(img);
                targets
                    .extend(mask.unwrap().bits().iter().map(|&b| f64::from(b)));
            }
            let input = batch_from_images(&images)?;
            let mut tape = Tape::new();
            let input = tape.leaf(input);
            let nodes = net.forward(&mut tape, input, true)?;
            let loss = tape.bce(nodes.probs, &targets, BCE_EPS)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss_val} at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;

            let grads: Vec<Vec<f64>> = nodes
                .bindings
                .iter()
                .map(|&(_, node)| {
                    tape.grad(node).map(<[f64]>::to_vec).unwrap_or_else(|| {
                        vec![0.0; tape.tensor(node).numel()]
                    })
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let trainable_ids: Vec<usize> = nodes.bindings.iter().map(|&(id, _)| id).collect();
            let mut param_refs: Vec<&mut [f64]> = Vec::with_capacity(grads.len());
            let entries = net.params.entries_mut();
            let mut cursor = 0usize;
            for (id, entry) in entries.iter_mut().enumerate() {
                if cursor < trainable_ids.len() && trainable_ids[cursor] == id {
                    param_refs.push(entry.data.as_mut_slice());
                    cursor += 1;
                }
            }
            adam.step(&mut param_refs, &grad_refs, scheduler.lr_scale())?;

            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        let mut val_loss_sum = 0.0;
        for chunk in val_idx.chunks(tc.batch_size) {
            let images: Vec<GrayImage> = chunk.iter().map(|&i| data[i].image.clone()).collect();
            let probs = net.predict(batch_from_images(&images)?)?;
            let plane = config.input_size * config.input_size;
            for (k, &i) in chunk.iter().enumerate() {
                let row = &probs.data[k * plane..(k + 1) * plane];
                val_loss_sum += crate::tensor::loss::pixelwise_ce(&data[i].mask, row)?;
            }
        }
        let val_loss = val_loss_sum / val_idx.len() as f64;

        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.params.clone()));
        }
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_mean_auc: None,
            lr_scale: scheduler.lr_scale(),
        });
        scheduler.observe(val_loss);
    }

    let (metric, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainedModel { config: config.clone(), params, history, best_epoch, best_metric: metric })
}
