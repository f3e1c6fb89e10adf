//! Dual-path assembly: two frozen feature extractors feed a trainable
//! fusion head, plus class-activation-map generation from the fusion
//! weights and the extractors' final feature maps.

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, GrayImage};
use crate::labels::{LabelVector, NUM_CLASSES};
use crate::lrg::BoundingBox;
use crate::networks::{
    batch_from_images, defined_mean_auc, MiniDenseNetConfig, ParamStore, TrainConfig,
    TrainedModel,
};
use crate::rng::{derive_seed, Rng};
use crate::synth::hflip;
use crate::tensor::loss::BCE_EPS;
use crate::tensor::optim::{AdamConfig, AdamState, PlateauScheduler};
use crate::tensor::{sigmoid_scalar, Tape, Tensor};

/// The assembled dual-path model. Both extractors stay frozen; only the
/// fusion weights and biases train.
#[derive(Clone, Debug)]
pub struct SdfnModel {
    pub extractor_global: TrainedModel<MiniDenseNetConfig>,
    pub extractor_local: TrainedModel<MiniDenseNetConfig>,
    /// Row-major [14, K_global + K_local].
    pub fusion_weights: Vec<f64>,
    pub fusion_bias: Vec<f64>,
    pub frozen_global: bool,
    pub frozen_local: bool,
}

/// Raw or rescaled activation map.
#[derive(Clone, Debug, PartialEq)]
pub enum HeatmapRange {
    Raw,
    Rescaled0To255,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub range: HeatmapRange,
}

impl Heatmap {
    pub fn raw(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "heatmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("heatmap values must be finite".into()));
        }
        Ok(Heatmap { width, height, values, range: HeatmapRange::Raw })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn as_image(&self) -> GrayImage {
        GrayImage { width: self.width, height: self.height, data: self.values.clone() }
    }
}

impl SdfnModel {
    /// Assemble from two trained extractors with zero-initialized fusion
    /// head (He-initialized by `train_fusion`).
    pub fn new(
        extractor_global: TrainedModel<MiniDenseNetConfig>,
        extractor_local: TrainedModel<MiniDenseNetConfig>,
    ) -> Self {
        let width = extractor_global.config.feature_dim + extractor_local.config.feature_dim;
        SdfnModel {
            extractor_global,
            extractor_local,
            fusion_weights: vec![0.0; NUM_CLASSES * width],
            fusion_bias: vec![0.0; NUM_CLASSES],
            frozen_global: true,
            frozen_local: true,
        }
    }

    pub fn concat_width(&self) -> usize {
        self.extractor_global.config.feature_dim + self.extractor_local.config.feature_dim
    }

    /// GAP features of both paths for one (whole image, lung crop) pair,
    /// concatenated global-then-local.
    pub fn features(&self, whole_image: &GrayImage, lung_crop: &GrayImage) -> Result<Vec<f64>> {
        let mut global = self.extractor_global.network();
        let mut local = self.extractor_local.network();
        let g = global.predict(batch_from_images(&[whole_image.clone()])?)?;
        let l = local.predict(batch_from_images(&[lung_crop.clone()])?)?;
        let mut out = g.gap.data;
        out.extend_from_slice(&l.gap.data);
        Ok(out)
    }

    /// Forward pass: sigmoid(fusion_weights . concat(GAP_g, GAP_l) + bias).
    pub fn forward(&self, whole_image: &GrayImage, lung_crop: &GrayImage) -> Result<LabelVector> {
        let feats = self.features(whole_image, lung_crop)?;
        Ok(self.head(&feats))
    }

    /// Fusion head on precomputed concatenated features.
    pub fn head(&self, features: &[f64]) -> LabelVector {
        let width = self.concat_width();
        debug_assert_eq!(features.len(), width);
        let mut probs = LabelVector::zeros();
        for c in 0..NUM_CLASSES {
            let row = &self.fusion_weights[c * width..(c + 1) * width];
            let mut z = self.fusion_bias[c];
            for (w, f) in row.iter().zip(features) {
                z += w * f;
            }
            probs[c] = sigmoid_scalar(z);
        }
        probs
    }

    /// Logits of the fusion head (no sigmoid).
    pub fn logits(&self, features: &[f64]) -> [f64; NUM_CLASSES] {
        let width = self.concat_width();
        let mut out = [0.0; NUM_CLASSES];
        for c in 0..NUM_CLASSES {
            let row = &self.fusion_weights[c * width..(c + 1) * width];
            let mut z = self.fusion_bias[c];
            for (w, f) in row.iter().zip(features) {
                z += w * f;
            }
            out[c] = z;
        }
        out
    }

    /// Class activation maps for class `c`: the global-path map weighted by
    /// the first K_global fusion weights and the local-path map weighted by
    /// the remaining K_local, each at its extractor's feature-map extent.
    /// Biases are excluded.
    pub fn cam(
        &self,
        whole_image: &GrayImage,
        lung_crop: &GrayImage,
        class: usize,
    ) -> Result<(Heatmap, Heatmap)> {
        if class >= NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "class index {class} out of range 0..{NUM_CLASSES}"
            )));
        }
        let mut global = self.extractor_global.network();
        let mut local = self.extractor_local.network();
        let g = global.predict(batch_from_images(&[whole_image.clone()])?)?;
        let l = local.predict(batch_from_images(&[lung_crop.clone()])?)?;
        let width = self.concat_width();
        let row = &self.fusion_weights[class * width..(class + 1) * width];
        let kg = self.extractor_global.config.feature_dim;

        let h1 = weighted_feature_sum(&g.feature_maps, &row[..kg])?;
        let h2 = weighted_feature_sum(&l.feature_maps, &row[kg..])?;
        Ok((h1, h2))
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        let mut echo = vec![("kind".into(), "fusion".into())];
        for (k, v) in self.extractor_global.config.echo() {
            echo.push((format!("global.{k}"), v));
        }
        for (k, v) in self.extractor_local.config.echo() {
            echo.push((format!("local.{k}"), v));
        }
        echo
    }

    /// Persist the fusion head together with both extractor checksums, so a
    /// later load can prove the extractors were untouched.
    pub fn save_head(&self, path: &std::path::Path) -> Result<()> {
        let mut store = ParamStore::new();
        store.add(
            "fusion.w",
            vec![NUM_CLASSES, self.concat_width()],
            self.fusion_weights.clone(),
            true,
        );
        store.add("fusion.b", vec![NUM_CLASSES], self.fusion_bias.clone(), true);
        let mut echo = self.echo();
        echo.push(("global.checksum".into(), format!("{:016x}", self.extractor_global.params.checksum())));
        echo.push(("local.checksum".into(), format!("{:016x}", self.extractor_local.params.checksum())));
        crate::networks::save_params(path, &echo, &store)
    }

    /// Load the fusion head for these extractors, verifying the recorded
    /// freeze checksums.
    pub fn load_head(
        path: &std::path::Path,
        extractor_global: TrainedModel<MiniDenseNetConfig>,
        extractor_local: TrainedModel<MiniDenseNetConfig>,
    ) -> Result<Self> {
        let mut model = SdfnModel::new(extractor_global, extractor_local);
        let mut layout = ParamStore::new();
        layout.add(
            "fusion.w",
            vec![NUM_CLASSES, model.concat_width()],
            vec![0.0; NUM_CLASSES * model.concat_width()],
            true,
        );
        layout.add("fusion.b", vec![NUM_CLASSES], vec![0.0; NUM_CLASSES], true);
        let mut echo = model.echo();
        echo.push(("global.checksum".into(), format!("{:016x}", model.extractor_global.params.checksum())));
        echo.push(("local.checksum".into(), format!("{:016x}", model.extractor_local.params.checksum())));
        let store = crate::networks::load_params(path, &echo, layout)?;
        model.fusion_weights = store.get("fusion.w").data.clone();
        model.fusion_bias = store.get("fusion.b").data.clone();
        Ok(model)
    }
}

/// Weighted sum of a [1,K,s,s] feature-map tensor with K weights.
fn weighted_feature_sum(features: &Tensor, weights: &[f64]) -> Result<Heatmap> {
    if features.shape.len() != 4 || features.shape[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected [1,K,s,s] feature maps, got {:?}",
            features.shape
        )));
    }
    let (k, h, w) = (features.shape[1], features.shape[2], features.shape[3]);
    if weights.len() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps but {} weights",
            k,
            weights.len()
        )));
    }
    let plane = h * w;
    let mut values = vec![0.0; plane];
    for (j, &wv) in weights.iter().enumerate() {
        let map = &features.data[j * plane..(j + 1) * plane];
        for (o, m) in values.iter_mut().zip(map) {
            *o += wv * m;
        }
    }
    Heatmap::raw(w, h, values)
}

/// Resize the global map to the full image, resize the local map to the
/// bounding box and embed it there over a zero canvas, sum the two, then
/// min-max rescale into [0, 255]. A constant fused map rescales to zeros.
pub fn fuse_and_rescale(
    h1: &Heatmap,
    h2: &Heatmap,
    bbox: &BoundingBox,
    image_width: usize,
    image_height: usize,
) -> Result<Heatmap> {
    if !bbox.is_valid_for(image_width, image_height) {
        return Err(Error::InvalidConfig(format!(
            "box ({},{})-({},{}) invalid for {image_width}x{image_height}",
            bbox.x0, bbox.y0, bbox.x1, bbox.y1
        )));
    }
    let global = resize_bilinear(&h1.as_image(), image_width, image_height)?;
    let local = resize_bilinear(&h2.as_image(), bbox.width(), bbox.height())?;

    let mut fused = global.data;
    for by in 0..bbox.height() {
        let dst = (bbox.y0 + by) * image_width + bbox.x0;
        let src = by * bbox.width();
        for bx in 0..bbox.width() {
            fused[dst + bx] += local.data[src + bx];
        }
    }

    let (lo, hi) = fused.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    // (v-lo)/(hi-lo) hits exactly 1.0 at the maximum, so the rescaled map
    // attains 255 whenever it is non-constant.
    let values = if hi > lo {
        fused.iter().map(|&v| (v - lo) / (hi - lo) * 255.0).collect()
    } else {
        vec![0.0; fused.len()]
    };
    Ok(Heatmap {
        width: image_width,
        height: image_height,
        values,
        range: HeatmapRange::Rescaled0To255,
    })
}

/// One fusion-training example: cached concatenated GAP features + labels.
#[derive(Clone, Debug)]
pub struct FusionSample {
    pub features: Vec<f64>,
    pub labels: LabelVector,
    pub group: String,
}

/// Extract fusion-training samples for a set of (whole image, crop, labels)
/// triples. The extractors are frozen, so features are computed once.
pub fn extract_fusion_samples(
    model: &SdfnModel,
    items: &[(GrayImage, GrayImage, LabelVector, String)],
    flip_augment: bool,
) -> Result<Vec<FusionSample>> {
    let mut out = Vec::with_capacity(items.len() * if flip_augment { 2 } else { 1 });
    for (whole, crop, labels, group) in items {
        out.push(FusionSample {
            features: model.features(whole, crop)?,
            labels: *labels,
            group: group.clone(),
        });
        if flip_augment {
            out.push(FusionSample {
                features: model.features(&hflip(whole), &hflip(crop))?,
                labels: *labels,
                group: group.clone(),
            });
        }
    }
    Ok(out)
}

/// Train only the fusion head; extractor parameters are asserted bit-equal
/// before and after. Checkpoints keep the epoch with the highest validation
/// mean AUC.
pub fn train_fusion(
    model: &mut SdfnModel,
    data: &[FusionSample],
    tc: &TrainConfig,
) -> Result<Vec<crate::networks::EpochStats>> {
    tc.validate()?;
    if !model.frozen_global || !model.frozen_local {
        return Err(Error::InvalidConfig(
            "extractors must be frozen before fusion training".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty fusion dataset".into()));
    }
    let width = model.concat_width();
    for s in data {
        if s.features.len() != width {
            return Err(Error::ShapeMismatch(format!(
                "fusion sample has {} features, expected {width}",
                s.features.len()
            )));
        }
    }
    let checksum_global = model.extractor_global.params.checksum();
    let checksum_local = model.extractor_local.params.checksum();

    let groups: Vec<String> = data.iter().map(|s| s.group.clone()).collect();
    let (train_idx, val_idx) =
        crate::networks::grouped_validation_split(&groups, tc.validation_fraction, tc.seed)?;

    let mut rng = Rng::new(derive_seed(tc.seed, 0xF051));
    let mut weights = ParamStore::he_init(&mut rng, &[NUM_CLASSES, width], width);
    let mut bias = vec![0.0; NUM_CLASSES];
    let mut adam = AdamState::new(
        &[weights.len(), bias.len()],
        AdamConfig { learning_rate: tc.learning_rate, decay: tc.decay, ..AdamConfig::default() },
    );
    let mut scheduler = PlateauScheduler::new(tc.plateau_patience, tc.plateau_factor);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;

    for epoch in 1..=tc.max_epochs {
        let mut order = train_idx.clone();
        Rng::new(derive_seed(tc.seed, 0xE000 + epoch as u64)).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let mut feats = Vec::with_capacity(chunk.len() * width);
            let mut targets = Vec::with_capacity(chunk.len() * NUM_CLASSES);
            for &i in chunk {
                feats.extend_from_slice(&data[i].features);
                targets.extend_from_slice(data[i].labels.as_slice());
            }
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![chunk.len(), width], feats)?);
            let w = tape.leaf(
                Tensor::new(vec![NUM_CLASSES, width], weights.clone())?.with_grad(),
            );
            let b = tape.leaf(Tensor::new(vec![NUM_CLASSES], bias.clone())?.with_grad());
            let logits = tape.fully_connected(x, w, b)?;
            let probs = tape.sigmoid(logits);
            let loss = tape.bce(probs, &targets, BCE_EPS)?;
            let loss_val = tape.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fusion loss became {loss_val} at epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let gw = tape.grad(w).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; weights.len()]);
            let gb = tape.grad(b).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; bias.len()]);
            adam.step(
                &mut [weights.as_mut_slice(), bias.as_mut_slice()],
                &[&gw, &gb],
                scheduler.lr_scale(),
            )?;
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = loss_sum / seen as f64;

        // Validation with the current head.
        let probe = SdfnModel {
            fusion_weights: weights.clone(),
            fusion_bias: bias.clone(),
            ..model.clone()
        };
        let mut val_loss_sum = 0.0;
        let mut probs_flat = Vec::with_capacity(val_idx.len() * NUM_CLASSES);
        let mut truths = Vec::with_capacity(val_idx.len());
        for &i in &val_idx {
            let p = probe.head(&data[i].features);
            val_loss_sum +=
                crate::tensor::loss::bce_slices(data[i].labels.as_slice(), p.as_slice())?;
            probs_flat.extend_from_slice(p.as_slice());
            truths.push(data[i].labels);
        }
        let val_loss = val_loss_sum / val_idx.len() as f64;
        let val_mean_auc = defined_mean_auc(&probs_flat, &truths);

        if let Some(auc) = val_mean_auc {
            if best.as_ref().map_or(true, |(b, ..)| auc > *b) {
                best = Some((auc, epoch, weights.clone(), bias.clone()));
            }
        }
        history.push(crate::networks::EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_mean_auc,
            lr_scale: scheduler.lr_scale(),
        });
        scheduler.observe(val_loss);
    }

    let (weights, bias) = match best {
        Some((_, _, w, b)) => (w, b),
        // No epoch could score an AUC: keep the last state.
        None => (weights, bias),
    };
    model.fusion_weights = weights;
    model.fusion_bias = bias;

    assert_eq!(
        model.extractor_global.params.checksum(),
        checksum_global,
        "global extractor changed during fusion training"
    );
    assert_eq!(
        model.extractor_local.params.checksum(),
        checksum_local,
        "local extractor changed during fusion training"
    );
    Ok(history)
}
