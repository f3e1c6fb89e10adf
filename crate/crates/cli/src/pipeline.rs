//! Stage implementations behind the CLI commands.
//!
//! Staging: corpus generation, segmenter training, lung-region extraction
//! (crops are cached to disk so later stages are deterministic and
//! inspectable), one extractor per view, fusion-head training, evaluation,
//! and activation-map export. Every stage re-derives the patient-grouped
//! fold split from the manifest and the global seed; fold 0 is the test
//! split throughout.

use std::fs;
use std::path::{Path, PathBuf};

use sdfn_core::fusion::{extract_fusion_samples, fuse_and_rescale, train_fusion, SdfnModel};
use sdfn_core::image::{resize_bilinear, GrayImage};
use sdfn_core::io::{
    read_manifest, read_pgm, report_to_csv, report_to_json, roc_to_csv, write_manifest,
    write_mask_pgm, write_pgm, write_ppm, ManifestRow,
};
use sdfn_core::labels::{LabelVector, CLASS_NAMES, NUM_CLASSES};
use sdfn_core::lrg::{generate_lung_region, BinaryMask, BoundingBox, LrgStatus};
use sdfn_core::metrics::{
    kfold_split, paired_t_test, per_class_auc, roc_auc, Comparison, EvalReport, ModelColumn,
};
use sdfn_core::networks::{
    batch_from_images, train_classifier, train_segmenter, ClassifierSample, MiniDenseNet,
    SegmenterSample, TrainedModel,
};
use sdfn_core::synth::gen_phantom;
use sdfn_core::{Error, Result};

use crate::config::{artifact_paths, PipelineConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Global,
    Local,
}

impl View {
    pub fn name(&self) -> &'static str {
        match self {
            View::Global => "global",
            View::Local => "local",
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(View::Global),
            "local" => Ok(View::Local),
            other => Err(Error::InvalidConfig(format!(
                "view must be `global` or `local`, got `{other}`"
            ))),
        }
    }
}

/// One row of the box CSV written by the lung-region stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxRow {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub status: LrgStatus,
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config })
    }

    fn path(&self, key: &str) -> PathBuf {
        artifact_paths(&self.config)[key].clone()
    }

    fn require(&self, key: &str, produced_by: &str) -> Result<PathBuf> {
        let path = self.path(key);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { stage: produced_by.to_string() });
        }
        Ok(path)
    }

    fn manifest(&self) -> Result<Vec<ManifestRow>> {
        let path = self.require("manifest", "gen-data")?;
        read_manifest(&path)
    }

    /// Patient-grouped folds; fold 0 is the held-out test split, the rest
    /// form the training pool.
    pub fn split(&self, rows: &[ManifestRow]) -> Result<(Vec<usize>, Vec<usize>)> {
        let groups: Vec<String> = rows.iter().map(|r| r.patient_id.clone()).collect();
        let folds = kfold_split(&groups, self.config.test_folds, self.config.seed)?;
        let test = folds[0].clone();
        let mut train: Vec<usize> = folds[1..].iter().flatten().copied().collect();
        train.sort_unstable();
        Ok((train, test))
    }

    pub fn fold_assignments(&self, rows: &[ManifestRow]) -> Result<Vec<(String, usize)>> {
        let groups: Vec<String> = rows.iter().map(|r| r.patient_id.clone()).collect();
        let folds = kfold_split(&groups, self.config.test_folds, self.config.seed)?;
        let mut assignment = vec![0usize; rows.len()];
        for (f, fold) in folds.iter().enumerate() {
            for &i in fold {
                assignment[i] = f;
            }
        }
        Ok(rows.iter().zip(assignment).map(|(r, f)| (r.image_id.clone(), f)).collect())
    }

    // ── gen-data ───────────────────────────────────────────────────────

    pub fn gen_data(&self) -> Result<()> {
        let images_dir = self.path("images_dir");
        let masks_dir = self.path("masks_dir");
        fs::create_dir_all(&images_dir)?;
        fs::create_dir_all(&masks_dir)?;

        let mut rows = Vec::with_capacity(self.config.phantom.total_images());
        for record in gen_phantom(&self.config.phantom, self.config.seed) {
            let image_rel = format!("images/{}.pgm", record.image_id);
            let mask_rel = format!("masks/{}.pgm", record.image_id);
            write_pgm(&self.config.corpus_dir.join(&image_rel), &record.image, 255)?;
            write_mask_pgm(&self.config.corpus_dir.join(&mask_rel), &record.lung_mask)?;
            rows.push(ManifestRow {
                image_id: record.image_id,
                patient_id: record.patient_id,
                image_path: image_rel,
                mask_path: mask_rel,
                labels: record.labels,
                lesion_boxes: record.lesion_boxes,
            });
        }
        write_manifest(&self.path("manifest"), &rows)?;
        Ok(())
    }

    fn load_image(&self, rel: &str) -> Result<GrayImage> {
        read_pgm(&self.config.corpus_dir.join(rel))
    }

    fn load_mask(&self, rel: &str) -> Result<BinaryMask> {
        Ok(BinaryMask::from_probabilities(&read_pgm(
            &self.config.corpus_dir.join(rel),
        )?))
    }

    // ── train-seg ──────────────────────────────────────────────────────

    pub fn train_seg(&self) -> Result<()> {
        let rows = self.manifest()?;
        let (train_pool, _) = self.split(&rows)?;
        let size = self.config.segmenter.input_size;
        let mut samples = Vec::with_capacity(train_pool.len());
        for &i in &train_pool {
            let row = &rows[i];
            let image = resize_bilinear(&self.load_image(&row.image_path)?, size, size)?;
            let mask_img = self.load_mask(&row.mask_path)?;
            let mask = downscale_mask(&mask_img, size)?;
            samples.push(SegmenterSample { image, mask, group: row.patient_id.clone() });
        }
        let model = train_segmenter(&self.config.segmenter, &samples, &self.config.seg_train)?;
        fs::create_dir_all(&self.config.weights_dir)?;
        model.save(&self.path("segmenter"))?;
        Ok(())
    }

    // ── run-lrg ────────────────────────────────────────────────────────

    pub fn run_lrg(&self) -> Result<Vec<BoxRow>> {
        let rows = self.manifest()?;
        let seg_path = self.require("segmenter", "train-seg")?;
        let segmenter =
            TrainedModel::<sdfn_core::networks::MiniUNetConfig>::load(&seg_path, &self.config.segmenter)?;
        let mut net = segmenter.network();
        let size = self.config.segmenter.input_size;

        let crops_dir = self.path("crops_dir");
        fs::create_dir_all(&crops_dir)?;
        let mut box_rows = Vec::with_capacity(rows.len());
        for row in &rows {
            let image = self.load_image(&row.image_path)?;
            let small = resize_bilinear(&image, size, size)?;
            let probs = net.predict(batch_from_images(&[small])?)?;
            let prob_img = GrayImage::from_data(size, size, probs.data)?;
            // Back to original coordinates before the geometric rules run.
            let upscaled = resize_bilinear(&prob_img, image.width, image.height)?;
            let mask = BinaryMask::from_probabilities(&upscaled);
            let (crop, bbox, status) = generate_lung_region(&image, &mask)?;
            write_pgm(&crops_dir.join(format!("{}.pgm", row.image_id)), &crop, 255)?;
            box_rows.push(BoxRow { image_id: row.image_id.clone(), bbox, status });
        }
        write_boxes(&self.path("boxes"), &box_rows)?;
        Ok(box_rows)
    }

    // ── train-extractor ────────────────────────────────────────────────

    fn classifier_samples(&self, view: View, rows: &[ManifestRow]) -> Result<Vec<ClassifierSample>> {
        let (net_config, needs_crops) = match view {
            View::Global => (&self.config.global_extractor, false),
            View::Local => (&self.config.local_extractor, true),
        };
        if needs_crops {
            self.require("boxes", "run-lrg")?;
        }
        let size = net_config.input_size;
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let image = if needs_crops {
                let path = self.path("crops_dir").join(format!("{}.pgm", row.image_id));
                if !path.exists() {
                    return Err(Error::MissingPrerequisite { stage: "run-lrg".into() });
                }
                read_pgm(&path)?
            } else {
                self.load_image(&row.image_path)?
            };
            samples.push(ClassifierSample {
                image: resize_bilinear(&image, size, size)?,
                labels: row.labels,
                group: row.patient_id.clone(),
            });
        }
        Ok(samples)
    }

    pub fn train_extractor(&self, view: View) -> Result<()> {
        let rows = self.manifest()?;
        let (train_pool, _) = self.split(&rows)?;
        let pool_rows: Vec<ManifestRow> = train_pool.iter().map(|&i| rows[i].clone()).collect();
        let samples = self.classifier_samples(view, &pool_rows)?;
        let net_config = match view {
            View::Global => &self.config.global_extractor,
            View::Local => &self.config.local_extractor,
        };
        let model = train_classifier(net_config, &samples, &self.config.extractor_train)?;
        fs::create_dir_all(&self.config.weights_dir)?;
        model.save(&self.path(match view {
            View::Global => "extractor_global",
            View::Local => "extractor_local",
        }))?;
        Ok(())
    }

    fn load_extractor(&self, view: View) -> Result<TrainedModel<sdfn_core::networks::MiniDenseNetConfig>> {
        let (key, stage, config) = match view {
            View::Global => ("extractor_global", "train-extractor --view=global", &self.config.global_extractor),
            View::Local => ("extractor_local", "train-extractor --view=local", &self.config.local_extractor),
        };
        let path = self.require(key, stage)?;
        TrainedModel::<sdfn_core::networks::MiniDenseNetConfig>::load(&path, config)
    }

    // ── train-fusion ───────────────────────────────────────────────────

    /// (whole image, crop, labels, group) triples resized for the two views.
    fn fusion_items(
        &self,
        rows: &[ManifestRow],
    ) -> Result<Vec<(GrayImage, GrayImage, LabelVector, String)>> {
        self.require("boxes", "run-lrg")?;
        let gs = self.config.global_extractor.input_size;
        let ls = self.config.local_extractor.input_size;
        let mut items = Vec::with_capacity(rows.len());
        for row in rows {
            let whole = resize_bilinear(&self.load_image(&row.image_path)?, gs, gs)?;
            let crop_path = self.path("crops_dir").join(format!("{}.pgm", row.image_id));
            if !crop_path.exists() {
                return Err(Error::MissingPrerequisite { stage: "run-lrg".into() });
            }
            let crop = resize_bilinear(&read_pgm(&crop_path)?, ls, ls)?;
            items.push((whole, crop, row.labels, row.patient_id.clone()));
        }
        Ok(items)
    }

    pub fn train_fusion(&self) -> Result<()> {
        let rows = self.manifest()?;
        let (train_pool, _) = self.split(&rows)?;
        let pool_rows: Vec<ManifestRow> = train_pool.iter().map(|&i| rows[i].clone()).collect();
        let global = self.load_extractor(View::Global)?;
        let local = self.load_extractor(View::Local)?;
        let mut model = SdfnModel::new(global, local);
        let items = self.fusion_items(&pool_rows)?;
        let samples = extract_fusion_samples(&model, &items, false)?;
        train_fusion(&mut model, &samples, &self.config.fusion_train)?;
        fs::create_dir_all(&self.config.weights_dir)?;
        model.save_head(&self.path("fusion"))?;
        Ok(())
    }

    fn load_fusion(&self) -> Result<SdfnModel> {
        let path = self.require("fusion", "train-fusion")?;
        let global = self.load_extractor(View::Global)?;
        let local = self.load_extractor(View::Local)?;
        SdfnModel::load_head(&path, global, local)
    }

    // ── evaluate ───────────────────────────────────────────────────────

    /// Probabilities and GAP features for a set of images under one
    /// extractor, processed in deterministic batches.
    fn classifier_outputs(
        &self,
        net: &mut MiniDenseNet,
        images: &[GrayImage],
    ) -> Result<(Vec<LabelVector>, Vec<Vec<f64>>)> {
        let mut probs = Vec::with_capacity(images.len());
        let mut gaps = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let out = net.predict(batch_from_images(chunk)?)?;
            let k = out.gap.shape[1];
            for i in 0..chunk.len() {
                probs.push(LabelVector::from_slice(
                    &out.probs.data[i * NUM_CLASSES..(i + 1) * NUM_CLASSES],
                )?);
                gaps.push(out.gap.data[i * k..(i + 1) * k].to_vec());
            }
        }
        Ok((probs, gaps))
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let rows = self.manifest()?;
        let (_, test) = self.split(&rows)?;
        let test_rows: Vec<ManifestRow> = test.iter().map(|&i| rows[i].clone()).collect();
        let model = self.load_fusion()?;
        let items = self.fusion_items(&test_rows)?;

        let wholes: Vec<GrayImage> = items.iter().map(|(w, _, _, _)| w.clone()).collect();
        let crops: Vec<GrayImage> = items.iter().map(|(_, c, _, _)| c.clone()).collect();
        let truth: Vec<LabelVector> = items.iter().map(|(_, _, l, _)| *l).collect();

        let mut global_net = model.extractor_global.network();
        let mut local_net = model.extractor_local.network();
        let (global_probs, global_gaps) = self.classifier_outputs(&mut global_net, &wholes)?;
        let (local_probs, local_gaps) = self.classifier_outputs(&mut local_net, &crops)?;
        let fused_probs: Vec<LabelVector> = global_gaps
            .iter()
            .zip(&local_gaps)
            .map(|(g, l)| {
                let mut f = g.clone();
                f.extend_from_slice(l);
                model.head(&f)
            })
            .collect();

        let columns = vec![
            ModelColumn::new("whole_image", per_class_auc(&global_probs, &truth)?)?,
            ModelColumn::new("lung_region", per_class_auc(&local_probs, &truth)?)?,
            ModelColumn::new("fused", per_class_auc(&fused_probs, &truth)?)?,
        ];
        // Pair the 14 per-class AUCs across methods.
        let mut comparisons = Vec::new();
        for (a, b) in [(2usize, 0usize), (2, 1), (1, 0)] {
            comparisons.push(Comparison {
                a: columns[a].name.clone(),
                b: columns[b].name.clone(),
                result: paired_t_test(&columns[a].per_class_auc, &columns[b].per_class_auc)?,
            });
        }
        let report = EvalReport {
            columns,
            comparisons,
            fold_assignments: self.fold_assignments(&rows)?,
        };

        fs::create_dir_all(&self.config.reports_dir)?;
        fs::write(self.path("eval_csv"), report_to_csv(&report))?;
        fs::write(self.path("eval_json"), report_to_json(&report))?;

        let roc_dir = self.path("roc_dir");
        fs::create_dir_all(&roc_dir)?;
        for (name, probs) in [
            ("whole_image", &global_probs),
            ("lung_region", &local_probs),
            ("fused", &fused_probs),
        ] {
            for c in 0..NUM_CLASSES {
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let labels: Vec<bool> = truth.iter().map(|t| t[c] != 0.0).collect();
                let (curve, _) = roc_auc(&scores, &labels)?;
                fs::write(
                    roc_dir.join(format!("{name}_{}.csv", CLASS_NAMES[c])),
                    roc_to_csv(&curve),
                )?;
            }
        }
        Ok(report)
    }

    // ── cam ────────────────────────────────────────────────────────────

    pub fn cam(&self, ids: &[String], classes: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidConfig("cam requires --ids".into()));
        }
        for &c in classes {
            if c >= NUM_CLASSES {
                return Err(Error::InvalidConfig(format!("class index {c} out of range")));
            }
        }
        let rows = self.manifest()?;
        let model = self.load_fusion()?;
        let boxes = read_boxes(&self.require("boxes", "run-lrg")?)?;
        let cam_dir = self.path("cam_dir");
        fs::create_dir_all(&cam_dir)?;
        let gs = self.config.global_extractor.input_size;
        let ls = self.config.local_extractor.input_size;

        for id in ids {
            let row = rows
                .iter()
                .find(|r| &r.image_id == id)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown image id `{id}`")))?;
            let bbox = boxes
                .iter()
                .find(|b| &b.image_id == id)
                .ok_or_else(|| Error::MissingPrerequisite { stage: "run-lrg".into() })?
                .bbox;
            let original = self.load_image(&row.image_path)?;
            let whole = resize_bilinear(&original, gs, gs)?;
            let crop_path = self.path("crops_dir").join(format!("{id}.pgm"));
            let crop = resize_bilinear(&read_pgm(&crop_path)?, ls, ls)?;

            let feats = model.features(&whole, &crop)?;
            let logits = model.logits(&feats);
            let probs = model.head(&feats);

            let mut sidecar = String::from("class,name,logit,probability\n");
            for c in 0..NUM_CLASSES {
                sidecar.push_str(&format!(
                    "{c},{},{},{}\n",
                    CLASS_NAMES[c], logits[c], probs[c]
                ));
            }
            fs::write(cam_dir.join(format!("{id}.csv")), sidecar)?;

            for &c in classes {
                let (h1, h2) = model.cam(&whole, &crop, c)?;
                let fused = fuse_and_rescale(&h1, &h2, &bbox, original.width, original.height)?;
                let heat_img = GrayImage::from_data(
                    fused.width,
                    fused.height,
                    fused.values.iter().map(|v| v / 255.0).collect(),
                )?;
                write_pgm(
                    &cam_dir.join(format!("{id}_{}.pgm", CLASS_NAMES[c])),
                    &heat_img,
                    255,
                )?;
                let overlay = overlay_rgb(&original, &heat_img);
                write_ppm(
                    &cam_dir.join(format!("{id}_{}_overlay.ppm", CLASS_NAMES[c])),
                    original.width,
                    original.height,
                    &overlay,
                )?;
            }
        }
        Ok(())
    }
}

/// Alpha-blend (0.5) a heat colormap (blue = low, red = high) over the
/// grayscale input.
fn overlay_rgb(image: &GrayImage, heat: &GrayImage) -> Vec<(u8, u8, u8)> {
    image
        .data
        .iter()
        .zip(&heat.data)
        .map(|(&g, &h)| {
            let gray = g.clamp(0.0, 1.0);
            let (hr, hg, hb) = (h, 0.15 * h, 1.0 - h);
            let to_byte = |v: f64| ((v.clamp(0.0, 1.0)) * 255.0).round() as u8;
            (
                to_byte(0.5 * gray + 0.5 * hr),
                to_byte(0.5 * gray + 0.5 * hg),
                to_byte(0.5 * gray + 0.5 * hb),
            )
        })
        .collect()
}

/// Threshold-downscale a mask to a square extent via bilinear interpolation
/// of its indicator image.
pub fn downscale_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let img = GrayImage::from_data(
        mask.width(),
        mask.height(),
        mask.bits().iter().map(|&b| f64::from(b)).collect(),
    )?;
    Ok(BinaryMask::from_probabilities(&resize_bilinear(&img, size, size)?))
}

pub fn write_boxes(path: &Path, rows: &[BoxRow]) -> Result<()> {
    let mut out = String::from("image_id,x0,y0,x1,y1,status\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.image_id, row.bbox.x0, row.bbox.y0, row.bbox.x1, row.bbox.y1, row.status
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "image_id,x0,y0,x1,y1,status" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            message: format!("unexpected box CSV header `{header}`"),
        });
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                offset: lineno as u64,
                message: format!("line {}: expected 6 fields", lineno + 2),
            });
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                offset: lineno as u64,
                message: format!("invalid number `{s}`"),
            })
        };
        rows.push(BoxRow {
            image_id: fields[0].to_string(),
            bbox: BoundingBox {
                x0: num(fields[1])?,
                y0: num(fields[2])?,
                x1: num(fields[3])?,
                y1: num(fields[4])?,
            },
            status: fields[5].parse()?,
        });
    }
    Ok(rows)
}
