//! Single-seed directional probe: global view at 64 px against local views
//! at 96/128 px, with per-class AUC summaries for the decisive classes.

use std::time::Instant;

use sdfn_core::image::{resize_bilinear, GrayImage};
use sdfn_core::labels::{LabelVector, NUM_CLASSES, OUT_OF_LUNG_CLASS, SMALL_LESION_CLASS};
use sdfn_core::lrg::generate_lung_region;
use sdfn_core::metrics::{kfold_split, per_class_auc};
use sdfn_core::networks::{
    batch_from_images, train_classifier, ClassifierSample, MiniDenseNetConfig, TrainConfig,
};
use sdfn_core::synth::{gen_phantom, LesionRange, PhantomSpec};

fn evaluate(
    records: &[sdfn_core::synth::PhantomRecord],
    views: &[GrayImage],
    test_idx: &[usize],
    model: &mut sdfn_core::networks::MiniDenseNet,
) -> [f64; NUM_CLASSES] {
    let truth: Vec<LabelVector> = test_idx.iter().map(|&i| records[i].labels).collect();
    let mut probs = Vec::new();
    for chunk in test_idx.chunks(16) {
        let imgs: Vec<GrayImage> = chunk.iter().map(|&i| views[i].clone()).collect();
        let out = model.predict(batch_from_images(&imgs).unwrap()).unwrap();
        for i in 0..chunk.len() {
            probs.push(
                LabelVector::from_slice(&out.probs.data[i * NUM_CLASSES..(i + 1) * NUM_CLASSES])
                    .unwrap(),
            );
        }
    }
    per_class_auc(&probs, &truth).unwrap()
}

fn main() {
    let seed = 901u64;
    let mut spec = PhantomSpec {
        extent: 256,
        patient_count: 250,
        images_per_patient: 8,
        ..Default::default()
    };
    spec.lesion_size[SMALL_LESION_CLASS] = LesionRange { min_px: 2, max_px: 3 };
    let records: Vec<_> = gen_phantom(&spec, seed).collect();

    let groups: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let folds = kfold_split(&groups, 5, seed).unwrap();
    let test_idx = &folds[0];
    let train_idx: Vec<usize> = folds[1..].iter().flatten().copied().collect();

    let mut crops = Vec::with_capacity(records.len());
    for r in &records {
        let (crop, _, _) = generate_lung_region(&r.image, &r.lung_mask).unwrap();
        crops.push(crop);
    }

    let summarize = |tag: &str, aucs: &[f64; NUM_CLASSES], secs: f64| {
        let mean: f64 = aucs.iter().sum::<f64>() / 14.0;
        println!(
            "{tag}: nodule {:.3} out {:.3} mean {:.3} ({secs:.0}s)",
            aucs[SMALL_LESION_CLASS], aucs[OUT_OF_LUNG_CLASS], mean
        );
    };

    let train_view = |views: &[GrayImage], input: usize, lr: f64, epochs: usize| {
        let samples: Vec<ClassifierSample> = train_idx
            .iter()
            .map(|&i| ClassifierSample {
                image: views[i].clone(),
                labels: records[i].labels,
                group: records[i].patient_id.clone(),
            })
            .collect();
        let config = MiniDenseNetConfig { input_size: input, ..Default::default() };
        let tc = TrainConfig {
            learning_rate: lr,
            decay: 1e-5,
            batch_size: 16,
            max_epochs: epochs,
            ..TrainConfig::classifier_default(seed)
        };
        let t = Instant::now();
        let model = train_classifier(&config, &samples, &tc).unwrap();
        (model, t.elapsed().as_secs_f64())
    };

    // Sanity: dot contrast in the local 128 view, measured directly from
    // ground-truth lesion boxes mapped into crop coordinates.
    {
        let mut contrasts = Vec::new();
        for (r, crop) in records.iter().zip(&crops).take(400) {
            if r.labels[SMALL_LESION_CLASS] != 1.0 {
                continue;
            }
            let (_, bbox, _) = generate_lung_region(&r.image, &r.lung_mask).unwrap();
            let view = resize_bilinear(crop, 128, 128).unwrap();
            let sx = 128.0 / crop.width as f64;
            let sy = 128.0 / crop.height as f64;
            for lb in r.lesion_boxes.iter().filter(|l| l.class == SMALL_LESION_CLASS) {
                let cx = ((lb.bbox.x0 + lb.bbox.x1) as f64 / 2.0 - bbox.x0 as f64) * sx;
                let cy = ((lb.bbox.y0 + lb.bbox.y1) as f64 / 2.0 - bbox.y0 as f64) * sy;
                let mut peak: f64 = 0.0;
                let mut ring = Vec::new();
                for dy in -4i64..=4 {
                    for dx in -4i64..=4 {
                        let (x, y) = (cx.round() as i64 + dx, cy.round() as i64 + dy);
                        if x < 0 || y < 0 || x >= 128 || y >= 128 {
                            continue;
                        }
                        let v = view.get(x as usize, y as usize);
                        if dx.abs() <= 2 && dy.abs() <= 2 {
                            peak = peak.max(v);
                        } else {
                            ring.push(v);
                        }
                    }
                }
                if !ring.is_empty() {
                    let bg = ring.iter().sum::<f64>() / ring.len() as f64;
                    contrasts.push(peak - bg);
                }
            }
        }
        let mean_c = contrasts.iter().sum::<f64>() / contrasts.len() as f64;
        let min_c = contrasts.iter().cloned().fold(f64::MAX, f64::min);
        println!(
            "dot contrast in local-128 view: mean {mean_c:.3}, min {min_c:.3}, n {}",
            contrasts.len()
        );
    }

    // Global view: the criterion's 4x downsampling.
    let whole64: Vec<GrayImage> =
        records.iter().map(|r| resize_bilinear(&r.image, 64, 64).unwrap()).collect();
    let (gmodel, gsecs) = train_view(&whole64, 64, 3e-3, 16);
    let gaucs = evaluate(&records, &whole64, test_idx, &mut gmodel.network());
    summarize("global  64 lr 3e-3 ep 16", &gaucs, gsecs);

    let local_input = 128usize;
    let views: Vec<GrayImage> = crops
        .iter()
        .map(|c| resize_bilinear(c, local_input, local_input).unwrap())
        .collect();
    for (lr, epochs) in [(3e-3, 16usize), (5e-3, 16)] {
        let (lmodel, lsecs) = train_view(&views, local_input, lr, epochs);
        let laucs = evaluate(&records, &views, test_idx, &mut lmodel.network());
        summarize(&format!("local {local_input} lr {lr:.0e} ep {epochs}"), &laucs, lsecs);
        println!(
            "  nodule gap (local - global): {:+.3}",
            laucs[SMALL_LESION_CLASS] - gaucs[SMALL_LESION_CLASS]
        );
    }
}
