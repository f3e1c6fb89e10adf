//! Rough training-throughput measurement used to size experiment budgets.

use std::time::Instant;

use sdfn_core::networks::{
    train_classifier, train_segmenter, ClassifierSample, MiniDenseNetConfig, MiniUNetConfig,
    SegmenterSample, TrainConfig,
};
use sdfn_core::synth::{gen_phantom, PhantomSpec};

fn main() {
    let spec = PhantomSpec {
        extent: 64,
        patient_count: 50,
        images_per_patient: 2,
        ..Default::default()
    };
    let records: Vec<_> = gen_phantom(&spec, 1).collect();

    let class_data: Vec<ClassifierSample> = records
        .iter()
        .map(|r| ClassifierSample {
            image: r.image.clone(),
            labels: r.labels,
            group: r.patient_id.clone(),
        })
        .collect();
    let config = MiniDenseNetConfig::default();
    let tc = TrainConfig { max_epochs: 2, ..TrainConfig::classifier_default(1) };
    let t0 = Instant::now();
    let model = train_classifier(&config, &class_data, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "classifier 64x64 [2,2,2]g8: {} imgs x {} epochs in {:.2}s -> {:.1} ms/img/epoch (loss {:.4})",
        class_data.len(),
        tc.max_epochs,
        dt,
        1000.0 * dt / (class_data.len() * tc.max_epochs) as f64,
        model.history.last().unwrap().train_loss
    );

    let seg_data: Vec<SegmenterSample> = records
        .iter()
        .map(|r| SegmenterSample {
            image: r.image.clone(),
            mask: r.lung_mask.clone(),
            group: r.patient_id.clone(),
        })
        .collect();
    let seg_config = MiniUNetConfig::default();
    let tc = TrainConfig { max_epochs: 2, ..TrainConfig::segmenter_default(1) };
    let t0 = Instant::now();
    let model = train_segmenter(&seg_config, &seg_data, &tc).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "segmenter 64x64 d3 b8: {} imgs x {} epochs in {:.2}s -> {:.1} ms/img/epoch (loss {:.4})",
        seg_data.len(),
        tc.max_epochs,
        dt,
        1000.0 * dt / (seg_data.len() * tc.max_epochs) as f64,
        model.history.last().unwrap().train_loss
    );
}
