//! The verification suite: ten acceptance criteria, each with an
//! independent oracle, runnable from the CLI (`verify`) and from the
//! acceptance test target.

use std::time::Instant;

use sdfn_core::fusion::{extract_fusion_samples, train_fusion, SdfnModel};
use sdfn_core::image::{resize_bilinear, GrayImage};
use sdfn_core::labels::{LabelVector, NUM_CLASSES, OUT_OF_LUNG_CLASS, SMALL_LESION_CLASS};
use sdfn_core::lrg::{
    expand_box, generate_lung_region, label_components, scaled_margins, BinaryMask, BoundingBox,
    LrgStatus,
};
use sdfn_core::metrics::{dice, iou, mean_auc, paired_t_test, roc_auc};
use sdfn_core::networks::{
    batch_from_images, train_classifier, train_segmenter, ClassifierSample, MiniDenseNet,
    MiniDenseNetConfig, MiniUNetConfig, SegmenterSample, TrainConfig, TrainedModel,
};
use sdfn_core::rng::{derive_seed, Rng};
use sdfn_core::synth::{gen_phantom, LesionRange, PhantomSpec};
use sdfn_core::tensor::gradcheck::grad_check;
use sdfn_core::tensor::loss::{bce_slices, BCE_EPS};
use sdfn_core::tensor::{NodeId, Tape, Tensor};
use sdfn_core::Result;

/// Published per-class AUC figures of the fused model; their mean prints
/// as 0.815 and anchors the report-format self-test.
pub const REFERENCE_FUSED_AUCS: [f64; NUM_CLASSES] = [
    0.781, 0.885, 0.832, 0.700, 0.815, 0.765, 0.719, 0.866, 0.743, 0.842, 0.921, 0.835, 0.791,
    0.911,
];

pub const CRITERIA: [&str; 10] = [
    "gradient correctness (finite differences)",
    "lung-region generator equals rule oracle",
    "closed-form overlap and loss values",
    "AUC equals pair-counting oracle",
    "t-test p-values equal quadrature oracle",
    "activation maps equal weighted-sum oracle",
    "fusion training freezes the extractors",
    "segmenter reaches held-out DSC >= 0.95",
    "local/global/fused directional ordering",
    "end-to-end pipeline determinism",
];

#[derive(Clone, Debug)]
pub struct CriterionReport {
    pub index: usize,
    pub name: &'static str,
    pub passed: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionReport {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:2}: {} ({:.1}s) - {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.index,
            self.name,
            self.seconds,
            self.details
        )
    }
}

/// Run one criterion (1-based index).
pub fn run_criterion(index: usize) -> CriterionReport {
    let start = Instant::now();
    let outcome = match index {
        1 => criterion_gradients(),
        2 => criterion_lrg_oracle(),
        3 => criterion_closed_forms(),
        4 => criterion_auc_oracle(),
        5 => criterion_t_test_oracle(),
        6 => criterion_cam_oracle(),
        7 => criterion_freeze(),
        8 => criterion_segmenter(),
        9 => criterion_directional(),
        10 => criterion_determinism(),
        other => Err(sdfn_core::Error::InvalidConfig(format!("no criterion {other}"))),
    };
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok(details) => CriterionReport {
            index,
            name: CRITERIA[index - 1],
            passed: true,
            details,
            seconds,
        },
        Err(e) => CriterionReport {
            index,
            name: CRITERIA[index - 1],
            passed: false,
            details: e.to_string(),
            seconds,
        },
    }
}

pub fn run_all() -> Vec<CriterionReport> {
    (1..=CRITERIA.len()).map(run_criterion).collect()
}

fn fail(msg: String) -> sdfn_core::Error {
    sdfn_core::Error::InvalidConfig(msg)
}

fn check_runtime(start: Instant, limit_s: f64, what: &str) -> Result<()> {
    let took = start.elapsed().as_secs_f64();
    if took > limit_s {
        return Err(fail(format!("{what} took {took:.1}s, limit {limit_s}s")));
    }
    Ok(())
}

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

// ── Criterion 1: gradient correctness ───────────────────────────────────

fn criterion_gradients() -> Result<String> {
    let start = Instant::now();
    let mut rng = Rng::new(0xC1);
    let mut worst_isolated: (f64, &str) = (0.0, "none");

    let check = |name: &'static str, err: f64, worst: &mut (f64, &str)| -> Result<()> {
        if err >= 1e-6 {
            return Err(fail(format!("{name}: relative error {err:.3e} >= 1e-6")));
        }
        if err > worst.0 {
            *worst = (err, name);
        }
        Ok(())
    };

    // Isolated layers.
    let params = vec![
        random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4, 3, 3, 3], -0.6, 0.6).with_grad(),
        random_tensor(&mut rng, &[4], -0.3, 0.3).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("conv2d", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v = rng.range(0.3, 1.2);
            if rng.chance(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let params = vec![Tensor::new(vec![2, 12], data)?.with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.relu(ids[0]);
        Ok(tape.mean_all(y))
    };
    check("relu", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![
        random_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[2], 0.5, 1.5).with_grad(),
        random_tensor(&mut rng, &[2], -0.5, 0.5).with_grad(),
    ];
    let projection = random_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let mut stats = sdfn_core::tensor::BnStats::new(2);
        let y = tape.batch_norm(ids[0], ids[1], ids[2], &mut stats, true, 0.9, 1e-8)?;
        let r = tape.leaf(projection.clone());
        let p = tape.mul(y, r)?;
        Ok(tape.mean_all(p))
    };
    check("batch_norm", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![random_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.avg_pool2d(ids[0], 2, 2)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("avg_pool2d", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![random_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.global_avg_pool(ids[0])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("global_avg_pool", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![
        random_tensor(&mut rng, &[3, 5], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4, 5], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4], -0.5, 0.5).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.fully_connected(ids[0], ids[1], ids[2])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("fully_connected", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![
        random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.concat_channels(&[ids[0], ids[1]])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("concat", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![random_tensor(&mut rng, &[2, 7], -3.0, 3.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.sigmoid(ids[0]);
        Ok(tape.mean_all(y))
    };
    check("sigmoid", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        let y = tape.upsample_nearest(ids[0], 2)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    check("upsample", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    let params = vec![random_tensor(&mut rng, &[6], 0.1, 0.9).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
        tape.bce(ids[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], BCE_EPS)
    };
    check("bce", grad_check(&build, &params, 1e-5)?, &mut worst_isolated)?;

    // Full mini classifier loss, differentiated with respect to every
    // trainable parameter and verified against central differences.
    // Composite check runs the batch_norm-free variant: a pre-activation
    // stem gamma is scale-dead (its true gradient is eps leakage around
    // 1e-9), which the 1e-8 relative-error floor cannot distinguish from
    // finite-difference noise. Batch norm itself is checked in isolation.
    let config = MiniDenseNetConfig {
        input_size: 16,
        growth_rate: 4,
        blocks: vec![1],
        stem_channels: 8,
        feature_dim: 12,
        num_classes: NUM_CLASSES,
        batch_norm: false,
    };
    let net = MiniDenseNet::init(config.clone(), 0xC1F)?;
    let mut batch_rng = Rng::new(0xBA7C);
    let batch = random_tensor(&mut batch_rng, &[2, 1, 16, 16], 0.0, 1.0);
    let targets: Vec<f64> = (0..2 * NUM_CLASSES).map(|_| f64::from(batch_rng.chance(0.5))).collect();

    let eval = |net: &MiniDenseNet| -> Result<f64> {
        let mut n = net.clone();
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone());
        let nodes = n.forward(&mut tape, input, true)?;
        let loss = tape.bce(nodes.probs, &targets, BCE_EPS)?;
        Ok(tape.data(loss)[0])
    };

    let mut train_net = net.clone();
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone());
    let nodes = train_net.forward(&mut tape, input, true)?;
    let loss = tape.bce(nodes.probs, &targets, BCE_EPS)?;
    tape.backward(loss)?;
    let h = 1e-5;
    let mut worst_composite = 0.0f64;
    for &(entry_id, node) in &nodes.bindings {
        let analytic = tape
            .grad(node)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.tensor(node).numel()]);
        for ei in 0..analytic.len() {
            let mut plus = net.clone();
            plus.params.entry_mut(entry_id).data[ei] += h;
            let mut minus = net.clone();
            minus.params.entry_mut(entry_id).data[ei] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst_composite {
                worst_composite = rel;
            }
        }
    }
    if worst_composite >= 1e-4 {
        return Err(fail(format!(
            "composite classifier loss: relative error {worst_composite:.3e} >= 1e-4"
        )));
    }
    check_runtime(start, 60.0, "gradient checks")?;
    Ok(format!(
        "worst isolated {:.2e} ({}), composite {:.2e}",
        worst_isolated.0, worst_isolated.1, worst_composite
    ))
}

// ── Criterion 2: LRG against a rule-transcription oracle ────────────────

/// Independent flood fill (scanline queue, label grid) plus a literal
/// transcription of the post-processing rules.
mod lrg_oracle {
    use super::*;

    pub struct OracleRegion {
        pub label: usize,
        pub area: usize,
        pub cx: f64,
        pub cy: f64,
        pub x0: usize,
        pub y0: usize,
        pub x1: usize,
        pub y1: usize,
    }

    pub fn regions(mask: &BinaryMask) -> Vec<OracleRegion> {
        let (w, h) = (mask.width(), mask.height());
        let mut labels = vec![usize::MAX; w * h];
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask.get(x, y) || labels[y * w + x] != usize::MAX {
                    continue;
                }
                let id = out.len();
                let mut queue = std::collections::VecDeque::new();
                labels[y * w + x] = id;
                queue.push_back((x, y));
                let (mut area, mut sx, mut sy) = (0usize, 0f64, 0f64);
                let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
                while let Some((px, py)) = queue.pop_front() {
                    area += 1;
                    sx += px as f64;
                    sy += py as f64;
                    x0 = x0.min(px);
                    y0 = y0.min(py);
                    x1 = x1.max(px);
                    y1 = y1.max(py);
                    let mut push = |nx: usize, ny: usize| {
                        if mask.get(nx, ny) && labels[ny * w + nx] == usize::MAX {
                            labels[ny * w + nx] = id;
                            queue.push_back((nx, ny));
                        }
                    };
                    if px > 0 {
                        push(px - 1, py);
                    }
                    if px + 1 < w {
                        push(px + 1, py);
                    }
                    if py > 0 {
                        push(px, py - 1);
                    }
                    if py + 1 < h {
                        push(px, py + 1);
                    }
                }
                out.push(OracleRegion {
                    label: id,
                    area,
                    cx: sx / area as f64,
                    cy: sy / area as f64,
                    x0,
                    y0,
                    x1,
                    y1,
                });
            }
        }
        out
    }

    /// The full rule chain, written out longhand.
    pub fn lung_box(mask: &BinaryMask) -> (Option<BoundingBox>, LrgStatus) {
        let (w, h) = (mask.width(), mask.height());
        let mut status = LrgStatus::clean();
        let mut regs = regions(mask);
        if regs.is_empty() {
            status.fallback = true;
            return (None, status);
        }
        if regs.len() > 2 {
            status.fp_removed = true;
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            let mut scored: Vec<(f64, usize, usize, usize)> = regs
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let d = ((r.cx - cx).powi(2) + (r.cy - cy).powi(2)).sqrt();
                    (d, usize::MAX - r.area, r.label, i)
                })
                .collect();
            scored.sort_by(|a, b| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            let mut keep: Vec<usize> = scored[..2].iter().map(|s| s.3).collect();
            keep.sort_unstable();
            let mut kept = Vec::with_capacity(2);
            for i in keep.into_iter().rev() {
                kept.push(regs.swap_remove(i));
            }
            kept.sort_by_key(|r| r.label);
            regs = kept;
        }
        if regs.len() == 2 {
            let (big, small) = if regs[0].area >= regs[1].area { (0, 1) } else { (1, 0) };
            if (regs[small].area as f64) < regs[big].area as f64 / 3.0 {
                let keep = regs.swap_remove(big);
                regs = vec![keep];
            }
        }
        let tight = if regs.len() == 1 {
            status.mirrored = true;
            let r = &regs[0];
            let mx0 = w - 1 - r.x1;
            let mx1 = w - 1 - r.x0;
            BoundingBox {
                x0: r.x0.min(mx0),
                y0: r.y0,
                x1: r.x1.max(mx1),
                y1: r.y1,
            }
        } else {
            BoundingBox {
                x0: regs[0].x0.min(regs[1].x0),
                y0: regs[0].y0.min(regs[1].y0),
                x1: regs[0].x1.max(regs[1].x1),
                y1: regs[0].y1.max(regs[1].y1),
            }
        };
        (Some(expand_box(&tight, w, h, scaled_margins(w, h))), status)
    }
}

fn random_mask(rng: &mut Rng, w: usize, h: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(w, h);
    let blob_count = rng.below(6); // 0..=5 components before merging
    for _ in 0..blob_count {
        let bw = 2 + rng.below(w / 3);
        let bh = 2 + rng.below(h / 3);
        let x0 = rng.below(w - bw + 1);
        let y0 = rng.below(h - bh + 1);
        if rng.chance(0.5) {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    mask.set(x, y, true);
                }
            }
        } else {
            // Ellipse blob.
            let (cx, cy) = (x0 as f64 + bw as f64 / 2.0, y0 as f64 + bh as f64 / 2.0);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let dx = (x as f64 - cx) / (bw as f64 / 2.0);
                    let dy = (y as f64 - cy) / (bh as f64 / 2.0);
                    if dx * dx + dy * dy <= 1.0 {
                        mask.set(x, y, true);
                    }
                }
            }
        }
    }
    // Salt noise creates single-pixel components.
    let salt = rng.below(4);
    for _ in 0..salt {
        mask.set(rng.below(w), rng.below(h), true);
    }
    mask
}

fn criterion_lrg_oracle() -> Result<String> {
    let start = Instant::now();
    let mut rng = Rng::new(0xC2);
    let mut counts = [0usize; 4]; // 0, 1, 2, >=3 component cases
    let cases = 1200;
    for case in 0..cases {
        let (w, h) = (48 + rng.below(80), 48 + rng.below(80));
        let mask = random_mask(&mut rng, w, h);
        let components = label_components(&mask).len();
        counts[components.min(3)] += 1;

        let image = GrayImage::new(w, h);
        let (crop, bbox, status) = generate_lung_region(&image, &mask)?;
        let (oracle_box, oracle_status) = lrg_oracle::lung_box(&mask);
        match oracle_box {
            None => {
                if !status.fallback
                    || bbox != (BoundingBox { x0: 0, y0: 0, x1: w - 1, y1: h - 1 })
                {
                    return Err(fail(format!("case {case}: fallback mismatch")));
                }
            }
            Some(expected) => {
                if bbox != expected {
                    return Err(fail(format!(
                        "case {case}: box {bbox:?} vs oracle {expected:?} ({} components)",
                        components
                    )));
                }
                if status != oracle_status {
                    return Err(fail(format!(
                        "case {case}: status {status} vs oracle {oracle_status}"
                    )));
                }
            }
        }
        if crop.width != bbox.width() || crop.height != bbox.height() {
            return Err(fail(format!("case {case}: crop extent mismatch")));
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(fail(format!("mask generator produced no {k}-component cases")));
        }
    }
    check_runtime(start, 60.0, "LRG oracle sweep")?;
    Ok(format!(
        "{cases} masks (components 0/1/2/3+: {}/{}/{}/{}), 0 mismatches",
        counts[0], counts[1], counts[2], counts[3]
    ))
}

// ── Criterion 3: closed-form values ─────────────────────────────────────

fn criterion_closed_forms() -> Result<String> {
    let approx = |a: f64, b: f64| (a - b).abs() < 1e-12;

    let rect = |ones: std::ops::Range<usize>| {
        let mut bits = vec![false; 200];
        for i in ones {
            bits[i] = true;
        }
        BinaryMask::from_bits(20, 10, bits).unwrap()
    };
    let x = rect(0..100);
    let y = rect(100..200);
    let z = rect(50..150);
    let empty = BinaryMask::new(20, 10);
    if !approx(dice(&x, &x)?, 1.0)
        || !approx(dice(&x, &y)?, 0.0)
        || !approx(dice(&x, &z)?, 0.5)
        || !approx(dice(&empty, &empty)?, 1.0)
    {
        return Err(fail("dice closed forms".into()));
    }
    if !approx(iou(&x, &x)?, 1.0)
        || !approx(iou(&x, &z)?, 1.0 / 3.0)
        || !approx(iou(&empty, &empty)?, 1.0)
    {
        return Err(fail("iou closed forms".into()));
    }

    // Sigmoid closed forms.
    let mut tape = Tape::new();
    let logits = tape.constant(vec![3], vec![0.0, 3.0f64.ln(), -40.0])?;
    let s = tape.sigmoid(logits);
    let sv = tape.data(s);
    if sv[0] != 0.5 || !approx(sv[1], 0.75) || !(sv[2] > 0.0 && sv[2] <= 1e-15) {
        return Err(fail("sigmoid closed forms".into()));
    }

    // BCE closed forms.
    let truth: Vec<f64> = (0..NUM_CLASSES).map(|i| f64::from(i % 2 == 0)).collect();
    if !approx(bce_slices(&truth, &[0.5; NUM_CLASSES])?, std::f64::consts::LN_2) {
        return Err(fail("BCE at 0.5 is not ln 2".into()));
    }
    let perfect = bce_slices(&truth, &truth)?;
    if !(perfect >= 0.0 && perfect <= -((1.0f64 - BCE_EPS).ln()) + 1e-18) {
        return Err(fail("BCE at the truth exceeds the clamp loss".into()));
    }

    // DSC-IoU identity on random pairs.
    let mut rng = Rng::new(0xC3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = BinaryMask::from_bits(8, 8, (0..64).map(|_| rng.chance(0.4)).collect()).unwrap();
        let b = BinaryMask::from_bits(8, 8, (0..64).map(|_| rng.chance(0.4)).collect()).unwrap();
        let d = dice(&a, &b)?;
        let j = iou(&a, &b)?;
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    if worst >= 1e-12 {
        return Err(fail(format!("DSC-IoU identity deviates by {worst:.3e}")));
    }
    Ok(format!("all closed forms exact; identity max deviation {worst:.2e}"))
}

// ── Criterion 4: AUC vs pair counting ───────────────────────────────────

fn auc_pair_counting(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs as f64
}

fn criterion_auc_oracle() -> Result<String> {
    let start = Instant::now();
    let mut rng = Rng::new(0xC4);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = 5 + rng.below(196);
        let scores: Vec<f64> = (0..n).map(|_| (rng.uniform() * 10.0).floor() / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.chance(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (curve, auc) = roc_auc(&scores, &labels)?;
        let expected = auc_pair_counting(&scores, &labels);
        let err = (auc - expected).abs();
        if err >= 1e-9 {
            return Err(fail(format!("case {case}: AUC {auc} vs oracle {expected}")));
        }
        worst = worst.max(err.max((curve.trapezoid_area() - expected).abs()));
    }
    let reference_mean = mean_auc(&REFERENCE_FUSED_AUCS)?;
    if (reference_mean - 0.815).abs() > 0.0005 {
        return Err(fail(format!("reference column mean {reference_mean} not 0.815 +- 0.0005")));
    }
    check_runtime(start, 60.0, "AUC oracle sweep")?;
    Ok(format!("100 score sets, max |rank - pairs| {worst:.2e}; reference mean {reference_mean:.4}"))
}

// ── Criterion 5: t-test vs quadrature ───────────────────────────────────

fn t_two_tailed_quadrature(t: f64, df: f64) -> f64 {
    let f = |x: f64| (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    #[allow(clippy::too_many_arguments)]
    fn simpson(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fb: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() < 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(f, a, m, fa, fm, flm, tol / 2.0, depth - 1)
                + simpson(f, m, b, fm, fb, frm, tol / 2.0, depth - 1)
        }
    }
    let integrate = |a: f64, b: f64| {
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        simpson(&f, a, b, fa, fb, fm, 1e-13, 40)
    };
    let upper = 1e4;
    let t = t.abs().min(upper);
    1.0 - integrate(0.0, t) / integrate(0.0, upper)
}

fn criterion_t_test_oracle() -> Result<String> {
    let mut rng = Rng::new(0xC5);
    let mut worst = 0.0f64;
    for &n in &[5usize, 14, 30] {
        for _ in 0..10 {
            let a: Vec<f64> = (0..n).map(|_| rng.range(0.0, 1.0)).collect();
            let b: Vec<f64> = a.iter().map(|&v| v + rng.range(-0.08, 0.12)).collect();
            let r = paired_t_test(&a, &b)?;
            let expected = t_two_tailed_quadrature(r.t, (n - 1) as f64);
            let err = (r.p_two_tailed - expected).abs();
            if err >= 1e-8 {
                return Err(fail(format!(
                    "n={n}: p {} vs quadrature {expected} (err {err:.2e})",
                    r.p_two_tailed
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("n in {{5,14,30}}, max |p - quadrature| {worst:.2e}"))
}

// ── Criterion 6: CAM oracle + exchange identity ─────────────────────────

fn tiny_extractor(seed: u64) -> TrainedModel<MiniDenseNetConfig> {
    let config = MiniDenseNetConfig {
        input_size: 32,
        growth_rate: 4,
        blocks: vec![2],
        stem_channels: 8,
        feature_dim: 16,
        num_classes: NUM_CLASSES,
        batch_norm: true,
    };
    let net = MiniDenseNet::init(config.clone(), seed).unwrap();
    TrainedModel {
        config,
        params: net.params,
        history: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NAN,
    }
}

fn criterion_cam_oracle() -> Result<String> {
    let start = Instant::now();
    let mut worst_oracle = 0.0f64;
    let mut worst_identity = 0.0f64;
    for seed in 0..100u64 {
        let mut model = SdfnModel::new(
            tiny_extractor(derive_seed(0xC6, seed)),
            tiny_extractor(derive_seed(0xC66, seed)),
        );
        let mut rng = Rng::new(derive_seed(0xC6AA, seed));
        for w in &mut model.fusion_weights {
            *w = rng.range(-1.0, 1.0);
        }
        for b in &mut model.fusion_bias {
            *b = rng.range(-0.5, 0.5);
        }
        let whole = GrayImage::from_data(32, 32, (0..1024).map(|_| rng.uniform()).collect())?;
        let crop = GrayImage::from_data(32, 32, (0..1024).map(|_| rng.uniform()).collect())?;
        let class = (seed % NUM_CLASSES as u64) as usize;
        let (h1, h2) = model.cam(&whole, &crop, class)?;

        // Double-loop weighted-sum oracle over the raw feature maps.
        let mut g_net = model.extractor_global.network();
        let mut l_net = model.extractor_local.network();
        let g = g_net.predict(batch_from_images(&[whole.clone()])?)?;
        let l = l_net.predict(batch_from_images(&[crop.clone()])?)?;
        let width = model.concat_width();
        let kg = model.extractor_global.config.feature_dim;
        let plane = h1.width * h1.height;
        for p in 0..plane {
            let mut acc = 0.0;
            for j in 0..kg {
                acc +=
                    model.fusion_weights[class * width + j] * g.feature_maps.data[j * plane + p];
            }
            let err = (h1.values[p] - acc).abs();
            if err >= 1e-12 {
                return Err(fail(format!("seed {seed}: heatmap1 deviates by {err:.2e}")));
            }
            worst_oracle = worst_oracle.max(err);
        }
        let plane2 = h2.width * h2.height;
        let kl = model.extractor_local.config.feature_dim;
        for p in 0..plane2 {
            let mut acc = 0.0;
            for j in 0..kl {
                acc += model.fusion_weights[class * width + kg + j]
                    * l.feature_maps.data[j * plane2 + p];
            }
            let err = (h2.values[p] - acc).abs();
            if err >= 1e-12 {
                return Err(fail(format!("seed {seed}: heatmap2 deviates by {err:.2e}")));
            }
            worst_oracle = worst_oracle.max(err);
        }

        // Exchange identity: mean(h1) + mean(h2) + bias = logit.
        let feats = model.features(&whole, &crop)?;
        let logits = model.logits(&feats);
        let lhs = h1.mean() + h2.mean() + model.fusion_bias[class];
        let err = (lhs - logits[class]).abs();
        if err >= 1e-10 {
            return Err(fail(format!(
                "seed {seed}: exchange identity off by {err:.2e}"
            )));
        }
        worst_identity = worst_identity.max(err);
    }
    check_runtime(start, 300.0, "CAM oracle sweep")?;
    Ok(format!(
        "100 models: oracle max {worst_oracle:.2e}, identity max {worst_identity:.2e}"
    ))
}

// ── Criterion 7: freeze invariant ───────────────────────────────────────

fn criterion_freeze() -> Result<String> {
    let spec = PhantomSpec {
        extent: 64,
        patient_count: 50,
        images_per_patient: 2,
        ..Default::default()
    };
    let records: Vec<_> = gen_phantom(&spec, 0xC7).collect();
    let config = MiniDenseNetConfig::default();
    let global = tiny_trained(&config, 0xC71);
    let local = tiny_trained(&config, 0xC72);
    let mut model = SdfnModel::new(global, local);
    let before_global = model.extractor_global.params.checksum();
    let before_local = model.extractor_local.params.checksum();

    let items: Vec<(GrayImage, GrayImage, LabelVector, String)> = records
        .iter()
        .map(|r| (r.image.clone(), r.image.clone(), r.labels, r.patient_id.clone()))
        .collect();
    let samples = extract_fusion_samples(&model, &items, false)?;
    let tc = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 5,
        batch_size: 16,
        ..TrainConfig::classifier_default(0xC7)
    };
    train_fusion(&mut model, &samples, &tc)?;

    let after_global = model.extractor_global.params.checksum();
    let after_local = model.extractor_local.params.checksum();
    if after_global != before_global || after_local != before_local {
        return Err(fail("extractor parameters changed during fusion training".into()));
    }
    Ok(format!(
        "100 phantoms, 5 epochs: checksums {before_global:016x}/{before_local:016x} unchanged"
    ))
}

fn tiny_trained(config: &MiniDenseNetConfig, seed: u64) -> TrainedModel<MiniDenseNetConfig> {
    let net = MiniDenseNet::init(config.clone(), seed).unwrap();
    TrainedModel {
        config: config.clone(),
        params: net.params,
        history: Vec::new(),
        best_epoch: 0,
        best_metric: f64::NAN,
    }
}

// ── Criterion 8: segmenter capability ───────────────────────────────────

fn criterion_segmenter() -> Result<String> {
    let start = Instant::now();
    // 400 training phantoms (patients 0..99) plus 80 held-out phantoms.
    let spec = PhantomSpec {
        extent: 64,
        patient_count: 120,
        images_per_patient: 4,
        ..Default::default()
    };
    let records: Vec<_> = gen_phantom(&spec, 0xC8).collect();
    let (train_recs, held_out) = records.split_at(400);

    let samples: Vec<SegmenterSample> = train_recs
        .iter()
        .map(|r| SegmenterSample {
            image: r.image.clone(),
            mask: r.lung_mask.clone(),
            group: r.patient_id.clone(),
        })
        .collect();
    let config = MiniUNetConfig { input_size: 64, depth: 3, base_channels: 4, batch_norm: true };
    let tc = TrainConfig { max_epochs: 12, ..TrainConfig::segmenter_default(0xC8) };
    if tc.max_epochs > 50 {
        return Err(fail("epoch budget exceeds 50".into()));
    }
    let model = train_segmenter(&config, &samples, &tc)?;
    let mut net = model.network();

    let mut dsc_sum = 0.0;
    for chunk in held_out.chunks(8) {
        let images: Vec<GrayImage> = chunk.iter().map(|r| r.image.clone()).collect();
        let probs = net.predict(batch_from_images(&images)?)?;
        let plane = 64 * 64;
        for (k, r) in chunk.iter().enumerate() {
            let img =
                GrayImage::from_data(64, 64, probs.data[k * plane..(k + 1) * plane].to_vec())?;
            let mask = BinaryMask::from_probabilities(&img);
            dsc_sum += dice(&mask, &r.lung_mask)?;
        }
    }
    let mean_dsc = dsc_sum / held_out.len() as f64;
    check_runtime(start, 600.0, "segmenter training")?;
    if mean_dsc < 0.95 {
        return Err(fail(format!("held-out DSC {mean_dsc:.4} < 0.95")));
    }
    Ok(format!(
        "held-out DSC {mean_dsc:.4} after {} epochs (best epoch {})",
        tc.max_epochs, model.best_epoch
    ))
}

// ── Criterion 9: directional ordering ───────────────────────────────────

struct DirectionalOutcome {
    global_small: f64,
    local_small: f64,
    global_out: f64,
    local_out: f64,
    global_mean: f64,
    local_mean: f64,
    fused_mean: f64,
}

fn directional_run(seed: u64) -> Result<DirectionalOutcome> {
    // 2000-image corpus at 256 px with 2-3 px small lesions.
    let mut spec = PhantomSpec {
        extent: 256,
        patient_count: 250,
        images_per_patient: 8,
        ..Default::default()
    };
    spec.lesion_size[SMALL_LESION_CLASS] = LesionRange { min_px: 2, max_px: 3 };
    let records: Vec<_> = gen_phantom(&spec, seed).collect();

    // Patient-grouped 80/20 split.
    let groups: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let folds = sdfn_core::metrics::kfold_split(&groups, 5, seed)?;
    let test_idx = &folds[0];
    let train_idx: Vec<usize> = folds[1..].iter().flatten().copied().collect();

    // Views: global = whole image at 4x downsampling, which pushes the
    // planted dots below one pixel; local = lung-box crop at 128 px, where
    // the dots stay above a pixel. The resolution asymmetry is the
    // mechanism under test.
    let global_input = 64usize;
    let local_input = 128usize;
    let mut whole_views = Vec::with_capacity(records.len());
    let mut crop_views = Vec::with_capacity(records.len());
    for r in &records {
        whole_views.push(resize_bilinear(&r.image, global_input, global_input)?);
        let (crop, _, _) = generate_lung_region(&r.image, &r.lung_mask)?;
        crop_views.push(resize_bilinear(&crop, local_input, local_input)?);
    }

    let global_config = MiniDenseNetConfig { input_size: global_input, ..Default::default() };
    let local_config = MiniDenseNetConfig { input_size: local_input, ..Default::default() };
    let tc = |epochs: usize| TrainConfig {
        learning_rate: 3e-3,
        decay: 1e-5,
        batch_size: 16,
        max_epochs: epochs,
        ..TrainConfig::classifier_default(seed)
    };

    let make_samples = |views: &[GrayImage]| -> Vec<ClassifierSample> {
        train_idx
            .iter()
            .map(|&i| ClassifierSample {
                image: views[i].clone(),
                labels: records[i].labels,
                group: records[i].patient_id.clone(),
            })
            .collect()
    };
    let global_model = train_classifier(&global_config, &make_samples(&whole_views), &tc(12))?;
    let local_model = train_classifier(&local_config, &make_samples(&crop_views), &tc(14))?;

    // Stage 3: fusion head on cached GAP features of the frozen extractors.
    let mut model = SdfnModel::new(global_model, local_model);
    let train_items: Vec<(GrayImage, GrayImage, LabelVector, String)> = train_idx
        .iter()
        .map(|&i| {
            (
                whole_views[i].clone(),
                crop_views[i].clone(),
                records[i].labels,
                records[i].patient_id.clone(),
            )
        })
        .collect();
    let fusion_samples = extract_fusion_samples(&model, &train_items, false)?;
    let fusion_tc = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 16,
        max_epochs: 40,
        ..TrainConfig::classifier_default(seed)
    };
    train_fusion(&mut model, &fusion_samples, &fusion_tc)?;

    // Test-split predictions for the three columns.
    let mut g_net = model.extractor_global.network();
    let mut l_net = model.extractor_local.network();
    let truth: Vec<LabelVector> = test_idx.iter().map(|&i| records[i].labels).collect();
    let mut g_probs = Vec::new();
    let mut l_probs = Vec::new();
    let mut f_probs = Vec::new();
    for chunk in test_idx.chunks(16) {
        let wholes: Vec<GrayImage> = chunk.iter().map(|&i| whole_views[i].clone()).collect();
        let crops: Vec<GrayImage> = chunk.iter().map(|&i| crop_views[i].clone()).collect();
        let g = g_net.predict(batch_from_images(&wholes)?)?;
        let l = l_net.predict(batch_from_images(&crops)?)?;
        let k_g = g.gap.shape[1];
        let k_l = l.gap.shape[1];
        for i in 0..chunk.len() {
            g_probs.push(LabelVector::from_slice(
                &g.probs.data[i * NUM_CLASSES..(i + 1) * NUM_CLASSES],
            )?);
            l_probs.push(LabelVector::from_slice(
                &l.probs.data[i * NUM_CLASSES..(i + 1) * NUM_CLASSES],
            )?);
            let mut feats = g.gap.data[i * k_g..(i + 1) * k_g].to_vec();
            feats.extend_from_slice(&l.gap.data[i * k_l..(i + 1) * k_l]);
            f_probs.push(model.head(&feats));
        }
    }

    let auc_of = |probs: &[LabelVector], class: usize| -> Result<f64> {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let labels: Vec<bool> = truth.iter().map(|t| t[class] != 0.0).collect();
        Ok(roc_auc(&scores, &labels)?.1)
    };
    let mean_of = |probs: &[LabelVector]| -> Result<f64> {
        let aucs = sdfn_core::metrics::per_class_auc(probs, &truth)?;
        mean_auc(&aucs)
    };

    Ok(DirectionalOutcome {
        global_small: auc_of(&g_probs, SMALL_LESION_CLASS)?,
        local_small: auc_of(&l_probs, SMALL_LESION_CLASS)?,
        global_out: auc_of(&g_probs, OUT_OF_LUNG_CLASS)?,
        local_out: auc_of(&l_probs, OUT_OF_LUNG_CLASS)?,
        global_mean: mean_of(&g_probs)?,
        local_mean: mean_of(&l_probs)?,
        fused_mean: mean_of(&f_probs)?,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn criterion_directional() -> Result<String> {
    let start = Instant::now();
    let seeds = [901u64, 902, 903, 904, 905];
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        outcomes.push(directional_run(seed)?);
    }
    let collect = |f: &dyn Fn(&DirectionalOutcome) -> f64| -> f64 {
        let mut v: Vec<f64> = outcomes.iter().map(f).collect();
        median(&mut v)
    };
    let local_small = collect(&|o| o.local_small);
    let global_small = collect(&|o| o.global_small);
    let global_out = collect(&|o| o.global_out);
    let local_out = collect(&|o| o.local_out);
    let global_mean = collect(&|o| o.global_mean);
    let local_mean = collect(&|o| o.local_mean);
    let fused_mean = collect(&|o| o.fused_mean);

    check_runtime(start, 3600.0, "directional runs")?;
    if local_small - global_small < 0.03 {
        return Err(fail(format!(
            "small-lesion class: local {local_small:.3} vs global {global_small:.3} (gap < 0.03)"
        )));
    }
    if global_out <= local_out {
        return Err(fail(format!(
            "out-of-lung class: global {global_out:.3} not above local {local_out:.3}"
        )));
    }
    if fused_mean < global_mean.max(local_mean) - 0.005 {
        return Err(fail(format!(
            "fused mean {fused_mean:.4} below max(global {global_mean:.4}, local {local_mean:.4}) - 0.005"
        )));
    }
    Ok(format!(
        "small: local {local_small:.3} > global {global_small:.3}; out-of-lung: global {global_out:.3} > local {local_out:.3}; mean: fused {fused_mean:.4} vs {global_mean:.4}/{local_mean:.4}"
    ))
}

// ── Criterion 10: end-to-end determinism ────────────────────────────────

fn criterion_determinism() -> Result<String> {
    use crate::config::PipelineConfig;
    use crate::pipeline::{Pipeline, View};

    let base = std::env::temp_dir().join(format!("sdfn-verify-det-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);

    let run = |tag: &str| -> Result<std::path::PathBuf> {
        let root = base.join(tag);
        let mut config = PipelineConfig::default().with_seed(0xD10);
        config.corpus_dir = root.join("corpus");
        config.weights_dir = root.join("weights");
        config.reports_dir = root.join("reports");
        config.phantom.extent = 64;
        config.phantom.patient_count = 40;
        config.phantom.images_per_patient = 3;
        config.phantom.prevalence = [0.35; NUM_CLASSES];
        config.segmenter = MiniUNetConfig {
            input_size: 64,
            depth: 2,
            base_channels: 4,
            batch_norm: true,
        };
        config.seg_train.max_epochs = 2;
        config.extractor_train.max_epochs = 2;
        config.extractor_train.learning_rate = 1e-3;
        config.fusion_train.max_epochs = 5;
        config.fusion_train.learning_rate = 1e-2;

        let pipeline = Pipeline::new(config)?;
        pipeline.gen_data()?;
        pipeline.train_seg()?;
        pipeline.run_lrg()?;
        pipeline.train_extractor(View::Global)?;
        pipeline.train_extractor(View::Local)?;
        pipeline.train_fusion()?;
        pipeline.evaluate()?;
        pipeline.cam(
            &["img_00000".to_string(), "img_00005".to_string()],
            &[SMALL_LESION_CLASS, OUT_OF_LUNG_CLASS],
        )?;
        Ok(root)
    };

    let a = run("a")?;
    let b = run("b")?;

    // Byte-compare every artifact the two runs produced.
    let mut files_a = Vec::new();
    collect_files(&a, &mut files_a)?;
    files_a.sort();
    let mut compared = 0usize;
    for fa in &files_a {
        let rel = fa.strip_prefix(&a).unwrap();
        let fb = b.join(rel);
        let ba = std::fs::read(fa)?;
        let bb = std::fs::read(&fb).map_err(|_| {
            fail(format!("second run is missing {}", rel.display()))
        })?;
        if ba != bb {
            return Err(fail(format!("{} differs between runs", rel.display())));
        }
        compared += 1;
    }
    let _ = std::fs::remove_dir_all(&base);
    if compared == 0 {
        return Err(fail("no artifacts produced".into()));
    }
    Ok(format!("two full runs produced {compared} byte-identical artifacts"))
}

fn collect_files(dir: &std::path::Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
