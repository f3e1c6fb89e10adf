use super::gradcheck::grad_check;
use super::layers::{layer_forward, LayerSpec};
use super::loss::{bce_slices, pixelwise_ce, BCE_EPS};
use super::*;
use crate::lrg::BinaryMask;
use crate::rng::Rng;

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.range(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Six-nested-loop direct cross-correlation, kept deliberately naive.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * k * oh * ow];
    for bi in 0..n {
        for ki in 0..k {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[ki];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt[((ki * c + ci) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((bi * k + ki) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_scalar_product() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 1, 1], vec![3.0]).unwrap();
    let w = tape.constant(vec![1, 1, 1, 1], vec![2.0]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.data(y), &[6.0]);
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
}

#[test]
fn conv_averaging_kernel_preserves_constants_in_interior() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 6, 6], vec![0.42; 36]).unwrap();
    let w = tape.constant(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 6, 6]);
    let out = tape.data(y);
    for oy in 1..5 {
        for ox in 1..5 {
            assert!((out[oy * 6 + ox] - 0.42).abs() < 1e-15);
        }
    }
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = Rng::new(2024);
    let x = random_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let expected = conv_oracle(&x.data, (2, 3, 8, 8), &w.data, (4, 3, 3), &b.data, 2, 1);

    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x), tape.leaf(w), tape.leaf(b));
    let y = tape.conv2d(xi, wi, bi, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 4, 4]);
    for (got, want) in tape.data(y).iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_bad_extent() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2, 4, 4], vec![0.0; 32]).unwrap();
    let w = tape.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    assert!(matches!(tape.conv2d(x, w, b, 1, 0), Err(crate::Error::ShapeMismatch(_))));

    let w2 = tape.constant(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
    assert!(matches!(tape.conv2d(x, w2, b, 1, 0), Err(crate::Error::InvalidConfig(_))));
}

#[test]
fn conv_is_linear_in_its_input() {
    let mut rng = Rng::new(5);
    let xa = random_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let xb = random_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let zero_b = Tensor::zeros(vec![3]);
    let (alpha, beta) = (1.75, -0.6);

    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(zero_b.clone()));
        let y = tape.conv2d(xi, wi, bi, 1, 1).unwrap();
        tape.data(y).to_vec()
    };

    let mixed = Tensor::new(
        vec![1, 2, 6, 6],
        xa.data.iter().zip(&xb.data).map(|(a, b)| alpha * a + beta * b).collect(),
    )
    .unwrap();
    let lhs = run(&mixed);
    let (ya, yb) = (run(&xa), run(&xb));
    for i in 0..lhs.len() {
        let rhs = alpha * ya[i] + beta * yb[i];
        assert!((lhs[i] - rhs).abs() < 1e-10, "{} vs {rhs}", lhs[i]);
    }
}

#[test]
fn relu_clamps_negatives() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = tape.relu(x);
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn concat_of_1024_and_1024_channels_gives_2048() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![1, 1024, 1, 1], vec![1.0; 1024]).unwrap();
    let b = tape.constant(vec![1, 1024, 1, 1], vec![2.0; 1024]).unwrap();
    let y = tape.concat_channels(&[a, b]).unwrap();
    assert_eq!(tape.shape(y), &[1, 2048, 1, 1]);
    assert_eq!(tape.data(y)[0], 1.0);
    assert_eq!(tape.data(y)[1024], 2.0);
}

#[test]
fn concat_rejects_mismatched_trailing_dims() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap();
    let b = tape.constant(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap();
    assert!(tape.concat_channels(&[a, b]).is_err());
}

#[test]
fn batch_norm_training_moments_match_statistics_oracle() {
    // After normalize-scale-shift, each channel's mean equals the shift and
    // its population variance equals scale^2 (up to eps).
    let mut rng = Rng::new(99);
    let x = random_tensor(&mut rng, &[4, 3, 5, 5], -2.0, 3.0);
    let gamma = Tensor::new(vec![3], vec![1.5, 0.5, 2.0]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.3, -1.0, 0.0]).unwrap();

    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.leaf(x), tape.leaf(gamma.clone()), tape.leaf(beta.clone()));
    let mut stats = BnStats::new(3);
    let y = tape.batch_norm(xi, gi, bi, &mut stats, true, 0.9, 1e-8).unwrap();

    // Direct per-channel moment oracle over the output.
    let out = tape.data(y);
    let plane = 25;
    for ch in 0..3 {
        let mut values = Vec::new();
        for n in 0..4 {
            let base = (n * 3 + ch) * plane;
            values.extend_from_slice(&out[base..base + plane]);
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        assert!((mean - beta.data[ch]).abs() < 1e-6, "channel {ch}: mean {mean}");
        assert!(
            (var - gamma.data[ch] * gamma.data[ch]).abs() < 1e-6,
            "channel {ch}: var {var}"
        );
    }
}

#[test]
fn batch_norm_running_stats_update_with_momentum() {
    let x = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
    let gamma = Tensor::new(vec![1], vec![1.0]).unwrap();
    let beta = Tensor::new(vec![1], vec![0.0]).unwrap();
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.leaf(x), tape.leaf(gamma), tape.leaf(beta));
    let mut stats = BnStats::new(1);
    tape.batch_norm(xi, gi, bi, &mut stats, true, 0.9, 1e-8).unwrap();
    // batch mean 4, batch var 5; running starts at (0, 1).
    assert!((stats.mean[0] - 0.4).abs() < 1e-12);
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0)).abs() < 1e-12);
}

#[test]
fn batch_norm_rejects_empty_batch() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![0, 2, 2, 2], vec![]).unwrap();
    let g = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
    let mut stats = BnStats::new(2);
    assert!(tape.batch_norm(x, g, b, &mut stats, true, 0.9, 1e-8).is_err());
}

#[test]
fn gap_constant_plane_returns_the_constant() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 4, 4], vec![0.7; 16]).unwrap();
    let y = tape.global_avg_pool(x).unwrap();
    assert!((tape.data(y)[0] - 0.7).abs() < 1e-15);
}

#[test]
fn gap_two_by_two_plane() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.data(y), &[2.5]);
}

#[test]
fn gap_matches_per_plane_mean_oracle() {
    let mut rng = Rng::new(17);
    let x = random_tensor(&mut rng, &[2, 8, 7, 7], -1.0, 1.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let y = tape.global_avg_pool(xi).unwrap();
    let out = tape.data(y);
    for p in 0..16 {
        let plane = &x.data[p * 49..(p + 1) * 49];
        let mean = plane.iter().sum::<f64>() / 49.0;
        assert!((out[p] - mean).abs() < 1e-12);
        let (lo, hi) = plane.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(out[p] >= lo && out[p] <= hi);
    }
}

#[test]
fn sigmoid_closed_forms_and_saturation() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![3], vec![0.0, 3.0f64.ln(), -40.0]).unwrap();
    let y = tape.sigmoid(x);
    let out = tape.data(y);
    assert_eq!(out[0], 0.5);
    assert!((out[1] - 0.75).abs() < 1e-15);
    assert!(out[2] > 0.0 && out[2] <= 1e-15 && out[2].is_finite());
}

#[test]
fn sigmoid_is_strictly_monotone() {
    let mut rng = Rng::new(31);
    let mut xs: Vec<f64> = (0..200).map(|_| rng.range(-30.0, 30.0)).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    let mut tape = Tape::new();
    let x = tape.constant(vec![xs.len()], xs).unwrap();
    let y = tape.sigmoid(x);
    let out = tape.data(y);
    for w in out.windows(2) {
        assert!(w[0] < w[1]);
    }
    assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn bce_all_half_predictions_give_ln2() {
    let truth: Vec<f64> = (0..14).map(|i| f64::from(i % 2 == 0)).collect();
    let loss = bce_slices(&truth, &[0.5; 14]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_perfect_prediction_is_at_most_clamp_loss() {
    let truth: Vec<f64> = (0..14).map(|i| f64::from(i % 3 == 0)).collect();
    let loss = bce_slices(&truth, &truth).unwrap();
    assert!(loss >= 0.0);
    assert!(loss <= -((1.0f64 - BCE_EPS).ln()) + 1e-18, "loss {loss}");
}

#[test]
fn bce_matches_direct_summation_oracle() {
    let mut rng = Rng::new(123);
    let truth: Vec<f64> = (0..14).map(|_| f64::from(rng.chance(0.4))).collect();
    let pred: Vec<f64> = (0..14).map(|_| rng.uniform()).collect();
    // Direct formula oracle.
    let mut s = 0.0;
    for i in 0..14 {
        let p = pred[i].clamp(1e-7, 1.0 - 1e-7);
        s += truth[i] * p.ln() + (1.0 - truth[i]) * (1.0 - p).ln();
    }
    let expected = -s / 14.0;
    assert!((bce_slices(&truth, &pred).unwrap() - expected).abs() < 1e-12);

    // Tape op agrees with the plain form.
    let mut tape = Tape::new();
    let p = tape.constant(vec![14], pred.clone()).unwrap();
    let l = tape.bce(p, &truth, BCE_EPS).unwrap();
    assert!((tape.data(l)[0] - expected).abs() < 1e-12);
}

#[test]
fn bce_rejects_length_mismatch() {
    assert!(bce_slices(&[1.0, 0.0], &[0.5]).is_err());
}

#[test]
fn bce_is_nonnegative_and_minimized_at_truth() {
    let mut rng = Rng::new(77);
    for _ in 0..50 {
        let truth: Vec<f64> = (0..14).map(|_| f64::from(rng.chance(0.5))).collect();
        let pred: Vec<f64> = (0..14).map(|_| rng.uniform()).collect();
        let at_truth = bce_slices(&truth, &truth).unwrap();
        let at_pred = bce_slices(&truth, &pred).unwrap();
        assert!(at_pred >= 0.0);
        if truth != pred {
            assert!(at_truth < at_pred);
        }
    }
}

#[test]
fn pixelwise_ce_half_predictions_give_ln2_for_any_mask() {
    let mut rng = Rng::new(8);
    let bits: Vec<bool> = (0..256).map(|_| rng.chance(0.3)).collect();
    let mask = BinaryMask::from_bits(16, 16, bits).unwrap();
    let loss = pixelwise_ce(&mask, &[0.5; 256]).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn pixelwise_ce_matches_direct_oracle_and_perfect_prediction() {
    let mut rng = Rng::new(9);
    let bits: Vec<bool> = (0..256).map(|_| rng.chance(0.5)).collect();
    let mask = BinaryMask::from_bits(16, 16, bits.clone()).unwrap();
    let probs: Vec<f64> = (0..256).map(|_| rng.uniform()).collect();

    let mut s = 0.0;
    for i in 0..256 {
        let y = f64::from(bits[i]);
        let p = probs[i].clamp(1e-7, 1.0 - 1e-7);
        s += y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let expected = -s / 256.0;
    assert!((pixelwise_ce(&mask, &probs).unwrap() - expected).abs() < 1e-12);

    let exact: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
    assert!(pixelwise_ce(&mask, &exact).unwrap() <= -((1.0f64 - BCE_EPS).ln()) + 1e-18);

    let short = vec![0.5; 255];
    assert!(pixelwise_ce(&mask, &short).is_err());
}

#[test]
fn backward_linear_product() {
    // loss = w * x with x = 3 -> dloss/dw = 3.
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![1], vec![1.5]).unwrap().with_grad());
    let x = tape.constant(vec![1], vec![3.0]).unwrap();
    let loss = tape.mul(w, x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[3.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad());
    let s = tape.sigmoid(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[0.25]);
}

#[test]
fn backward_errors_on_non_scalar_and_empty_tape() {
    let mut tape = Tape::new();
    assert!(matches!(tape.backward(NodeId(0)), Err(crate::Error::EmptyTape)));
    let x = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(tape.backward(x), Err(crate::Error::NotScalar(_))));
}

#[test]
fn backward_accumulates_on_repeated_calls() {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap().with_grad());
    let x = tape.constant(vec![1], vec![5.0]).unwrap();
    let loss = tape.mul(w, x).unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[10.0]);
}

/// Composite forward: conv -> relu -> GAP -> FC -> sigmoid -> BCE.
fn composite_loss(tape: &mut Tape, ids: &[NodeId]) -> crate::Result<NodeId> {
    let (x, w, b, fw, fb) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
    let c = tape.conv2d(x, w, b, 1, 1)?;
    let r = tape.relu(c);
    let g = tape.global_avg_pool(r)?;
    let l = tape.fully_connected(g, fw, fb)?;
    let s = tape.sigmoid(l);
    tape.bce(s, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], BCE_EPS)
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = Rng::new(4242);
    let params = vec![
        random_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[3, 2, 3, 3], -0.7, 0.7).with_grad(),
        random_tensor(&mut rng, &[3], -0.2, 0.2).with_grad(),
        random_tensor(&mut rng, &[3, 3], -0.8, 0.8).with_grad(),
        random_tensor(&mut rng, &[3], -0.2, 0.2).with_grad(),
    ];
    let err = grad_check(&composite_loss, &params, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn grad_check_pure_linear_layer_is_nearly_exact() {
    let mut rng = Rng::new(55);
    let params = vec![
        random_tensor(&mut rng, &[2, 4], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[3], -1.0, 1.0).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.fully_connected(ids[0], ids[1], ids[2])?;
        Ok(tape.mean_all(y))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-9, "max relative error {err}");
}

/// Every catalog layer in isolation should match central differences to 1e-6.
#[test]
fn grad_check_each_catalog_layer() {
    let mut rng = Rng::new(808);

    // conv2d
    let params = vec![
        random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4, 3, 3, 3], -0.6, 0.6).with_grad(),
        random_tensor(&mut rng, &[4], -0.3, 0.3).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
        Ok(tape.mean_all(y))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "conv2d: {err}");

    // relu (offset inputs away from the kink)
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v = rng.range(0.2, 1.2);
            if rng.chance(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let params = vec![Tensor::new(vec![2, 12], data).unwrap().with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.relu(ids[0]);
        Ok(tape.mean_all(y))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "relu: {err}");

    // batch_norm, training mode (batch statistics). A fixed random
    // projection keeps the loss sensitive to every input element;
    // mean(BN(x)^2) would be invariant to x by construction.
    let params = vec![
        random_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[2], 0.5, 1.5).with_grad(),
        random_tensor(&mut rng, &[2], -0.5, 0.5).with_grad(),
    ];
    let projection = random_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let mut stats = BnStats::new(2);
        let y = tape.batch_norm(ids[0], ids[1], ids[2], &mut stats, true, 0.9, 1e-8)?;
        let r = tape.leaf(projection.clone());
        let proj = tape.mul(y, r)?;
        Ok(tape.mean_all(proj))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "batch_norm train: {err}");

    // batch_norm, inference mode through the catalog dispatch
    let params = vec![
        random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[2], 0.5, 1.5).with_grad(),
        random_tensor(&mut rng, &[2], -0.5, 0.5).with_grad(),
        random_tensor(&mut rng, &[2], -0.2, 0.2),
        random_tensor(&mut rng, &[2], 0.8, 1.2),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let spec = LayerSpec::BatchNorm { channels: 2, eps: 1e-8, momentum: 0.9 };
        let y = layer_forward(tape, &spec, &[ids[0]], &ids[1..5])?;
        Ok(tape.mean_all(y))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "batch_norm inference: {err}");

    // avg_pool2d
    let params = vec![random_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.avg_pool2d(ids[0], 2, 2)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "avg_pool2d: {err}");

    // global_avg_pool
    let params = vec![random_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.global_avg_pool(ids[0])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "global_avg_pool: {err}");

    // fully_connected
    let params = vec![
        random_tensor(&mut rng, &[3, 5], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4, 5], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[4], -0.5, 0.5).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.fully_connected(ids[0], ids[1], ids[2])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "fully_connected: {err}");

    // concat
    let params = vec![
        random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0).with_grad(),
        random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0).with_grad(),
    ];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.concat_channels(&[ids[0], ids[1]])?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "concat: {err}");

    // sigmoid
    let params = vec![random_tensor(&mut rng, &[2, 7], -3.0, 3.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.sigmoid(ids[0]);
        Ok(tape.mean_all(y))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "sigmoid: {err}");

    // upsample (decoder building block)
    let params = vec![random_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        let y = tape.upsample_nearest(ids[0], 2)?;
        let sq = tape.mul(y, y)?;
        Ok(tape.mean_all(sq))
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "upsample: {err}");

    // bce against constant targets
    let params = vec![random_tensor(&mut rng, &[6], 0.1, 0.9).with_grad()];
    let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
        tape.bce(ids[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0], BCE_EPS)
    };
    let err = grad_check(&build, &params, 1e-5).unwrap();
    assert!(err < 1e-6, "bce: {err}");
}

#[test]
fn layer_forward_dispatches_every_kind() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2, 4, 4], (0..32).map(|v| v as f64 / 31.0).collect()).unwrap();

    let conv = LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 1, pad: 1 };
    let cw = tape.constant(vec![3, 2, 3, 3], vec![0.1; 54]).unwrap();
    let cb = tape.constant(vec![3], vec![0.0; 3]).unwrap();
    let y = layer_forward(&mut tape, &conv, &[x], &[cw, cb]).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 4, 4]);

    let y = layer_forward(&mut tape, &LayerSpec::Relu, &[y], &[]).unwrap();
    let y = layer_forward(&mut tape, &LayerSpec::AvgPool2d { window: 2, stride: 2 }, &[y], &[])
        .unwrap();
    assert_eq!(tape.shape(y), &[1, 3, 2, 2]);

    let g = layer_forward(&mut tape, &LayerSpec::GlobalAvgPool, &[y], &[]).unwrap();
    assert_eq!(tape.shape(g), &[1, 3]);

    let fc = LayerSpec::FullyConnected { in_features: 3, out_features: 2 };
    let fw = tape.constant(vec![2, 3], vec![0.5; 6]).unwrap();
    let fb = tape.constant(vec![2], vec![0.0; 2]).unwrap();
    let l = layer_forward(&mut tape, &fc, &[g], &[fw, fb]).unwrap();
    let p = layer_forward(&mut tape, &LayerSpec::Sigmoid, &[l], &[]).unwrap();
    assert!(tape.data(p).iter().all(|&v| v > 0.0 && v < 1.0));

    let cat = layer_forward(&mut tape, &LayerSpec::Concat, &[y, y], &[]).unwrap();
    assert_eq!(tape.shape(cat), &[1, 6, 2, 2]);
}

#[test]
fn layer_spec_validation_catches_inconsistencies() {
    assert!(LayerSpec::Conv2d { in_channels: 1, out_channels: 0, kernel: 3, stride: 1, pad: 0 }
        .validate()
        .is_err());
    assert!(LayerSpec::BatchNorm { channels: 0, eps: 1e-8, momentum: 0.9 }.validate().is_err());
    assert!(LayerSpec::AvgPool2d { window: 0, stride: 1 }.validate().is_err());
    assert!(LayerSpec::FullyConnected { in_features: 0, out_features: 3 }.validate().is_err());
    assert!(LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, pad: 1 }
        .validate()
        .is_ok());
}

#[test]
fn forward_values_stay_finite_on_finite_inputs() {
    let mut rng = Rng::new(13579);
    let mut tape = Tape::new();
    let x = tape.leaf(random_tensor(&mut rng, &[2, 1, 8, 8], 0.0, 1.0).with_grad());
    let w = tape.leaf(random_tensor(&mut rng, &[4, 1, 3, 3], -2.0, 2.0).with_grad());
    let b = tape.leaf(random_tensor(&mut rng, &[4], -1.0, 1.0).with_grad());
    let c = tape.conv2d(x, w, b, 1, 1).unwrap();
    let r = tape.relu(c);
    let g = tape.global_avg_pool(r).unwrap();
    let fw = tape.leaf(random_tensor(&mut rng, &[14, 4], -2.0, 2.0).with_grad());
    let fb = tape.leaf(random_tensor(&mut rng, &[14], -1.0, 1.0).with_grad());
    let l = tape.fully_connected(g, fw, fb).unwrap();
    let s = tape.sigmoid(l);
    let targets: Vec<f64> = (0..28).map(|i| f64::from(i % 2 == 0)).collect();
    let loss = tape.bce(s, &targets, BCE_EPS).unwrap();
    tape.backward(loss).unwrap();
    for id in [x, w, b, fw, fb] {
        assert!(tape.tensor(id).is_finite());
        assert!(tape.grad(id).unwrap().iter().all(|v| v.is_finite()));
    }
}
