//! Direct 2-D cross-correlation kernels (forward, input grad, weight grad).
//!
//! Work is split over independent output planes; each plane is produced by
//! one task with a fixed accumulation order, so results do not depend on the
//! thread count.

use crate::par;

/// Valid output-column range for a kernel column offset, i.e. all `ox` with
/// `0 <= ox*stride + kx - pad < input_w`.
fn ox_range(kx: usize, pad: usize, stride: usize, input_w: usize, ow: usize) -> (usize, usize) {
    let shift = kx as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize + stride - 1) / stride };
    let hi_excl = if shift >= input_w as isize {
        0
    } else {
        (((input_w as isize - 1 - shift) as usize) / stride + 1).min(ow)
    };
    (lo.min(hi_excl), hi_excl)
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    x: &[f64],
    (_n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (k, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    out: &mut [f64],
    (oh, ow): (usize, usize),
) {
    let plane = oh * ow;
    par::for_each_chunk_mut(out, plane, |p, out_plane| {
        let (bi, ki) = (p / k, p % k);
        out_plane.fill(bias[ki]);
        for ci in 0..c {
            let x_plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((ki * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = ox_range(kx, pad, stride, w, ow);
                    let sx = kx as isize - pad as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * w..iy as usize * w + w];
                        let o_row = &mut out_plane[oy * ow..oy * ow + ow];
                        if stride == 1 {
                            let xs = &x_row[(lo as isize + sx) as usize..(hi as isize + sx) as usize];
                            for (o, xv) in o_row[lo..hi].iter_mut().zip(xs) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * stride) as isize + sx;
                                o_row[ox] += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn backward_input(
    wt: &[f64],
    (_n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    dy: &[f64],
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let plane = h * w;
    // One task per (sample, input channel) plane.
    par::for_each_chunk_mut(dx, plane, |p, dx_plane| {
        let (bi, ci) = (p / c, p % c);
        for ki in 0..k {
            let dy_plane = &dy[(bi * k + ki) * oh * ow..(bi * k + ki + 1) * oh * ow];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((ki * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = ox_range(kx, pad, stride, w, ow);
                    let sx = kx as isize - pad as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dx_row = &mut dx_plane[iy as usize * w..iy as usize * w + w];
                        let g_row = &dy_plane[oy * ow..oy * ow + ow];
                        if stride == 1 {
                            let ds =
                                &mut dx_row[(lo as isize + sx) as usize..(hi as isize + sx) as usize];
                            for (d, g) in ds.iter_mut().zip(&g_row[lo..hi]) {
                                *d += wv * g;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = (ox * stride) as isize + sx;
                                dx_row[ix as usize] += wv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn backward_weights(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (k, kh, kw): (usize, usize, usize),
    dy: &[f64],
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let kernel = c * kh * kw;
    // One task per output channel; samples accumulate in index order.
    par::for_each_chunk_mut(dw, kernel, |ki, dw_k| {
        for bi in 0..n {
            let dy_plane = &dy[(bi * k + ki) * oh * ow..(bi * k + ki + 1) * oh * ow];
            for ci in 0..c {
                let x_plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = ox_range(kx, pad, stride, w, ow);
                        let sx = kx as isize - pad as isize;
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * w..iy as usize * w + w];
                            let g_row = &dy_plane[oy * ow..oy * ow + ow];
                            if stride == 1 {
                                let xs =
                                    &x_row[(lo as isize + sx) as usize..(hi as isize + sx) as usize];
                                for (g, xv) in g_row[lo..hi].iter().zip(xs) {
                                    acc += g * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + sx;
                                    acc += g_row[ox] * x_row[ix as usize];
                                }
                            }
                        }
                        dw_k[(ci * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
}
