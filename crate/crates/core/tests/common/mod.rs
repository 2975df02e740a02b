//! Oracles and fixtures shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtgan_core::config::{RunConfig, Scale};
use vtgan_core::data::{FundusAngioPair, Image, Label};
use vtgan_core::tensor::Padding;
use vtgan_core::train::{StepLosses, Trainer};
use vtgan_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(random_vec(rng, shape.iter().product()), shape).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Leading pad and output extent of one axis, written out from the padding
/// conventions rather than taken from the library.
fn axis(input: usize, k: usize, stride: usize, dilation: usize, padding: Padding, vertical: bool) -> (usize, usize) {
    let span = (k - 1) * dilation + 1;
    let (before, after) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = (input + stride - 1) / stride;
            let need = ((out - 1) * stride + span).saturating_sub(input);
            (need / 2, need - need / 2)
        }
        Padding::Explicit { top, bottom, left, right } => {
            if vertical {
                (top, bottom)
            } else {
                (left, right)
            }
        }
    };
    ((input + before + after - span) / stride + 1, before)
}

/// Direct summation over `[n, h, w, cin]` input and `[k, k, cin, cout]` weights.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv2d(x: &[f64], shape: [usize; 4], w: &[f64], k: usize, cout: usize, stride: usize, dilation: usize, padding: Padding) -> (Vec<f64>, [usize; 4]) {
    let [n, h, wd, cin] = shape;
    let (oh, pt) = axis(h, k, stride, dilation, padding, true);
    let (ow, pl) = axis(wd, k, stride, dilation, padding, false);
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pt as isize;
                            let ix = (ox * stride + kx * dilation) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x[((b * h + iy as usize) * wd + ix as usize) * cin + ci];
                                s += xv * w[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + co] = s;
                }
            }
        }
    }
    (out, [n, oh, ow, cout])
}

/// Per-channel direct summation with `[k, k, c, 1]` weights.
pub fn direct_depthwise(x: &[f64], shape: [usize; 4], w: &[f64], k: usize, stride: usize, dilation: usize, padding: Padding) -> (Vec<f64>, [usize; 4]) {
    let [n, h, wd, c] = shape;
    let (oh, pt) = axis(h, k, stride, dilation, padding, true);
    let (ow, pl) = axis(wd, k, stride, dilation, padding, false);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut s = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - pt as isize;
                            let ix = (ox * stride + kx * dilation) as isize - pl as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                                s += x[((b * h + iy as usize) * wd + ix as usize) * c + ch] * w[(ky * k + kx) * c + ch];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * c + ch] = s;
                }
            }
        }
    }
    (out, [n, oh, ow, c])
}

/// Scatter form of the transposed convolution: every input pixel spreads
/// its kernel-weighted value over the output. Weights are `[k, k, cout, cin]`
/// and the output extent is `out_h x out_w` with "same" padding on it.
#[allow(clippy::too_many_arguments)]
pub fn direct_transposed(x: &[f64], shape: [usize; 4], w: &[f64], k: usize, cout: usize, stride: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let [n, h, wd, cin] = shape;
    let (fh, pt) = axis(out_h, k, stride, 1, Padding::Same, true);
    let (fw, pl) = axis(out_w, k, stride, 1, Padding::Same, false);
    assert_eq!((fh, fw), (h, wd), "output extent not reachable");
    let mut out = vec![0.0; n * out_h * out_w * cout];
    for b in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                for ky in 0..k {
                    for kx in 0..k {
                        let oy = (iy * stride + ky) as isize - pt as isize;
                        let ox = (ix * stride + kx) as isize - pl as isize;
                        if oy < 0 || ox < 0 || oy >= out_h as isize || ox >= out_w as isize {
                            continue;
                        }
                        for co in 0..cout {
                            for ci in 0..cin {
                                out[((b * out_h + oy as usize) * out_w + ox as usize) * cout + co] +=
                                    x[((b * h + iy) * wd + ix) * cin + ci] * w[((ky * k + kx) * cout + co) * cin + ci];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Largest deviation between the library convolutions and the direct
/// oracles over `instances` random configurations of each operator.
pub fn conv_oracle_error(instances: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = [1, 2, 3, 4, 5][r.random_range(0..5)];
        let stride = r.random_range(1..=3);
        let dilation = r.random_range(1..=2);
        let n = r.random_range(1..=2);
        let span = (k - 1) * dilation + 1;
        let h = r.random_range(span.max(1)..span + 6);
        let w = r.random_range(span.max(1)..span + 6);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=4);
        let padding = match r.random_range(0..3) {
            0 => Padding::Same,
            1 => Padding::Valid,
            _ => Padding::Explicit {
                top: r.random_range(0..3),
                bottom: r.random_range(0..3),
                left: r.random_range(0..3),
                right: r.random_range(0..3),
            },
        };
        let shape = [n, h, w, cin];
        let x = random_tensor(&mut r, &shape);

        // dense
        let wt = random_tensor(&mut r, &[k, k, cin, cout]);
        let got = x.conv2d(&wt, None, stride, dilation, padding).unwrap();
        let (want, oshape) = direct_conv2d(x.data(), shape, wt.data(), k, cout, stride, dilation, padding);
        assert_eq!(got.shape(), &oshape[..]);
        worst = worst.max(max_abs_diff(got.data(), &want));

        // depthwise, then separable = depthwise followed by a 1x1 convolution
        let dw = random_tensor(&mut r, &[k, k, cin, 1]);
        let pw = random_tensor(&mut r, &[1, 1, cin, cout]);
        let got = x.depthwise_conv2d(&dw, stride, dilation, padding).unwrap();
        let (mid, mshape) = direct_depthwise(x.data(), shape, dw.data(), k, stride, dilation, padding);
        worst = worst.max(max_abs_diff(got.data(), &mid));
        let got = x.separable_conv2d(&dw, &pw, stride, dilation, padding).unwrap();
        let (want, _) = direct_conv2d(&mid, mshape, pw.data(), 1, cout, 1, 1, Padding::Valid);
        worst = worst.max(max_abs_diff(got.data(), &want));

        // transposed, with an output extent that maps back onto the input
        let (th, tw) = (r.random_range(1..5), r.random_range(1..5));
        let tx = random_tensor(&mut r, &[n, th, tw, cin]);
        let tk = r.random_range(1..=4);
        let tw_ = random_tensor(&mut r, &[tk, tk, cout, cin]);
        let out_h = th * stride - r.random_range(0..stride);
        let out_w = tw * stride - r.random_range(0..stride);
        let got = tx.transposed_conv2d_to(&tw_, None, stride, out_h, out_w).unwrap();
        let want = direct_transposed(tx.data(), [n, th, tw, cin], tw_.data(), tk, cout, stride, out_h, out_w);
        worst = worst.max(max_abs_diff(got.data(), &want));
    }
    worst
}

/// Smooth synthetic image in `[-0.9, 0.9]`.
pub fn textured(h: usize, w: usize, c: usize, phase: f64) -> Image {
    Image::from_fn(h, w, c, |y, x, ch| {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        0.9 * ((6.0 * fx + phase + ch as f64).sin() * (4.0 * fy - 0.5 * phase).cos())
    })
}

/// A fundus/angiogram pair whose angiogram is a fixed function of the fundus.
pub fn synthetic_pair(size: usize, phase: f64, label: Label, id: &str) -> FundusAngioPair {
    let fundus = textured(size, size, 3, phase);
    let angio = Image::from_fn(size, size, 1, |y, x, _| {
        let m = (fundus.get(y, x, 0) + fundus.get(y, x, 1) + fundus.get(y, x, 2)) / 3.0;
        (1.5 * m).tanh()
    });
    FundusAngioPair::new(fundus, angio, label, id, (0, 0)).unwrap()
}

/// Writes `p00..` patients as PNGs plus labels.csv with explicit splits.
pub fn write_dataset(dir: &Path, rows: &[(Label, &str)], h: usize, w: usize) {
    let mut csv = String::from("patient_id,label,split\n");
    for (i, (label, split)) in rows.iter().enumerate() {
        let id = format!("p{i:02}");
        textured(h, w, 3, i as f64 * 0.3).save(&dir.join(format!("{id}_fundus.png"))).unwrap();
        textured(h, w, 1, i as f64 * 0.7).save(&dir.join(format!("{id}_fa.png"))).unwrap();
        csv.push_str(&format!("{id},{label},{split}\n"));
    }
    std::fs::write(dir.join("labels.csv"), csv).unwrap();
}

/// Desk-scale trainer with default hyperparameters.
pub fn desk_trainer(seed: u64) -> Trainer {
    let mut cfg = RunConfig::for_scale(Scale::Desk);
    cfg.seed = seed;
    Trainer::new(cfg).unwrap()
}

/// Every logged loss value of a step, in a fixed order, for bitwise comparison.
pub fn loss_bits(l: &StepLosses) -> Vec<u64> {
    let mut v = Vec::new();
    for d in &l.d {
        v.extend([d.hinge_fine, d.hinge_coarse, d.cce_fine, d.cce_coarse, d.total]);
    }
    let g = &l.g;
    v.extend([
        g.adv_fine, g.adv_coarse, g.mse_fine, g.mse_coarse, g.perc_fine, g.perc_coarse, g.ef_fine, g.ef_coarse, g.adv, g.mse, g.perc, g.ef,
        g.total,
    ]);
    v.into_iter().map(f64::to_bits).collect()
}

pub fn all_finite(l: &StepLosses) -> bool {
    loss_bits(l).into_iter().all(|b| f64::from_bits(b).is_finite())
}

/// Fine-scale MSE trajectory of the two-pair overfit run.
pub struct OverfitRun {
    pub mse_fine: Vec<f64>,
    pub bits: Vec<Vec<u64>>,
    pub finite: bool,
}

pub fn overfit(steps: usize, seed: u64) -> OverfitRun {
    let pairs = vec![
        synthetic_pair(64, 0.0, Label::Abnormal, "a"),
        synthetic_pair(64, 1.3, Label::Normal, "b"),
    ];
    let mut trainer = desk_trainer(seed);
    let mut run = OverfitRun {
        mse_fine: Vec::with_capacity(steps),
        bits: Vec::with_capacity(steps),
        finite: true,
    };
    for _ in 0..steps {
        let l = trainer.train_batch(&pairs).unwrap();
        run.finite &= all_finite(&l);
        run.mse_fine.push(l.g.mse_fine);
        run.bits.push(loss_bits(&l));
    }
    run
}
