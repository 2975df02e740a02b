//! Separable Lanczos-3 resampling of interleaved `H x W x C` buffers.

use crate::error::{Error, Result};

const LOBES: f64 = 3.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn lanczos(x: f64) -> f64 {
    if x.abs() < LOBES {
        sinc(x) * sinc(x / LOBES)
    } else {
        0.0
    }
}

/// For each output index, the first contributing input index and the
/// normalized weights. The kernel is stretched by the scale factor when
/// shrinking, which makes it a low-pass filter.
fn contributions(input: usize, output: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = input as f64 / output as f64;
    let stretch = scale.max(1.0);
    let support = LOBES * stretch;
    (0..output)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut w = vec![0.0; input];
            let mut first = usize::MAX;
            let mut last = 0;
            for j in lo..=hi {
                let v = lanczos((j as f64 - center) / stretch);
                if v == 0.0 {
                    continue;
                }
                let jj = j.clamp(0, input as isize - 1) as usize;
                w[jj] += v;
                first = first.min(jj);
                last = last.max(jj);
            }
            let w = w[first..=last].to_vec();
            let total: f64 = w.iter().sum();
            (first, w.into_iter().map(|v| v / total).collect())
        })
        .collect()
}

/// Resamples to `out_h x out_w` with edge clamping.
pub fn lanczos_resize(data: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if data.len() != h * w * c || out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "lanczos_resize: {h}x{w}x{c} buffer of length {} to {out_h}x{out_w}",
            data.len()
        )));
    }
    let cols = contributions(w, out_w);
    let mut tmp = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (x, (first, ws)) in cols.iter().enumerate() {
            let dst = &mut tmp[(y * out_w + x) * c..][..c];
            for (k, wt) in ws.iter().enumerate() {
                let src = &data[(y * w + first + k) * c..][..c];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
            }
        }
    }
    let rows = contributions(h, out_h);
    let mut out = vec![0.0; out_h * out_w * c];
    for (y, (first, ws)) in rows.iter().enumerate() {
        let dst = &mut out[y * out_w * c..(y + 1) * out_w * c];
        for (k, wt) in ws.iter().enumerate() {
            let src = &tmp[(first + k) * out_w * c..(first + k + 1) * out_w * c];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
        }
    }
    Ok(out)
}

/// Integer-factor Lanczos downscale; both extents must divide by `factor`.
pub fn lanczos_downscale(data: &[f64], h: usize, w: usize, c: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!("lanczos_downscale: {h}x{w} is not divisible by {factor}")));
    }
    lanczos_resize(data, h, w, c, h / factor, w / factor)
}
