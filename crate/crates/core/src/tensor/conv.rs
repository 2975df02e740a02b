//! NHWC convolutions. Dense convolutions run as im2col + GEMM over chunks of
//! output pixels; the transposed convolution is the exact adjoint of the
//! forward convolution and reuses the same three kernels.
//!
//! Weight layouts:
//! - `conv2d`: `[k, k, in, out]`
//! - `depthwise_conv2d`: `[k, k, channels, 1]`
//! - `transposed_conv2d`: `[k, k, out, in]`

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Upper bound on im2col buffer size per chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, extra padding on the bottom/right.
    Same,
    Valid,
    Explicit {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_size(input: usize, k: usize, stride: usize, dilation: usize, padding: Padding, vertical: bool) -> Option<(usize, usize)> {
    let span = (k - 1) * dilation + 1;
    let (before, after) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + span).saturating_sub(input);
            (total / 2, total - total / 2)
        }
        Padding::Explicit { top, bottom, left, right } => {
            if vertical {
                (top, bottom)
            } else {
                (left, right)
            }
        }
    };
    let padded = input + before + after;
    if padded < span {
        return None;
    }
    Some(((padded - span) / stride + 1, before))
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    ih: usize,
    iw: usize,
    ic: usize,
    oh: usize,
    ow: usize,
    oc: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geom {
    fn new(input: &[usize], k: usize, oc: usize, stride: usize, dilation: usize, padding: Padding, op: &'static str) -> Result<Geom> {
        let (n, ih, iw, ic) = (input[0], input[1], input[2], input[3]);
        let oh = conv_output_size(ih, k, stride, dilation, padding, true);
        let ow = conv_output_size(iw, k, stride, dilation, padding, false);
        let (Some((oh, pad_top)), Some((ow, pad_left))) = (oh, ow) else {
            return Err(Error::invalid_shape(op, format!("kernel {k} (dilation {dilation}) larger than padded input {input:?}")));
        };
        Ok(Geom {
            n,
            ih,
            iw,
            ic,
            oh,
            ow,
            oc,
            k,
            stride,
            dilation,
            pad_top,
            pad_left,
        })
    }

    fn kkc(&self) -> usize {
        self.k * self.k * self.ic
    }

    fn out_pixels(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn chunk_rows(&self) -> usize {
        (CHUNK_ELEMS / self.kkc()).max(1)
    }

    /// 1x1, stride 1, unpadded: the input rows already are the im2col matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn input_pos(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky * self.dilation).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx * self.dilation).checked_sub(self.pad_left)?;
        (iy < self.ih && ix < self.iw).then_some((iy, ix))
    }

    fn decompose(&self, p: usize) -> (usize, usize, usize) {
        (p / (self.oh * self.ow), (p / self.ow) % self.oh, p % self.ow)
    }

    fn im2col(&self, x: &[f64], p0: usize, p1: usize, cols: &mut [f64]) {
        let (k, ic, kkc) = (self.k, self.ic, self.kkc());
        for p in p0..p1 {
            let (b, oy, ox) = self.decompose(p);
            let row = &mut cols[(p - p0) * kkc..(p - p0 + 1) * kkc];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut row[(ky * k + kx) * ic..(ky * k + kx + 1) * ic];
                    match self.input_pos(oy, ky, ox, kx) {
                        Some((iy, ix)) => {
                            let src = ((b * self.ih + iy) * self.iw + ix) * ic;
                            dst.copy_from_slice(&x[src..src + ic]);
                        }
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], p0: usize, p1: usize, gx: &mut [f64]) {
        let (k, ic, kkc) = (self.k, self.ic, self.kkc());
        for p in p0..p1 {
            let (b, oy, ox) = self.decompose(p);
            let row = &cols[(p - p0) * kkc..(p - p0 + 1) * kkc];
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = self.input_pos(oy, ky, ox, kx) {
                        let dst = ((b * self.ih + iy) * self.iw + ix) * ic;
                        let src = &row[(ky * k + kx) * ic..(ky * k + kx + 1) * ic];
                        gx[dst..dst + ic].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (kkc, oc) = (self.kkc(), self.oc);
        let mut out = vec![0.0; self.out_pixels() * oc];
        let wm = MatRef::row_major(w, kkc, oc);
        if self.is_pointwise() {
            gemm(MatRef::row_major(x, self.out_pixels(), kkc), wm, &mut out, 0.0);
            return out;
        }
        let rows = self.chunk_rows();
        out.par_chunks_mut(rows * oc).enumerate().for_each(|(ci, dst)| {
            let p0 = ci * rows;
            let p1 = p0 + dst.len() / oc;
            let mut cols = vec![0.0; (p1 - p0) * kkc];
            self.im2col(x, p0, p1, &mut cols);
            gemm(MatRef::row_major(&cols, p1 - p0, kkc), wm, dst, 0.0);
        });
        out
    }

    fn backward_input(&self, g: &[f64], w: &[f64]) -> Vec<f64> {
        let (kkc, oc) = (self.kkc(), self.oc);
        let mut gx = vec![0.0; self.n * self.ih * self.iw * self.ic];
        let wt = MatRef::row_major(w, kkc, oc).t();
        if self.is_pointwise() {
            gemm(MatRef::row_major(g, self.out_pixels(), oc), wt, &mut gx, 0.0);
            return gx;
        }
        let rows = self.chunk_rows();
        let total = self.out_pixels();
        let mut cols = vec![0.0; rows.min(total) * kkc];
        let mut p0 = 0;
        while p0 < total {
            let p1 = (p0 + rows).min(total);
            let gm = MatRef::row_major(&g[p0 * oc..p1 * oc], p1 - p0, oc);
            gemm(gm, wt, &mut cols, 0.0);
            self.col2im_add(&cols, p0, p1, &mut gx);
            p0 = p1;
        }
        gx
    }

    fn backward_weight(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let (kkc, oc) = (self.kkc(), self.oc);
        let mut gw = vec![0.0; kkc * oc];
        if self.is_pointwise() {
            let xm = MatRef::row_major(x, self.out_pixels(), kkc);
            gemm(xm.t(), MatRef::row_major(g, self.out_pixels(), oc), &mut gw, 0.0);
            return gw;
        }
        let rows = self.chunk_rows();
        let total = self.out_pixels();
        let mut cols = vec![0.0; rows.min(total) * kkc];
        let mut p0 = 0;
        while p0 < total {
            let p1 = (p0 + rows).min(total);
            self.im2col(x, p0, p1, &mut cols);
            let cm = MatRef::row_major(&cols, p1 - p0, kkc);
            gemm(cm.t(), MatRef::row_major(&g[p0 * oc..p1 * oc], p1 - p0, oc), &mut gw, 1.0);
            p0 = p1;
        }
        gw
    }
}

fn check_rank4(x: &Tensor, op: &'static str) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::invalid_shape(op, format!("expected NHWC rank-4 input, got {:?}", x.shape())));
    }
    Ok(())
}

fn check_stride_dilation(stride: usize, dilation: usize, op: &'static str) -> Result<()> {
    if stride == 0 || dilation == 0 {
        return Err(Error::InvalidArgument(format!("{op}: stride and dilation must be >= 1")));
    }
    Ok(())
}

impl Tensor {
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, dilation: usize, padding: Padding) -> Result<Tensor> {
        check_rank4(self, "conv2d")?;
        check_stride_dilation(stride, dilation, "conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != ws[1] || ws[2] != self.shape()[3] {
            return Err(Error::shape("conv2d", self.shape(), ws));
        }
        let g = Geom::new(self.shape(), ws[0], ws[3], stride, dilation, padding, "conv2d")?;
        let out = g.forward(self.data(), weight.data());
        let (x, w) = (self.clone(), weight.clone());
        let y = Tensor::from_op("conv2d", out, vec![g.n, g.oh, g.ow, g.oc], vec![self.clone(), weight.clone()], move |gr, _| {
            let gx = x.requires_grad().then(|| g.backward_input(gr, w.data()));
            let gw = w.requires_grad().then(|| g.backward_weight(x.data(), gr));
            vec![gx, gw]
        });
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    /// Adjoint of a "same"-padded `conv2d`: each spatial extent is multiplied
    /// by `stride`.
    pub fn transposed_conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        check_rank4(self, "transposed_conv2d")?;
        let (h, w) = (self.shape()[1], self.shape()[2]);
        self.transposed_conv2d_to(weight, bias, stride, h * stride, w * stride)
    }

    /// Transposed convolution with an explicit output extent. Fails when no
    /// "same"-padded forward convolution maps `out_h x out_w` back onto the
    /// input extent.
    pub fn transposed_conv2d_to(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
        check_rank4(self, "transposed_conv2d")?;
        check_stride_dilation(stride, 1, "transposed_conv2d")?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[0] != ws[1] || ws[3] != self.shape()[3] {
            return Err(Error::shape("transposed_conv2d", self.shape(), ws));
        }
        let (n, h, w, cin) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let cout = ws[2];
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid_shape("transposed_conv2d", "zero output extent"));
        }
        // geometry of the forward convolution this op is the adjoint of
        let g = Geom::new(&[n, out_h, out_w, cout], ws[0], cin, stride, 1, Padding::Same, "transposed_conv2d")?;
        if g.oh != h || g.ow != w {
            return Err(Error::invalid_shape(
                "transposed_conv2d",
                format!("output {out_h}x{out_w} is not reachable from input {h}x{w} with stride {stride}"),
            ));
        }
        let out = g.backward_input(self.data(), weight.data());
        let (x, wt) = (self.clone(), weight.clone());
        let y = Tensor::from_op(
            "transposed_conv2d",
            out,
            vec![n, out_h, out_w, cout],
            vec![self.clone(), weight.clone()],
            move |gr, _| {
                let gx = x.requires_grad().then(|| g.forward(gr, wt.data()));
                let gw = wt.requires_grad().then(|| g.backward_weight(gr, x.data()));
                vec![gx, gw]
            },
        );
        match bias {
            Some(b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    pub fn depthwise_conv2d(&self, weight: &Tensor, stride: usize, dilation: usize, padding: Padding) -> Result<Tensor> {
        check_rank4(self, "depthwise_conv2d")?;
        check_stride_dilation(stride, dilation, "depthwise_conv2d")?;
        let ws = weight.shape();
        let c = self.shape()[3];
        if ws.len() != 4 || ws[0] != ws[1] || ws[2] != c || ws[3] != 1 {
            return Err(Error::shape("depthwise_conv2d", self.shape(), ws));
        }
        let g = Geom::new(self.shape(), ws[0], c, stride, dilation, padding, "depthwise_conv2d")?;
        let k = g.k;
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; g.out_pixels() * c];
        for p in 0..g.out_pixels() {
            let (b, oy, ox) = g.decompose(p);
            let dst = &mut out[p * c..(p + 1) * c];
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) {
                        let src = &x[((b * g.ih + iy) * g.iw + ix) * c..][..c];
                        let wk = &wd[(ky * k + kx) * c..][..c];
                        for ((d, s), w) in dst.iter_mut().zip(src).zip(wk) {
                            *d += s * w;
                        }
                    }
                }
            }
        }
        let (xt, wt) = (self.clone(), weight.clone());
        Ok(Tensor::from_op(
            "depthwise_conv2d",
            out,
            vec![g.n, g.oh, g.ow, c],
            vec![self.clone(), weight.clone()],
            move |gr, _| {
                let x = xt.data();
                let wd = wt.data();
                let mut gx = xt.requires_grad().then(|| vec![0.0; x.len()]);
                let mut gw = wt.requires_grad().then(|| vec![0.0; wd.len()]);
                for p in 0..g.out_pixels() {
                    let (b, oy, ox) = g.decompose(p);
                    let go = &gr[p * c..(p + 1) * c];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((iy, ix)) = g.input_pos(oy, ky, ox, kx) else { continue };
                            let off = ((b * g.ih + iy) * g.iw + ix) * c;
                            let woff = (ky * k + kx) * c;
                            if let Some(gx) = gx.as_mut() {
                                for ((d, o), w) in gx[off..off + c].iter_mut().zip(go).zip(&wd[woff..woff + c]) {
                                    *d += o * w;
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                for ((d, o), s) in gw[woff..woff + c].iter_mut().zip(go).zip(&x[off..off + c]) {
                                    *d += o * s;
                                }
                            }
                        }
                    }
                }
                vec![gx, gw]
            },
        ))
    }

    /// Depthwise convolution followed by a 1x1 pointwise convolution.
    pub fn separable_conv2d(&self, depthwise: &Tensor, pointwise: &Tensor, stride: usize, dilation: usize, padding: Padding) -> Result<Tensor> {
        let ps = pointwise.shape();
        if ps.len() != 4 || ps[0] != 1 || ps[1] != 1 {
            return Err(Error::shape("separable_conv2d", depthwise.shape(), ps));
        }
        self.depthwise_conv2d(depthwise, stride, dilation, padding)?
            .conv2d(pointwise, None, 1, 1, Padding::Valid)
    }

    /// Mirror padding of the two spatial axes; the edge pixel is not repeated.
    pub fn reflection_pad(&self, pad: usize) -> Result<Tensor> {
        check_rank4(self, "reflection_pad")?;
        let (n, h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if pad >= h.min(w) {
            return Err(Error::invalid_shape("reflection_pad", format!("pad {pad} needs spatial extent > {pad}, got {h}x{w}")));
        }
        if pad == 0 {
            return self.reshape(self.shape());
        }
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let j = if i < 0 { -i } else if i >= len { 2 * (len - 1) - i } else { i };
            j as usize
        };
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let mut idx = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..ow {
                    let sx = reflect(x as isize - pad as isize, w);
                    let base = ((b * h + sy) * w + sx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
        Ok(self.gather("reflection_pad", Arc::new(idx), vec![n, oh, ow, c]))
    }

    /// Non-overlapping 2x2 max pooling (floor on odd extents).
    pub fn max_pool2x2(&self) -> Result<Tensor> {
        check_rank4(self, "max_pool2x2")?;
        let (n, h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::invalid_shape("max_pool2x2", format!("input too small: {:?}", self.shape())));
        }
        let x = self.data();
        let mut idx = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let at = |dy: usize, dx: usize| ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        let best = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)]
                            .into_iter()
                            .reduce(|a, b| if x[b] > x[a] { b } else { a })
                            .unwrap();
                        idx.push(best);
                    }
                }
            }
        }
        Ok(self.gather("max_pool2x2", Arc::new(idx), vec![n, oh, ow, c]))
    }

    /// Mean over the spatial axes: `[n, h, w, c] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        check_rank4(self, "global_avg_pool")?;
        let (n, h, w, c) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        self.reshape(&[n, h * w, c])?.mean_axis(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_halves_with_stride_two() {
        assert_eq!(conv_output_size(512, 3, 2, 1, Padding::Same, true), Some((256, 0)));
        assert_eq!(conv_output_size(7, 3, 1, 2, Padding::Same, true), Some((7, 2)));
        assert_eq!(conv_output_size(5, 3, 1, 2, Padding::Valid, true), Some((1, 0)));
        assert_eq!(conv_output_size(3, 3, 1, 2, Padding::Valid, true), None);
    }

    #[test]
    fn shape_arithmetic_full_scale() {
        let x = Tensor::zeros(&[1, 512, 512, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 64]);
        let y = x.conv2d(&w, None, 2, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 256, 256, 64]);
    }

    #[test]
    fn unit_kernel_on_unit_image() {
        let x = Tensor::new(vec![1.5], &[1, 1, 1, 1]).unwrap();
        let w = Tensor::new(vec![-2.0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(x.conv2d(&w, None, 1, 1, Padding::Same).unwrap().item(), -3.0);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 4, 4, 3]);
        let w = Tensor::zeros(&[3, 3, 2, 8]);
        let msg = x.conv2d(&w, None, 1, 1, Padding::Same).unwrap_err().to_string();
        assert!(msg.contains("[1, 4, 4, 3]") && msg.contains("[3, 3, 2, 8]"), "{msg}");
        let dw = Tensor::zeros(&[3, 3, 2, 1]);
        assert!(x.depthwise_conv2d(&dw, 1, 1, Padding::Same).is_err());
    }

    #[test]
    fn transposed_conv_doubles_and_rejects_unreachable_sizes() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 5, 2]);
        assert_eq!(x.transposed_conv2d(&w, None, 2).unwrap().shape(), &[1, 8, 8, 5]);
        assert!(x.transposed_conv2d_to(&w, None, 2, 10, 8).is_err());
        assert_eq!(x.transposed_conv2d_to(&w, None, 2, 7, 7).unwrap().shape(), &[1, 7, 7, 5]);
    }

    #[test]
    fn reflection_pad_row() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 3, 3, 1]).unwrap();
        let y = x.reflection_pad(1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5, 1]);
        // middle row of the padded image is the middle source row mirrored
        assert_eq!(&y.data()[10..15], &[5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(x.reflection_pad(0).unwrap().data(), x.data());
        assert!(x.reflection_pad(3).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::parameter(vec![1.0, 4.0, 2.0, 3.0], &[1, 2, 2, 1]).unwrap();
        let y = x.max_pool2x2().unwrap();
        assert_eq!(y.item(), 4.0);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }
}
