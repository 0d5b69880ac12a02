//! Forward/backward kernels shared by the graph ops and the crossbar simulator.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Geometry of a square-kernel 2-D convolution over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIKK weight, got {input:?} and {weight:?}"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, i, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if c != i {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but weight expects {i}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(Self {
            batch: n,
            in_ch: c,
            in_h: h,
            in_w: w,
            out_ch: o,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_ch, self.out_h, self.out_w]
    }

    /// Input coordinate feeding output `(oh, ow)` at kernel tap `(kh, kw)`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    pub fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let y = (oh * self.stride + kh) as isize - self.padding as isize;
        let x = (ow * self.stride + kw) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Patch matrix of shape `(C·K·K) × (N·Ho·Wo)`.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.batch * g.out_positions();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    let k = g.kernel;
    cols.par_chunks_mut(cols_n).enumerate().for_each(|(row, dst)| {
        let c = row / (k * k);
        let kh = (row / k) % k;
        let kw = row % k;
        for n in 0..g.batch {
            let plane = &input[(n * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let base = n * g.out_positions();
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    if let Some((y, x)) = g.source(oh, ow, kh, kw) {
                        dst[base + oh * g.out_w + ow] = plane[y * g.in_w + x];
                    }
                }
            }
        }
    });
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.batch * g.out_positions();
    let k = g.kernel;
    let plane_len = g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.in_ch * plane_len];
    // each (n, c) plane only receives from rows of channel c, so planes are independent
    out.par_chunks_mut(plane_len).enumerate().for_each(|(nc, plane)| {
        let n = nc / g.in_ch;
        let c = nc % g.in_ch;
        let base = n * g.out_positions();
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((c * k + kh) * k + kw) * cols_n..][..cols_n];
                for oh in 0..g.out_h {
                    for ow in 0..g.out_w {
                        if let Some((y, x)) = g.source(oh, ow, kh, kw) {
                            plane[y * g.in_w + x] += row[base + oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns the output and the patch matrix (kept for the backward pass).
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, g: &ConvGeom) -> (Tensor, Vec<f64>) {
    let cols = im2col(input.data(), g);
    let hw = g.out_positions();
    let cols_n = g.batch * hw;
    let plen = g.patch_len();
    let mut out = vec![0.0; g.batch * g.out_ch * hw];
    out.par_chunks_mut(g.out_ch * hw).enumerate().for_each(|(n, dst)| {
        gemm(
            g.out_ch,
            plen,
            hw,
            1.0,
            weight.data(),
            (plen, 1),
            &cols[n * hw..],
            (cols_n, 1),
            0.0,
            dst,
            (hw, 1),
        );
    });
    let out = Tensor::new(&g.out_shape(), out).expect("conv output shape");
    (out, cols)
}

pub fn conv2d_backward_weight(grad_out: &Tensor, cols: &[f64], g: &ConvGeom) -> Tensor {
    let hw = g.out_positions();
    let cols_n = g.batch * hw;
    let plen = g.patch_len();
    let mut dw = vec![0.0; g.out_ch * plen];
    // sequential over the batch: fixed accumulation order
    for n in 0..g.batch {
        gemm(
            g.out_ch,
            hw,
            plen,
            1.0,
            &grad_out.data()[n * g.out_ch * hw..],
            (hw, 1),
            &cols[n * hw..],
            (1, cols_n),
            1.0,
            &mut dw,
            (plen, 1),
        );
    }
    Tensor::new(&[g.out_ch, g.in_ch, g.kernel, g.kernel], dw).expect("weight grad shape")
}

pub fn conv2d_backward_input(grad_out: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let hw = g.out_positions();
    let cols_n = g.batch * hw;
    let plen = g.patch_len();
    let mut dcols = vec![0.0; plen * cols_n];
    // columns of sample n are strided by cols_n; compute per sample into a scratch block
    let blocks: Vec<Vec<f64>> = (0..g.batch)
        .into_par_iter()
        .map(|n| {
            let mut block = vec![0.0; plen * hw];
            gemm(
                plen,
                g.out_ch,
                hw,
                1.0,
                weight.data(),
                (1, plen),
                &grad_out.data()[n * g.out_ch * hw..],
                (hw, 1),
                0.0,
                &mut block,
                (hw, 1),
            );
            block
        })
        .collect();
    for (n, block) in blocks.iter().enumerate() {
        for r in 0..plen {
            dcols[r * cols_n + n * hw..][..hw].copy_from_slice(&block[r * hw..][..hw]);
        }
    }
    let dx = col2im(&dcols, g);
    Tensor::new(&[g.batch, g.in_ch, g.in_h, g.in_w], dx).expect("input grad shape")
}

/// `x (N×F) · w (F×G) + b`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (n, f, gdim) = linear_dims(x, w)?;
    let mut out = vec![0.0; n * gdim];
    if let Some(b) = b {
        if b.numel() != gdim {
            return Err(Error::shape(
                "linear",
                format!("bias has {} elements, expected {gdim}", b.numel()),
            ));
        }
        for row in out.chunks_mut(gdim) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, f, gdim, 1.0, x.data(), (f, 1), w.data(), (gdim, 1), 1.0, &mut out, (gdim, 1));
    Tensor::new(&[n, gdim], out)
}

pub fn linear_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::shape(
            "linear",
            format!("expected 2-D operands, got {:?} and {:?}", x.shape(), w.shape()),
        ));
    }
    if x.shape()[1] != w.shape()[0] {
        return Err(Error::shape(
            "linear",
            format!(
                "inner dimensions differ: input {:?}, weight {:?}",
                x.shape(),
                w.shape()
            ),
        ));
    }
    Ok((x.shape()[0], x.shape()[1], w.shape()[1]))
}

/// Non-overlapping `k×k` max pooling; returns the output and flat argmax indices.
pub fn max_pool2d_forward(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
        return Err(Error::shape(
            "max_pool2d",
            format!("cannot pool {s:?} with window {k}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let mut best = base + py * k * w + px * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (py * k + dy) * w + px * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool2d_forward(input: &Tensor, k: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
        return Err(Error::shape(
            "avg_pool2d",
            format!("cannot pool {s:?} with window {k}"),
        ));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += x[base + (py * k + dy) * w + px * k + dx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn avg_pool2d_backward_into(dx: &mut Tensor, up: &Tensor, k: usize) {
    let s = dx.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let d = dx.data_mut();
    for (plane, ups) in up.data().chunks(oh * ow).enumerate() {
        let base = plane * h * w;
        for py in 0..oh {
            for px in 0..ow {
                let u = ups[py * ow + px] * inv;
                for dy in 0..k {
                    for dxi in 0..k {
                        d[base + (py * k + dy) * w + px * k + dxi] += u;
                    }
                }
            }
        }
    }
}

pub fn avg_pool2d_backward(input_shape: &[usize], up: &Tensor, k: usize) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    avg_pool2d_backward_into(&mut dx, up, k);
    dx
}

/// Channel extent and inner (spatial) extent of an `N×C` or `N×C×H×W` tensor.
pub fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::shape(
            "scale_shift",
            format!("expected N×C or N×C×H×W, got {shape:?}"),
        )),
    }
}

/// Row-wise softmax probabilities and the mean cross-entropy over the batch.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    let mut probs = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (&y, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = z.ln() + m;
        for (p, v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
        loss += log_z - row[y];
    }
    Ok((loss / n as f64, Tensor::new(&[n, k], probs)?))
}
