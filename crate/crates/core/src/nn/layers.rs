//! Per-layer forward and backward kernels. All tensors are batched: the
//! leading axis indexes samples.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// One layer of a feed-forward network.
///
/// Convolutions use valid padding and stride 1; pooling windows do not
/// overlap (stride equals the kernel) and trailing rows/columns that do not
/// fill a window are dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    MaxPool2d {
        kh: usize,
        kw: usize,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Linear { in_dim, out_dim } => match input {
                [d] if *d == in_dim => Ok(vec![out_dim]),
                _ => Err(format!("linear expects [{in_dim}], got {input:?}")),
            },
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() == 1 {
                    Ok(input.to_vec())
                } else {
                    Err(format!("softmax expects a score vector, got {input:?}"))
                }
            }
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
            } => match *input {
                [c, h, w] if c == in_ch && h >= kernel_h && w >= kernel_w => {
                    Ok(vec![out_ch, h - kernel_h + 1, w - kernel_w + 1])
                }
                _ => Err(format!(
                    "conv2d expects [{in_ch}, >={kernel_h}, >={kernel_w}], got {input:?}"
                )),
            },
            LayerSpec::MaxPool2d { kh, kw } => match *input {
                [c, h, w] if kh > 0 && kw > 0 && h >= kh && w >= kw => {
                    Ok(vec![c, h / kh, w / kw])
                }
                _ => Err(format!("maxpool {kh}x{kw} cannot pool {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Shapes of the weight and bias tensors, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Linear { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
            } => vec![vec![out_ch, in_ch, kernel_h, kernel_w], vec![out_ch]],
            _ => Vec::new(),
        }
    }

    /// Fan-in of one output unit (0 for parameter-free layers).
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_dim, .. } => in_dim,
            LayerSpec::Conv2d {
                in_ch,
                kernel_h,
                kernel_w,
                ..
            } => in_ch * kernel_h * kernel_w,
            _ => 0,
        }
    }
}

pub(crate) fn forward(layer: &LayerSpec, params: &[Tensor], x: &Tensor, out_shape: &[usize]) -> Tensor {
    let n = x.rows();
    let mut shape = vec![n];
    shape.extend_from_slice(out_shape);
    let mut y = Tensor::zeros(&shape);
    match *layer {
        LayerSpec::Linear { in_dim, out_dim } => {
            let (w, b) = (params[0].data(), params[1].data());
            let out = y.data_mut();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(b);
            }
            gemm_nt(x.data(), w, out, n, in_dim, out_dim);
        }
        LayerSpec::Relu => {
            for (o, &v) in y.data_mut().iter_mut().zip(x.data()) {
                *o = if v > 0.0 { v } else { 0.0 };
            }
        }
        LayerSpec::Softmax => {
            let c = out_shape[0];
            for (orow, xrow) in y.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                softmax_into(xrow, orow);
            }
        }
        LayerSpec::Flatten => y.data_mut().copy_from_slice(x.data()),
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel_h,
            kernel_w,
        } => {
            let geom = ConvGeom::new(x.shape(), in_ch, kernel_h, kernel_w);
            let (w, b) = (params[0].data(), params[1].data());
            let mut cols = vec![0.0; geom.k * geom.p];
            let out_len = out_ch * geom.p;
            for s in 0..n {
                geom.im2col(x.row(s), &mut cols);
                let out = &mut y.data_mut()[s * out_len..(s + 1) * out_len];
                for (o, chunk) in out.chunks_mut(geom.p).enumerate() {
                    chunk.fill(b[o]);
                }
                gemm_nn(w, &cols, out, out_ch, geom.k, geom.p);
            }
        }
        LayerSpec::MaxPool2d { kh, kw } => {
            let [_, c, h, w] = x.shape()[..] else { unreachable!() };
            let (oh, ow) = (h / kh, w / kw);
            let xd = x.data();
            let yd = y.data_mut();
            for plane in 0..n * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                let dst = &mut yd[plane * oh * ow..(plane + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[pool_argmax(src, w, oy * kh, ox * kw, kh, kw)];
                    }
                }
            }
        }
    }
    y
}

/// Returns input gradient and, when requested, parameter gradients.
pub(crate) fn backward(
    layer: &LayerSpec,
    params: &[Tensor],
    x: &Tensor,
    y: &Tensor,
    dy: &Tensor,
    want_params: bool,
) -> (Tensor, Vec<Tensor>) {
    let n = x.rows();
    let mut dx = Tensor::zeros(x.shape());
    let mut grads = Vec::new();
    match *layer {
        LayerSpec::Linear { in_dim, out_dim } => {
            gemm_nn(dy.data(), params[0].data(), dx.data_mut(), n, out_dim, in_dim);
            if want_params {
                let mut gw = Tensor::zeros(params[0].shape());
                gemm_tn(dy.data(), x.data(), gw.data_mut(), out_dim, n, in_dim);
                let mut gb = Tensor::zeros(params[1].shape());
                for row in dy.data().chunks(out_dim) {
                    for (g, v) in gb.data_mut().iter_mut().zip(row) {
                        *g += v;
                    }
                }
                grads = vec![gw, gb];
            }
        }
        LayerSpec::Relu => {
            for ((d, &g), &v) in dx.data_mut().iter_mut().zip(dy.data()).zip(x.data()) {
                *d = if v > 0.0 { g } else { 0.0 };
            }
        }
        LayerSpec::Softmax => {
            let c = *y.shape().last().unwrap();
            for ((drow, yrow), grow) in dx
                .data_mut()
                .chunks_mut(c)
                .zip(y.data().chunks(c))
                .zip(dy.data().chunks(c))
            {
                let inner: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *d = yv * (gv - inner);
                }
            }
        }
        LayerSpec::Flatten => dx.data_mut().copy_from_slice(dy.data()),
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel_h,
            kernel_w,
        } => {
            let geom = ConvGeom::new(x.shape(), in_ch, kernel_h, kernel_w);
            let w = params[0].data();
            let mut cols = vec![0.0; geom.k * geom.p];
            let mut dcols = vec![0.0; geom.k * geom.p];
            let mut gw = want_params.then(|| Tensor::zeros(params[0].shape()));
            let mut gb = want_params.then(|| Tensor::zeros(params[1].shape()));
            let out_len = out_ch * geom.p;
            for s in 0..n {
                let dys = &dy.data()[s * out_len..(s + 1) * out_len];
                if let (Some(gw), Some(gb)) = (gw.as_mut(), gb.as_mut()) {
                    geom.im2col(x.row(s), &mut cols);
                    gemm_nt(dys, &cols, gw.data_mut(), out_ch, geom.p, geom.k);
                    for (g, chunk) in gb.data_mut().iter_mut().zip(dys.chunks(geom.p)) {
                        *g += chunk.iter().sum::<f64>();
                    }
                }
                dcols.fill(0.0);
                gemm_tn(w, dys, &mut dcols, geom.k, out_ch, geom.p);
                geom.col2im_add(&dcols, dx.row_mut(s));
            }
            if let (Some(gw), Some(gb)) = (gw, gb) {
                grads = vec![gw, gb];
            }
        }
        LayerSpec::MaxPool2d { kh, kw } => {
            let [_, c, h, w] = x.shape()[..] else { unreachable!() };
            let (oh, ow) = (h / kh, w / kw);
            let xd = x.data();
            let gd = dy.data();
            let dd = dx.data_mut();
            for plane in 0..n * c {
                let src = &xd[plane * h * w..(plane + 1) * h * w];
                let g = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[pool_argmax(src, w, oy * kh, ox * kw, kh, kw)] += g[oy * ow + ox];
                    }
                }
            }
        }
    }
    (dx, grads)
}

/// First maximal element of a pooling window (row-major scan).
fn pool_argmax(src: &[f64], w: usize, y0: usize, x0: usize, kh: usize, kw: usize) -> usize {
    let mut best = y0 * w + x0;
    for i in 0..kh {
        for j in 0..kw {
            let idx = (y0 + i) * w + x0 + j;
            if src[idx] > src[best] {
                best = idx;
            }
        }
    }
    best
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ow: usize,
    /// rows of the column matrix: c * kh * kw
    k: usize,
    /// output positions: oh * ow
    p: usize,
}

impl ConvGeom {
    fn new(shape: &[usize], c: usize, kh: usize, kw: usize) -> Self {
        let (h, w) = (shape[2], shape[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        Self {
            c,
            h,
            w,
            kh,
            kw,
            ow,
            k: c * kh * kw,
            p: oh * ow,
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let oh = self.p / self.ow;
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * self.p;
                    for oy in 0..oh {
                        let src = ch * self.h * self.w + (oy + i) * self.w + j;
                        cols[row + oy * self.ow..row + (oy + 1) * self.ow]
                            .copy_from_slice(&x[src..src + self.ow]);
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], dx: &mut [f64]) {
        let oh = self.p / self.ow;
        for ch in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ch * self.kh + i) * self.kw + j) * self.p;
                    for oy in 0..oh {
                        let dst = ch * self.h * self.w + (oy + i) * self.w + j;
                        for (d, s) in dx[dst..dst + self.ow]
                            .iter_mut()
                            .zip(&cols[row + oy * self.ow..row + (oy + 1) * self.ow])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
