//! Differentiable layer vocabulary: convolution, dense, ReLU, max pooling and
//! global average pooling over single-sample `[C, H, W]` / `[N]` tensors.
//!
//! Each layer supports forward, backward (analytic gradients) and exact FLOP
//! and parameter accounting. FLOP convention: 1 multiply-accumulate = 2 FLOPs,
//! bias adds counted, pooling and ReLU cost 1 FLOP per output element.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Structural description of a layer. Conv weights are `[c_out, c_in, kh, kw]`,
/// dense weights `[n_out, n_in]`, biases `[c_out]` / `[n_out]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
    },
    Dense {
        n_in: usize,
        n_out: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
}

/// A layer plus its parameter tensors (empty for parameter-free kinds).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerSpec {
    pub fn conv2d(
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let kind = LayerKind::Conv2d {
            kh,
            kw,
            stride,
            padding,
            c_in,
            c_out,
            bias,
        };
        let weight = Some(Tensor::zeros(&[c_out, c_in, kh, kw]));
        let bias = bias.then(|| Tensor::zeros(&[c_out]));
        Self { kind, weight, bias }
    }

    pub fn dense(n_in: usize, n_out: usize, bias: bool) -> Self {
        let kind = LayerKind::Dense { n_in, n_out, bias };
        let weight = Some(Tensor::zeros(&[n_out, n_in]));
        let bias = bias.then(|| Tensor::zeros(&[n_out]));
        Self { kind, weight, bias }
    }

    pub fn relu() -> Self {
        Self {
            kind: LayerKind::Relu,
            weight: None,
            bias: None,
        }
    }

    pub fn maxpool(k: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool { k, stride },
            weight: None,
            bias: None,
        }
    }

    pub fn globalavgpool() -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            weight: None,
            bias: None,
        }
    }

    /// He-style init: weights ~ N(0, sqrt(2 / fan_in)), biases zero.
    pub fn init_params(&mut self, rng: &mut impl Rng) {
        match self.kind {
            LayerKind::Conv2d {
                kh,
                kw,
                c_in,
                c_out,
                ..
            } => {
                let std = (2.0 / (c_in * kh * kw) as f32).sqrt();
                self.weight = Some(Tensor::randn(&[c_out, c_in, kh, kw], std, rng));
                if let Some(b) = &mut self.bias {
                    *b = Tensor::zeros(&[c_out]);
                }
            }
            LayerKind::Dense { n_in, n_out, .. } => {
                let std = (2.0 / n_in as f32).sqrt();
                self.weight = Some(Tensor::randn(&[n_out, n_in], std, rng));
                if let Some(b) = &mut self.bias {
                    *b = Tensor::zeros(&[n_out]);
                }
            }
            _ => {}
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight.is_some() || self.bias.is_some()
    }
}

/// Activation record produced by a forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv {
        input: Tensor,
    },
    Dense {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Gap {
        input_shape: Vec<usize>,
    },
}

/// Parameter gradients for one layer; `None` where the layer has no such
/// parameter. The same structure doubles as SGD momentum storage.
#[derive(Debug, Clone, Default)]
pub struct GradientSet {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(layer: &LayerSpec) -> Self {
        Self {
            weight: layer.weight.as_ref().map(|w| Tensor::zeros(w.shape())),
            bias: layer.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        if let (Some(a), Some(b)) = (self.weight.as_mut(), other.weight.as_ref()) {
            a.add_assign(b);
        }
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        if let Some(w) = self.weight.as_mut() {
            w.scale(factor);
        }
        if let Some(b) = self.bias.as_mut() {
            b.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.as_ref().map_or(true, Tensor::is_finite)
            && self.bias.as_ref().map_or(true, Tensor::is_finite)
    }
}

/// Output shape of `kind` applied to `input_shape`, validating compatibility.
pub fn output_shape(kind: &LayerKind, input_shape: &[usize]) -> Result<Vec<usize>> {
    match *kind {
        LayerKind::Conv2d {
            kh,
            kw,
            stride,
            padding,
            c_in,
            c_out,
            ..
        } => {
            let [c, h, w] = expect_chw(input_shape)?;
            if c != c_in {
                return Err(Error::config(format!(
                    "conv expects {c_in} input channels, feature map has {c}"
                )));
            }
            if stride == 0 {
                return Err(Error::config("conv stride must be >= 1".to_string()));
            }
            let ph = h + 2 * padding;
            let pw = w + 2 * padding;
            if ph < kh || pw < kw {
                return Err(Error::config(format!(
                    "conv kernel {kh}x{kw} larger than padded input {ph}x{pw}"
                )));
            }
            Ok(vec![c_out, (ph - kh) / stride + 1, (pw - kw) / stride + 1])
        }
        LayerKind::Dense { n_in, n_out, .. } => {
            let n: usize = input_shape.iter().product();
            if input_shape.len() != 1 || n != n_in {
                return Err(Error::config(format!(
                    "dense expects a length-{n_in} vector, got shape {input_shape:?}"
                )));
            }
            Ok(vec![n_out])
        }
        LayerKind::Relu => Ok(input_shape.to_vec()),
        LayerKind::MaxPool { k, stride } => {
            let [c, h, w] = expect_chw(input_shape)?;
            if stride == 0 {
                return Err(Error::config("pool stride must be >= 1".to_string()));
            }
            if h < k || w < k {
                return Err(Error::config(format!(
                    "pool window {k}x{k} larger than input {h}x{w}"
                )));
            }
            Ok(vec![c, (h - k) / stride + 1, (w - k) / stride + 1])
        }
        LayerKind::GlobalAvgPool => {
            let [c, _, _] = expect_chw(input_shape)?;
            Ok(vec![c])
        }
    }
}

fn expect_chw(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        _ => Err(Error::config(format!(
            "expected a [C, H, W] feature map, got shape {shape:?}"
        ))),
    }
}

/// Runs `layer` on `input`, returning the output and an activation record
/// sufficient for [`backward_layer`].
pub fn forward_layer(layer: &LayerSpec, input: &Tensor) -> Result<(Tensor, Cache)> {
    let out_shape = output_shape(&layer.kind, input.shape())?;
    match layer.kind {
        LayerKind::Conv2d {
            kh,
            kw,
            stride,
            padding,
            c_in,
            c_out,
            ..
        } => {
            let [_, h, w] = expect_chw(input.shape())?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let ck = c_in * kh * kw;
            let n_out = oh * ow;
            let mut col = vec![0.0f32; ck * n_out];
            im2col(
                input.data(),
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut col,
            );
            let weight = layer.weight.as_ref().expect("conv weight");
            let mut out = vec![0.0f32; c_out * n_out];
            // out[c_out x n_out] = W[c_out x ck] * col[ck x n_out]
            gemm(
                c_out,
                ck,
                n_out,
                weight.data(),
                ck as isize,
                1,
                &col,
                n_out as isize,
                1,
                &mut out,
            );
            if let Some(bias) = &layer.bias {
                for (co, &b) in bias.data().iter().enumerate() {
                    for v in &mut out[co * n_out..(co + 1) * n_out] {
                        *v += b;
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                Cache::Conv {
                    input: input.clone(),
                },
            ))
        }
        LayerKind::Dense { n_in, n_out, .. } => {
            let weight = layer.weight.as_ref().expect("dense weight");
            let w = weight.data();
            let x = input.data();
            let mut out = vec![0.0f32; n_out];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut acc = 0.0f32;
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                *out_v = acc;
            }
            if let Some(bias) = &layer.bias {
                for (v, b) in out.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                Cache::Dense {
                    input: input.clone(),
                },
            ))
        }
        LayerKind::Relu => {
            let out: Vec<f32> = input.data().iter().map(|&v| v.max(0.0)).collect();
            Ok((
                Tensor::new(out_shape, out)?,
                Cache::Relu {
                    input: input.clone(),
                },
            ))
        }
        LayerKind::MaxPool { k, stride } => {
            let [c, h, w] = expect_chw(input.shape())?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let x = input.data();
            let mut out = vec![0.0f32; c * oh * ow];
            let mut argmax = vec![0usize; c * oh * ow];
            for ci in 0..c {
                let plane = ci * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ky in 0..k {
                            let iy = oy * stride + ky;
                            for kx in 0..k {
                                let ix = ox * stride + kx;
                                let idx = plane + iy * w + ix;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (ci * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
            Ok((
                Tensor::new(out_shape, out)?,
                Cache::MaxPool {
                    input_shape: input.shape().to_vec(),
                    argmax,
                },
            ))
        }
        LayerKind::GlobalAvgPool => {
            let [c, h, w] = expect_chw(input.shape())?;
            let plane = h * w;
            let x = input.data();
            let out: Vec<f32> = (0..c)
                .map(|ci| {
                    let mut acc = 0.0f64;
                    for &v in &x[ci * plane..(ci + 1) * plane] {
                        acc += v as f64;
                    }
                    (acc / plane as f64) as f32
                })
                .collect();
            Ok((
                Tensor::new(out_shape, out)?,
                Cache::Gap {
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
    }
}

/// Backward pass: gradients w.r.t. the layer input and its parameters.
/// `cache` must come from the matching forward call.
pub fn backward_layer(
    layer: &LayerSpec,
    grad_out: &Tensor,
    cache: &Cache,
) -> Result<(Tensor, GradientSet)> {
    match (&layer.kind, cache) {
        (
            &LayerKind::Conv2d {
                kh,
                kw,
                stride,
                padding,
                c_in,
                c_out,
                bias,
            },
            Cache::Conv { input },
        ) => {
            let [_, h, w] = expect_chw(input.shape())?;
            let out_shape = output_shape(&layer.kind, input.shape())?;
            if grad_out.shape() != out_shape.as_slice() {
                return Err(Error::internal(format!(
                    "conv grad_out shape {:?} does not match cached forward output {out_shape:?}",
                    grad_out.shape()
                )));
            }
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let ck = c_in * kh * kw;
            let n_out = oh * ow;
            let mut col = vec![0.0f32; ck * n_out];
            im2col(
                input.data(),
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut col,
            );
            let g = grad_out.data();

            // grad_w[c_out x ck] = g[c_out x n_out] * col^T[n_out x ck]
            let mut grad_w = vec![0.0f32; c_out * ck];
            gemm(
                c_out,
                n_out,
                ck,
                g,
                n_out as isize,
                1,
                &col,
                1,
                n_out as isize,
                &mut grad_w,
            );

            let grad_b = if bias {
                let mut gb = vec![0.0f32; c_out];
                for (co, gb_v) in gb.iter_mut().enumerate() {
                    let mut acc = 0.0f64;
                    for &v in &g[co * n_out..(co + 1) * n_out] {
                        acc += v as f64;
                    }
                    *gb_v = acc as f32;
                }
                Some(Tensor::new(vec![c_out], gb)?)
            } else {
                None
            };

            // grad_col[ck x n_out] = W^T[ck x c_out] * g[c_out x n_out]
            let weight = layer.weight.as_ref().expect("conv weight");
            let mut grad_col = vec![0.0f32; ck * n_out];
            gemm(
                ck,
                c_out,
                n_out,
                weight.data(),
                1,
                ck as isize,
                g,
                n_out as isize,
                1,
                &mut grad_col,
            );
            let mut grad_in = vec![0.0f32; c_in * h * w];
            col2im(
                &grad_col,
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut grad_in,
            );

            Ok((
                Tensor::new(input.shape().to_vec(), grad_in)?,
                GradientSet {
                    weight: Some(Tensor::new(vec![c_out, c_in, kh, kw], grad_w)?),
                    bias: grad_b,
                },
            ))
        }
        (&LayerKind::Dense { n_in, n_out, bias }, Cache::Dense { input }) => {
            if grad_out.numel() != n_out {
                return Err(Error::internal(format!(
                    "dense grad_out length {} does not match n_out {n_out}",
                    grad_out.numel()
                )));
            }
            let g = grad_out.data();
            let x = input.data();
            let w = layer.weight.as_ref().expect("dense weight").data();
            let mut grad_w = vec![0.0f32; n_out * n_in];
            for o in 0..n_out {
                let go = g[o];
                let row = &mut grad_w[o * n_in..(o + 1) * n_in];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw = go * xi;
                }
            }
            let mut grad_in = vec![0.0f32; n_in];
            for o in 0..n_out {
                let go = g[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (gi, wi) in grad_in.iter_mut().zip(row) {
                    *gi += go * wi;
                }
            }
            Ok((
                Tensor::new(vec![n_in], grad_in)?,
                GradientSet {
                    weight: Some(Tensor::new(vec![n_out, n_in], grad_w)?),
                    bias: bias.then(|| Tensor::new(vec![n_out], g.to_vec()).unwrap()),
                },
            ))
        }
        (LayerKind::Relu, Cache::Relu { input }) => {
            if grad_out.numel() != input.numel() {
                return Err(Error::internal(
                    "relu grad_out length does not match cached input".to_string(),
                ));
            }
            let grad_in: Vec<f32> = input
                .data()
                .iter()
                .zip(grad_out.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            Ok((
                Tensor::new(input.shape().to_vec(), grad_in)?,
                GradientSet::default(),
            ))
        }
        (
            LayerKind::MaxPool { .. },
            Cache::MaxPool {
                input_shape,
                argmax,
            },
        ) => {
            if grad_out.numel() != argmax.len() {
                return Err(Error::internal(
                    "pool grad_out length does not match cached argmax".to_string(),
                ));
            }
            let mut grad_in = vec![0.0f32; input_shape.iter().product()];
            for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                grad_in[src] += g;
            }
            Ok((
                Tensor::new(input_shape.clone(), grad_in)?,
                GradientSet::default(),
            ))
        }
        (LayerKind::GlobalAvgPool, Cache::Gap { input_shape }) => {
            let [c, h, w] = expect_chw(input_shape)?;
            if grad_out.numel() != c {
                return Err(Error::internal(
                    "gap grad_out length does not match channel count".to_string(),
                ));
            }
            let plane = h * w;
            let inv = 1.0 / plane as f32;
            let mut grad_in = vec![0.0f32; c * plane];
            for ci in 0..c {
                let g = grad_out.data()[ci] * inv;
                for v in &mut grad_in[ci * plane..(ci + 1) * plane] {
                    *v = g;
                }
            }
            Ok((
                Tensor::new(input_shape.clone(), grad_in)?,
                GradientSet::default(),
            ))
        }
        _ => Err(Error::internal(
            "backward cache does not match layer kind".to_string(),
        )),
    }
}

/// Exact FLOP count of one forward application. Deterministic in
/// `(kind, input_shape)`.
pub fn count_layer_flops(kind: &LayerKind, input_shape: &[usize]) -> Result<u64> {
    let out_shape = output_shape(kind, input_shape)?;
    let out_elems: u64 = out_shape.iter().product::<usize>() as u64;
    Ok(match *kind {
        LayerKind::Conv2d {
            kh, kw, c_in, bias, ..
        } => {
            let macs = out_elems * (kh * kw * c_in) as u64;
            2 * macs + if bias { out_elems } else { 0 }
        }
        LayerKind::Dense { n_in, bias, .. } => {
            2 * out_elems * n_in as u64 + if bias { out_elems } else { 0 }
        }
        LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::GlobalAvgPool => out_elems,
    })
}

/// Number of scalar parameters, biases included.
pub fn count_layer_params(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv2d {
            kh,
            kw,
            c_in,
            c_out,
            bias,
            ..
        } => (c_out * c_in * kh * kw + if bias { c_out } else { 0 }) as u64,
        LayerKind::Dense { n_in, n_out, bias } => {
            (n_out * n_in + if bias { n_out } else { 0 }) as u64
        }
        _ => 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let n_out = oh * ow;
    for ci in 0..c_in {
        let plane = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n_out;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let out_row = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        col[out_row..out_row + ow].fill(0.0);
                        continue;
                    }
                    let in_row = plane + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        col[out_row + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            input[in_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [f32],
) {
    let n_out = oh * ow;
    for ci in 0..c_in {
        let plane = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n_out;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = plane + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            grad_in[in_row + ix as usize] += col[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major sgemm with explicit strides: C[m x n] += A[m x k] * B[k x n].
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_matches_definition() {
        let layer = LayerSpec::relu();
        let (out, _) = forward_layer(&layer, &t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_negative_inputs() {
        let layer = LayerSpec::relu();
        let (_, cache) = forward_layer(&layer, &t(&[2], &[-1.0, 2.0])).unwrap();
        let (grad_in, _) = backward_layer(&layer, &t(&[2], &[1.0, 1.0]), &cache).unwrap();
        assert_eq!(grad_in.data(), &[0.0, 1.0]);
    }

    #[test]
    fn dense_forward_dot_product() {
        let mut layer = LayerSpec::dense(2, 1, true);
        layer.weight = Some(t(&[1, 2], &[1.0, 1.0]));
        layer.bias = Some(t(&[1], &[0.0]));
        let (out, _) = forward_layer(&layer, &t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_map() {
        let mut layer = LayerSpec::conv2d(1, 1, 1, 0, 1, 1, false);
        layer.weight = Some(t(&[1, 1, 1, 1], &[1.0]));
        let input = t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, _) = forward_layer(&layer, &input).unwrap();
        assert_eq!(out.data(), input.data());
        assert_eq!(out.shape(), input.shape());
    }

    #[test]
    fn conv_known_values_with_padding() {
        // 2x2 input, 3x3 kernel of ones, padding 1: each output element is the
        // sum of the in-bounds neighbourhood.
        let mut layer = LayerSpec::conv2d(3, 3, 1, 1, 1, 1, false);
        layer.weight = Some(Tensor::full(&[1, 1, 3, 3], 1.0));
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, _) = forward_layer(&layer, &input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn maxpool_forward_and_shape() {
        let layer = LayerSpec::maxpool(2, 2);
        let input = t(&[1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 1.0, 6.0]);
        let (out, _) = forward_layer(&layer, &input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2]);
        assert_eq!(out.data(), &[5.0, 6.0]);
    }

    #[test]
    fn gap_is_channel_mean() {
        let layer = LayerSpec::globalavgpool();
        let input = t(&[2, 1, 2], &[1.0, 3.0, 10.0, 20.0]);
        let (out, _) = forward_layer(&layer, &input).unwrap();
        assert_eq!(out.data(), &[2.0, 15.0]);
    }

    #[test]
    fn flop_counts_match_convention() {
        // dense 10 -> 5 with bias: 2*10*5 + 5
        assert_eq!(
            count_layer_flops(
                &LayerKind::Dense {
                    n_in: 10,
                    n_out: 5,
                    bias: true
                },
                &[10]
            )
            .unwrap(),
            105
        );
        // conv 3x3, 1 -> 1 channel, 4x4 output (6x6 input, no padding), bias:
        // 2*9*16 + 16
        let conv = LayerKind::Conv2d {
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 0,
            c_in: 1,
            c_out: 1,
            bias: true,
        };
        assert_eq!(count_layer_flops(&conv, &[1, 6, 6]).unwrap(), 304);
        // relu on 100 elements
        assert_eq!(count_layer_flops(&LayerKind::Relu, &[100]).unwrap(), 100);
    }

    #[test]
    fn param_counts_match_convention() {
        assert_eq!(
            count_layer_params(&LayerKind::Dense {
                n_in: 10,
                n_out: 5,
                bias: true
            }),
            55
        );
        let conv = LayerKind::Conv2d {
            kh: 3,
            kw: 3,
            stride: 1,
            padding: 0,
            c_in: 2,
            c_out: 4,
            bias: true,
        };
        assert_eq!(count_layer_params(&conv), 76);
        assert_eq!(count_layer_params(&LayerKind::Relu), 0);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let layer = LayerSpec::dense(4, 2, true);
        assert!(forward_layer(&layer, &t(&[3], &[0.0; 3])).is_err());
        let conv = LayerSpec::conv2d(3, 3, 1, 0, 2, 4, true);
        assert!(forward_layer(&conv, &t(&[1, 5, 5], &[0.0; 25])).is_err());
    }

    #[test]
    fn mismatched_cache_is_internal_error() {
        let relu = LayerSpec::relu();
        let dense = LayerSpec::dense(2, 2, false);
        let (_, cache) = forward_layer(&relu, &t(&[2], &[1.0, 2.0])).unwrap();
        let err = backward_layer(&dense, &t(&[2], &[1.0, 1.0]), &cache).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn forward_stays_finite_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = LayerSpec::conv2d(3, 3, 2, 1, 3, 8, true);
        conv.init_params(&mut rng);
        let input = Tensor::uniform(&[3, 9, 9], -50.0, 50.0, &mut rng);
        let (out, _) = forward_layer(&conv, &input).unwrap();
        assert!(out.is_finite());
    }
}
