//! Sequential layer stacks with hand-written backward passes.
//!
//! A network is a flat list of [`Layer`]s that index into a parameter list.
//! [`forward`] optionally records a [`Tape`]; [`backward`] replays it in
//! reverse, accumulating parameter gradients and returning the gradient with
//! respect to the input.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{self, Stream};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::{Error, Real, Result, Tensor};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight: [out, in, k, k]`, `bias: [out]`, input `[C, H, W]`.
    Conv2d {
        weight: usize,
        bias: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// `weight: [out, in]`, `bias: [out]`, input `[in]`.
    Linear {
        weight: usize,
        bias: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    /// `[C, H, W] -> [C]`
    GlobalAvgPool,
    /// `[..] -> [prod]`
    Flatten,
    /// `[C*H*W] -> [C, H, W]`
    Unflatten {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// `x + body(x)`
    Residual(Vec<Layer>),
    /// Single-head self-attention over the spatial positions of a `[C, H, W]`
    /// map, with a residual connection: `x + softmax(QK^T/sqrt(C)) V Wo^T + bo`.
    Attention {
        query: usize,
        key: usize,
        value: usize,
        output: usize,
        output_bias: usize,
        channels: usize,
    },
    /// Per-sample group normalization of a `[C, H, W]` map followed by a
    /// per-channel affine map. Train and eval behave identically.
    GroupNorm {
        gamma: usize,
        beta: usize,
        channels: usize,
        groups: usize,
    },
}

/// Variance floor inside [`Layer::GroupNorm`].
pub const NORM_EPS: f64 = 1e-5;

impl Layer {
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::ShapeMismatch(alloc::format!(
                "{what} cannot take input {input:?}"
            )))
        };
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return mismatch("conv2d");
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < *kernel || w < *kernel {
                    return mismatch("conv2d");
                }
                Ok(vec![
                    *out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            Layer::Linear {
                in_dim, out_dim, ..
            } => {
                if input != [*in_dim] {
                    return mismatch("linear");
                }
                Ok(vec![*out_dim])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::GlobalAvgPool => {
                if input.len() != 3 {
                    return mismatch("global average pool");
                }
                Ok(vec![input[0]])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Unflatten {
                channels,
                height,
                width,
            } => {
                if input.iter().product::<usize>() != channels * height * width {
                    return mismatch("unflatten");
                }
                Ok(vec![*channels, *height, *width])
            }
            Layer::Residual(body) => {
                let mut s = input.to_vec();
                for l in body {
                    s = l.out_shape(&s)?;
                }
                if s != input {
                    return mismatch("residual block");
                }
                Ok(s)
            }
            Layer::Attention { channels, .. } => {
                if input.len() != 3 || input[0] != *channels {
                    return mismatch("attention");
                }
                Ok(input.to_vec())
            }
            Layer::GroupNorm {
                channels, groups, ..
            } => {
                if input.len() != 3
                    || input[0] != *channels
                    || *groups == 0
                    || channels % groups != 0
                {
                    return mismatch("group norm");
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Activations recorded by a forward pass, one entry per layer.
#[derive(Debug, Clone)]
pub struct Tape<T>(Vec<Saved<T>>);

#[derive(Debug, Clone)]
enum Saved<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Shape(Vec<usize>),
    Residual(Tape<T>),
    Attention(Vec<AttnCache<T>>),
    Norm { xhat: Tensor<T>, inv_std: Vec<T> },
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    x: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    o: Vec<T>,
}

fn batch_shape(batch: usize, per: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per.len() + 1);
    s.push(batch);
    s.extend_from_slice(per);
    s
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[oy * wo + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Runs the stack on a batch. When `tape` is given the activations needed by
/// [`backward`] are recorded into it.
pub fn forward<T: Real>(
    layers: &[Layer],
    params: &[Param<T>],
    x: Tensor<T>,
    mut tape: Option<&mut Tape<T>>,
) -> Tensor<T> {
    let mut cur = x;
    for layer in layers {
        let (next, saved) = forward_layer(layer, params, cur, tape.is_some());
        if let (Some(t), Some(s)) = (tape.as_deref_mut(), saved) {
            t.0.push(s);
        }
        cur = next;
    }
    cur
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Tape(Vec::new())
    }
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn forward_layer<T: Real>(
    layer: &Layer,
    params: &[Param<T>],
    x: Tensor<T>,
    record: bool,
) -> (Tensor<T>, Option<Saved<T>>) {
    let b = x.batch();
    match layer {
        Layer::Conv2d {
            weight,
            bias,
            in_channels: c,
            out_channels: oc,
            kernel: k,
            stride,
            padding,
        } => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let ho = (h + 2 * padding - k) / stride + 1;
            let wo = (w + 2 * padding - k) / stride + 1;
            let (r, p) = (c * k * k, ho * wo);
            let wv = &params[*weight].value;
            let bv = &params[*bias].value;
            let mut out = Tensor::zeros(&[b, *oc, ho, wo]);
            let mut cols = vec![T::zero(); r * p];
            for i in 0..b {
                im2col(x.row(i), *c, h, w, *k, *stride, *padding, ho, wo, &mut cols);
                let orow = out.row_mut(i);
                for (o, bias) in bv.iter().enumerate() {
                    orow[o * p..(o + 1) * p].fill(*bias);
                }
                gemm_nn(wv, &cols, orow, *oc, r, p);
            }
            (out, record.then_some(Saved::Input(x)))
        }
        Layer::Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        } => {
            let mut out = Tensor::zeros(&[b, *out_dim]);
            let bv = &params[*bias].value;
            for i in 0..b {
                out.row_mut(i).copy_from_slice(bv);
            }
            gemm_nt(
                x.data(),
                &params[*weight].value,
                out.data_mut(),
                b,
                *in_dim,
                *out_dim,
            );
            (out, record.then_some(Saved::Input(x)))
        }
        Layer::Relu => {
            let mut out = x;
            for v in out.data_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            let saved = record.then(|| Saved::Output(out.clone()));
            (out, saved)
        }
        Layer::GlobalAvgPool => {
            let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
            let inv = T::of(1.0 / hw as f64);
            let mut out = Tensor::zeros(&[b, c]);
            for i in 0..b {
                let xr = x.row(i);
                let or = out.row_mut(i);
                for ch in 0..c {
                    or[ch] = xr[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv;
                }
            }
            (out, record.then(|| Saved::Shape(x.shape().to_vec())))
        }
        Layer::Flatten | Layer::Unflatten { .. } => {
            let in_shape = x.shape().to_vec();
            let per = layer
                .out_shape(&in_shape[1..])
                .expect("shape checked at build time");
            let out = x.reshape(&batch_shape(b, &per)).expect("same size");
            (out, record.then_some(Saved::Shape(in_shape)))
        }
        Layer::Residual(body) => {
            let mut inner = record.then(Tape::new);
            let y = forward(body, params, x.clone(), inner.as_mut());
            let mut out = x;
            for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
                *o += *v;
            }
            (out, inner.map(Saved::Residual))
        }
        Layer::Attention {
            query,
            key,
            value,
            output,
            output_bias,
            channels: c,
        } => {
            let c = *c;
            let n = x.shape()[2] * x.shape()[3];
            let scale = T::of(1.0 / libm::sqrt(c as f64));
            let mut out = Tensor::zeros(x.shape());
            let mut caches = Vec::new();
            for i in 0..b {
                let xr = x.row(i);
                let mut tok = vec![T::zero(); n * c];
                for ch in 0..c {
                    for t in 0..n {
                        tok[t * c + ch] = xr[ch * n + t];
                    }
                }
                let mut q = vec![T::zero(); n * c];
                let mut kk = vec![T::zero(); n * c];
                let mut v = vec![T::zero(); n * c];
                gemm_nt(&tok, &params[*query].value, &mut q, n, c, c);
                gemm_nt(&tok, &params[*key].value, &mut kk, n, c, c);
                gemm_nt(&tok, &params[*value].value, &mut v, n, c, c);
                let mut attn = vec![T::zero(); n * n];
                gemm_nt(&q, &kk, &mut attn, n, c, n);
                for row in attn.chunks_mut(n) {
                    let mut m = T::neg_infinity();
                    for s in row.iter_mut() {
                        *s *= scale;
                        m = m.max(*s);
                    }
                    let mut z = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= z;
                    }
                }
                let mut o = vec![T::zero(); n * c];
                gemm_nn(&attn, &v, &mut o, n, n, c);
                let mut y = tok.clone();
                for t in 0..n {
                    for (ch, bias) in params[*output_bias].value.iter().enumerate() {
                        y[t * c + ch] += *bias;
                    }
                }
                gemm_nt(&o, &params[*output].value, &mut y, n, c, c);
                let orow = out.row_mut(i);
                for ch in 0..c {
                    for t in 0..n {
                        orow[ch * n + t] = y[t * c + ch];
                    }
                }
                if record {
                    caches.push(AttnCache {
                        x: tok,
                        q,
                        k: kk,
                        v,
                        attn,
                        o,
                    });
                }
            }
            (out, record.then_some(Saved::Attention(caches)))
        }
        Layer::GroupNorm {
            gamma,
            beta,
            channels: c,
            groups,
        } => {
            let per = x.row_len();
            let hw = per / c;
            let span = per / groups;
            let inv_n = T::of(1.0 / span as f64);
            let mut xhat = x;
            let mut inv_std = Vec::with_capacity(b * groups);
            for i in 0..b {
                let row = xhat.row_mut(i);
                for grp in row.chunks_mut(span) {
                    let mean = grp.iter().copied().sum::<T>() * inv_n;
                    let var = grp.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_n;
                    let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
                    grp.iter_mut().for_each(|v| *v = (*v - mean) * is);
                    inv_std.push(is);
                }
            }
            let (gv, bv) = (&params[*gamma].value, &params[*beta].value);
            let mut out = xhat.clone();
            for i in 0..b {
                for (ch, plane) in out.row_mut(i).chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v * gv[ch] + bv[ch]);
                }
            }
            (out, record.then_some(Saved::Norm { xhat, inv_std }))
        }
    }
}

/// Replays `tape` backwards. Parameter gradients are accumulated into `grads`
/// when it is given (indexed like the parameter list). Returns the gradient
/// with respect to the stack's input.
pub fn backward<T: Real>(
    layers: &[Layer],
    params: &[Param<T>],
    tape: Tape<T>,
    grad: Tensor<T>,
    mut grads: Option<&mut [Vec<T>]>,
) -> Tensor<T> {
    let mut g = grad;
    for (layer, saved) in layers.iter().zip(tape.0).rev() {
        g = backward_layer(layer, params, saved, g, grads.as_deref_mut());
    }
    g
}

fn backward_layer<T: Real>(
    layer: &Layer,
    params: &[Param<T>],
    saved: Saved<T>,
    g: Tensor<T>,
    mut grads: Option<&mut [Vec<T>]>,
) -> Tensor<T> {
    let b = g.batch();
    match (layer, saved) {
        (
            Layer::Conv2d {
                weight,
                bias,
                in_channels: c,
                out_channels: oc,
                kernel: k,
                stride,
                padding,
            },
            Saved::Input(x),
        ) => {
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (ho, wo) = (g.shape()[2], g.shape()[3]);
            let (r, p) = (c * k * k, ho * wo);
            let wv = &params[*weight].value;
            let mut gx = Tensor::zeros(x.shape());
            let mut cols = vec![T::zero(); r * p];
            let mut dcols = vec![T::zero(); r * p];
            for i in 0..b {
                let gr = g.row(i);
                if let Some(gs) = grads.as_deref_mut() {
                    im2col(x.row(i), *c, h, w, *k, *stride, *padding, ho, wo, &mut cols);
                    gemm_nt(gr, &cols, &mut gs[*weight], *oc, p, r);
                    for o in 0..*oc {
                        gs[*bias][o] += gr[o * p..(o + 1) * p].iter().copied().sum::<T>();
                    }
                }
                dcols.fill(T::zero());
                gemm_tn(wv, gr, &mut dcols, r, *oc, p);
                col2im(
                    &dcols,
                    *c,
                    h,
                    w,
                    *k,
                    *stride,
                    *padding,
                    ho,
                    wo,
                    gx.row_mut(i),
                );
            }
            gx
        }
        (
            Layer::Linear {
                weight,
                bias,
                in_dim,
                out_dim,
            },
            Saved::Input(x),
        ) => {
            if let Some(gs) = grads.as_deref_mut() {
                gemm_tn(g.data(), x.data(), &mut gs[*weight], *out_dim, b, *in_dim);
                for i in 0..b {
                    for (acc, v) in gs[*bias].iter_mut().zip(g.row(i)) {
                        *acc += *v;
                    }
                }
            }
            let mut gx = Tensor::zeros(x.shape());
            gemm_nn(
                g.data(),
                &params[*weight].value,
                gx.data_mut(),
                b,
                *out_dim,
                *in_dim,
            );
            gx
        }
        (Layer::Relu, Saved::Output(y)) => {
            let mut gx = g;
            for (gv, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                if *yv <= T::zero() {
                    *gv = T::zero();
                }
            }
            gx
        }
        (Layer::GlobalAvgPool, Saved::Shape(shape)) => {
            let (c, hw) = (shape[1], shape[2] * shape[3]);
            let inv = T::of(1.0 / hw as f64);
            let mut gx = Tensor::zeros(&shape);
            for i in 0..b {
                let gr = g.row(i).to_vec();
                let xr = gx.row_mut(i);
                for ch in 0..c {
                    xr[ch * hw..(ch + 1) * hw].fill(gr[ch] * inv);
                }
            }
            gx
        }
        (Layer::Flatten | Layer::Unflatten { .. }, Saved::Shape(shape)) => {
            g.reshape(&shape).expect("same size")
        }
        (Layer::Residual(body), Saved::Residual(inner)) => {
            let gb = backward(body, params, inner, g.clone(), grads);
            let mut gx = g;
            for (o, v) in gx.data_mut().iter_mut().zip(gb.data()) {
                *o += *v;
            }
            gx
        }
        (
            Layer::Attention {
                query,
                key,
                value,
                output,
                output_bias,
                channels: c,
            },
            Saved::Attention(caches),
        ) => {
            let c = *c;
            let n = g.shape()[2] * g.shape()[3];
            let scale = T::of(1.0 / libm::sqrt(c as f64));
            let mut gx_out = Tensor::zeros(g.shape());
            for (i, cache) in caches.into_iter().enumerate() {
                let gr = g.row(i);
                let mut gy = vec![T::zero(); n * c];
                for ch in 0..c {
                    for t in 0..n {
                        gy[t * c + ch] = gr[ch * n + t];
                    }
                }
                let mut gx = gy.clone();
                let mut go = vec![T::zero(); n * c];
                gemm_nn(&gy, &params[*output].value, &mut go, n, c, c);
                let mut da = vec![T::zero(); n * n];
                gemm_nt(&go, &cache.v, &mut da, n, c, n);
                let mut gv = vec![T::zero(); n * c];
                gemm_tn(&cache.attn, &go, &mut gv, n, n, c);
                let mut ds = vec![T::zero(); n * n];
                for t in 0..n {
                    let a = &cache.attn[t * n..(t + 1) * n];
                    let d = &da[t * n..(t + 1) * n];
                    let dot: T = a.iter().zip(d).map(|(x, y)| *x * *y).sum();
                    for s in 0..n {
                        ds[t * n + s] = a[s] * (d[s] - dot) * scale;
                    }
                }
                let mut gq = vec![T::zero(); n * c];
                gemm_nn(&ds, &cache.k, &mut gq, n, n, c);
                let mut gk = vec![T::zero(); n * c];
                gemm_tn(&ds, &cache.q, &mut gk, n, n, c);
                if let Some(gs) = grads.as_deref_mut() {
                    gemm_tn(&gy, &cache.o, &mut gs[*output], c, n, c);
                    for t in 0..n {
                        for ch in 0..c {
                            gs[*output_bias][ch] += gy[t * c + ch];
                        }
                    }
                    gemm_tn(&gq, &cache.x, &mut gs[*query], c, n, c);
                    gemm_tn(&gk, &cache.x, &mut gs[*key], c, n, c);
                    gemm_tn(&gv, &cache.x, &mut gs[*value], c, n, c);
                }
                gemm_nn(&gq, &params[*query].value, &mut gx, n, c, c);
                gemm_nn(&gk, &params[*key].value, &mut gx, n, c, c);
                gemm_nn(&gv, &params[*value].value, &mut gx, n, c, c);
                let xr = gx_out.row_mut(i);
                for ch in 0..c {
                    for t in 0..n {
                        xr[ch * n + t] = gx[t * c + ch];
                    }
                }
            }
            gx_out
        }
        (
            Layer::GroupNorm {
                gamma,
                beta,
                channels: c,
                groups,
            },
            Saved::Norm { xhat, inv_std },
        ) => {
            let per = xhat.row_len();
            let hw = per / c;
            let span = per / groups;
            let n = T::of(span as f64);
            let gv = &params[*gamma].value;
            let mut gx = g;
            for i in 0..b {
                let xr = xhat.row(i);
                let gr = gx.row_mut(i);
                if let Some(gs) = grads.as_deref_mut() {
                    for ch in 0..*c {
                        let (xp, gp) = (&xr[ch * hw..(ch + 1) * hw], &gr[ch * hw..(ch + 1) * hw]);
                        gs[*gamma][ch] += xp.iter().zip(gp).map(|(a, b)| *a * *b).sum::<T>();
                        gs[*beta][ch] += gp.iter().copied().sum::<T>();
                    }
                }
                for (ch, plane) in gr.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v *= gv[ch]);
                }
                for (k, (gg, xg)) in gr.chunks_mut(span).zip(xr.chunks(span)).enumerate() {
                    let sum_d = gg.iter().copied().sum::<T>();
                    let sum_dx = gg.iter().zip(xg).map(|(a, b)| *a * *b).sum::<T>();
                    let scale = inv_std[i * groups + k] / n;
                    for (d, xh) in gg.iter_mut().zip(xg) {
                        *d = scale * (n * *d - sum_d - *xh * sum_dx);
                    }
                }
            }
            gx
        }
        _ => unreachable!("tape does not match layer stack"),
    }
}

/// Incrementally builds a layer stack, tracking the per-sample shape and
/// initializing parameters from a seeded stream.
///
/// Weights are drawn from `N(0, gain^2 / fan_in)` with gain `sqrt(2)` in front
/// of a ReLU and `1` otherwise; biases start at zero.
pub struct NetBuilder<'a, T> {
    layers: Vec<Layer>,
    params: &'a mut Vec<Param<T>>,
    shape: Vec<usize>,
    prefix: String,
    rng: &'a mut Stream,
}

impl<'a, T: Real> NetBuilder<'a, T> {
    pub fn new(
        params: &'a mut Vec<Param<T>>,
        rng: &'a mut Stream,
        input_shape: &[usize],
        prefix: &str,
    ) -> Self {
        Self {
            layers: Vec::new(),
            params,
            shape: input_shape.to_vec(),
            prefix: prefix.into(),
            rng,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn push_param(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                if std == 0.0 {
                    T::zero()
                } else {
                    T::of(std * rng::normal(self.rng))
                }
            })
            .collect();
        let full = if self.prefix.is_empty() {
            name.into()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        };
        self.params.push(Param {
            name: full,
            shape: shape.to_vec(),
            value,
        });
        self.params.len() - 1
    }

    fn push_layer(&mut self, layer: Layer) -> Result<()> {
        self.shape = layer.out_shape(&self.shape)?;
        self.layers.push(layer);
        Ok(())
    }

    pub fn conv(
        &mut self,
        name: &str,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<&mut Self> {
        let c = *self.shape.first().ok_or(Error::Empty("conv input shape"))?;
        let fan_in = (c * kernel * kernel) as f64;
        let weight = self.push_param(
            &alloc::format!("{name}.weight"),
            &[out, c, kernel, kernel],
            gain / libm::sqrt(fan_in),
        );
        let bias = self.push_param(&alloc::format!("{name}.bias"), &[out], 0.0);
        self.push_layer(Layer::Conv2d {
            weight,
            bias,
            in_channels: c,
            out_channels: out,
            kernel,
            stride,
            padding,
        })?;
        Ok(self)
    }

    pub fn linear(&mut self, name: &str, out: usize, gain: f64) -> Result<&mut Self> {
        if self.shape.len() != 1 {
            self.push_layer(Layer::Flatten)?;
        }
        let d = self.shape[0];
        let weight = self.push_param(
            &alloc::format!("{name}.weight"),
            &[out, d],
            gain / libm::sqrt(d as f64),
        );
        let bias = self.push_param(&alloc::format!("{name}.bias"), &[out], 0.0);
        self.push_layer(Layer::Linear {
            weight,
            bias,
            in_dim: d,
            out_dim: out,
        })?;
        Ok(self)
    }

    pub fn relu(&mut self) -> Result<&mut Self> {
        self.push_layer(Layer::Relu)?;
        Ok(self)
    }

    pub fn global_avg_pool(&mut self) -> Result<&mut Self> {
        self.push_layer(Layer::GlobalAvgPool)?;
        Ok(self)
    }

    pub fn flatten(&mut self) -> Result<&mut Self> {
        self.push_layer(Layer::Flatten)?;
        Ok(self)
    }

    pub fn unflatten(&mut self, channels: usize, height: usize, width: usize) -> Result<&mut Self> {
        self.push_layer(Layer::Unflatten {
            channels,
            height,
            width,
        })?;
        Ok(self)
    }

    /// Adds `x + body(x)`; `body` must preserve the shape.
    pub fn residual(
        &mut self,
        name: &str,
        body: impl FnOnce(&mut NetBuilder<'_, T>) -> Result<()>,
    ) -> Result<&mut Self> {
        let prefix = if self.prefix.is_empty() {
            name.into()
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        };
        let shape = self.shape.clone();
        let layers = {
            let mut inner = NetBuilder {
                layers: Vec::new(),
                params: &mut *self.params,
                shape,
                prefix,
                rng: &mut *self.rng,
            };
            body(&mut inner)?;
            inner.layers
        };
        self.push_layer(Layer::Residual(layers))?;
        Ok(self)
    }

    pub fn attention(&mut self, name: &str) -> Result<&mut Self> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "attention needs a [C,H,W] map, got {:?}",
                self.shape
            )));
        }
        let c = self.shape[0];
        let std = 1.0 / libm::sqrt(c as f64);
        let query = self.push_param(&alloc::format!("{name}.query"), &[c, c], std);
        let key = self.push_param(&alloc::format!("{name}.key"), &[c, c], std);
        let value = self.push_param(&alloc::format!("{name}.value"), &[c, c], std);
        let output = self.push_param(&alloc::format!("{name}.output.weight"), &[c, c], std);
        let output_bias = self.push_param(&alloc::format!("{name}.output.bias"), &[c], 0.0);
        self.push_layer(Layer::Attention {
            query,
            key,
            value,
            output,
            output_bias,
            channels: c,
        })?;
        Ok(self)
    }

    /// Group normalization with the largest of 4, 2 or 1 groups that divides
    /// the channel count; scale starts at one and shift at zero.
    pub fn group_norm(&mut self, name: &str) -> Result<&mut Self> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "group norm needs a [C,H,W] map, got {:?}",
                self.shape
            )));
        }
        let c = self.shape[0];
        let groups = [4, 2, 1]
            .into_iter()
            .find(|g| c.is_multiple_of(*g))
            .unwrap_or(1);
        let gamma = self.push_param(&alloc::format!("{name}.weight"), &[c], 0.0);
        self.params[gamma].value.fill(T::one());
        let beta = self.push_param(&alloc::format!("{name}.bias"), &[c], 0.0);
        self.push_layer(Layer::GroupNorm {
            gamma,
            beta,
            channels: c,
            groups,
        })?;
        Ok(self)
    }

    pub fn finish(self) -> (Vec<Layer>, Vec<usize>) {
        (self.layers, self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(
        input: &[usize],
        f: impl FnOnce(&mut NetBuilder<'_, f64>) -> Result<()>,
    ) -> (Vec<Layer>, Vec<Param<f64>>) {
        let mut params = Vec::new();
        let mut r = rng::stream(11, "test", 0);
        let mut b = NetBuilder::new(&mut params, &mut r, input, "");
        f(&mut b).unwrap();
        let (layers, _) = b.finish();
        (layers, params)
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng::stream(seed, "x", 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng::normal(&mut r)).collect()).unwrap()
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/d(param, input).
    fn check(layers: &[Layer], params: &mut [Param<f64>], x: Tensor<f64>) {
        let mut tape = Tape::new();
        let y = forward(layers, params, x.clone(), Some(&mut tape));
        let weights = random_input(y.shape(), 99);
        let objective = |p: &[Param<f64>], x: &Tensor<f64>| -> f64 {
            let y = forward(layers, p, x.clone(), None);
            y.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let gx = backward(layers, params, tape, weights.clone(), Some(&mut grads));
        let h = 1e-5;
        let rel = |a: f64, n: f64| {
            let d = a.abs().max(n.abs());
            if d < 1e-7 {
                (a - n).abs()
            } else {
                (a - n).abs() / d
            }
        };
        #[allow(clippy::needless_range_loop)]
        for pi in 0..params.len() {
            for j in 0..params[pi].value.len() {
                let orig = params[pi].value[j];
                params[pi].value[j] = orig + h;
                let up = objective(params, &x);
                params[pi].value[j] = orig - h;
                let down = objective(params, &x);
                params[pi].value[j] = orig;
                let num = (up - down) / (2.0 * h);
                assert!(
                    rel(grads[pi][j], num) < 1e-5,
                    "param {} [{}]: {} vs {}",
                    params[pi].name,
                    j,
                    grads[pi][j],
                    num
                );
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let num = (objective(params, &xp) - objective(params, &xm)) / (2.0 * h);
            assert!(
                rel(gx.data()[j], num) < 1e-5,
                "input [{}]: {} vs {}",
                j,
                gx.data()[j],
                num
            );
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let (layers, mut params) = build(&[2, 5, 5], |b| {
            b.conv("c1", 3, 3, 2, 1, 1.4)?
                .relu()?
                .conv("c2", 2, 3, 1, 1, 1.0)?
                .global_avg_pool()?
                .linear("fc", 3, 1.0)?;
            Ok(())
        });
        check(&layers, &mut params, random_input(&[2, 2, 5, 5], 1));
    }

    #[test]
    fn residual_block_gradients_match_finite_differences() {
        let (layers, mut params) = build(&[2, 3, 3], |b| {
            b.residual("block", |r| {
                r.conv("c1", 2, 3, 1, 1, 1.4)?
                    .relu()?
                    .conv("c2", 2, 3, 1, 1, 1.0)?;
                Ok(())
            })?
            .relu()?
            .flatten()?;
            Ok(())
        });
        check(&layers, &mut params, random_input(&[3, 2, 3, 3], 2));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (layers, mut params) = build(&[3, 2, 2], |b| {
            b.attention("attn")?;
            Ok(())
        });
        for p in params.iter_mut() {
            if p.name.ends_with("bias") {
                p.value
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = 0.1 * i as f64);
            }
        }
        check(&layers, &mut params, random_input(&[2, 3, 2, 2], 3));
    }

    #[test]
    fn group_norm_gradients_match_finite_differences() {
        let (layers, mut params) = build(&[4, 3, 3], |b| {
            b.conv("c", 4, 3, 1, 1, 1.4)?
                .group_norm("gn")?
                .relu()?
                .global_avg_pool()?;
            Ok(())
        });
        for p in params.iter_mut().filter(|p| p.name.starts_with("gn")) {
            p.value
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v += 0.3 * i as f64 - 0.2);
        }
        check(&layers, &mut params, random_input(&[2, 4, 3, 3], 4));
    }

    #[test]
    fn group_norm_output_is_standardized_per_group() {
        let (layers, params) = build(&[4, 2, 2], |b| {
            b.group_norm("gn")?;
            Ok(())
        });
        assert!(matches!(layers[0], Layer::GroupNorm { groups: 4, .. }));
        let y = forward(&layers, &params, random_input(&[3, 4, 2, 2], 8), None);
        for grp in y.data().chunks(4) {
            let mean = grp.iter().sum::<f64>() / 4.0;
            let var = grp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut params: Vec<Param<f32>> = Vec::new();
        let mut r = rng::stream(0, "t", 0);
        let mut b = NetBuilder::new(&mut params, &mut r, &[4], "");
        assert!(b.attention("a").is_err());
        assert!(b.global_avg_pool().is_err());
    }

    #[test]
    fn conv_output_matches_direct_convolution() {
        let (layers, params) = build(&[1, 4, 4], |b| {
            b.conv("c", 1, 3, 1, 1, 1.0)?;
            Ok(())
        });
        let x = random_input(&[1, 1, 4, 4], 5);
        let y = forward(&layers, &params, x.clone(), None);
        let w = &params[0].value;
        for oy in 0..4 {
            for ox in 0..4 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) =
                            (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if (0..4).contains(&iy) && (0..4).contains(&ix) {
                            acc += w[ky * 3 + kx] * x.data()[(iy * 4 + ix) as usize];
                        }
                    }
                }
                assert!((y.data()[oy * 4 + ox] - acc).abs() < 1e-12);
            }
        }
    }
}
