//! Layer primitives with hand-derived backward passes.
//!
//! Every operation is a pure function of its inputs. Backward functions take
//! the forward input again (plus parameters) rather than a saved cache, so the
//! same code path serves training and finite-difference checks.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

/// One layer of a network trunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Lrn {
        k: f64,
        n: usize,
        alpha: f64,
        beta: f64,
    },
    #[serde(rename = "maxpool")]
    MaxPool { window: usize, stride: usize },
    Dense {
        out_features: usize,
        /// Optional declared input width, checked against the inferred one at build time.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        in_features: Option<usize>,
    },
}

impl LayerSpec {
    pub const DEFAULT_LRN: LayerSpec = LayerSpec::Lrn {
        k: 2.0,
        n: 5,
        alpha: 1e-4,
        beta: 0.75,
    };

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Lrn { .. } => "lrn",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Dense { .. } => "dense",
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel_size,
                stride,
                ..
            } => {
                if out_channels == 0 || kernel_size == 0 || stride == 0 {
                    return Err("out_channels, kernel_size and stride must be >= 1".into());
                }
            }
            LayerSpec::Relu => {}
            LayerSpec::Lrn { k, n, alpha, beta } => {
                if n == 0 || n % 2 == 0 {
                    return Err(format!("lrn size n must be odd and >= 1, got {n}"));
                }
                if [k, beta, alpha].iter().any(|v| v.is_nan()) || k <= 0.0 || beta <= 0.0 || alpha < 0.0 {
                    return Err(format!(
                        "lrn requires k > 0, beta > 0, alpha >= 0 (k={k}, alpha={alpha}, beta={beta})"
                    ));
                }
            }
            LayerSpec::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err("maxpool window and stride must be >= 1".into());
                }
            }
            LayerSpec::Dense {
                out_features,
                in_features,
            } => {
                if out_features == 0 || in_features == Some(0) {
                    return Err("dense feature counts must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Output shape (without the batch dimension) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        self.validate()?;
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel_size,
                stride,
                pad,
            } => {
                let [_, h, w] = spatial(input)?;
                if h + 2 * pad < kernel_size || w + 2 * pad < kernel_size {
                    return Err(format!(
                        "kernel {kernel_size} larger than padded input {}x{}",
                        h + 2 * pad,
                        w + 2 * pad
                    ));
                }
                Ok(vec![
                    out_channels,
                    (h + 2 * pad - kernel_size) / stride + 1,
                    (w + 2 * pad - kernel_size) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Lrn { .. } => {
                spatial(input)?;
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { window, stride } => {
                let [c, h, w] = spatial(input)?;
                if window > h || window > w {
                    return Err(format!("pool window {window} larger than input {h}x{w}"));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            LayerSpec::Dense {
                out_features,
                in_features,
            } => {
                let flat: usize = input.iter().product();
                match in_features {
                    Some(d) if d != flat => Err(format!(
                        "dense declares {d} input features but receives {flat}"
                    )),
                    _ => Ok(vec![out_features]),
                }
            }
        }
    }
}

fn spatial(input: &[usize]) -> std::result::Result<[usize; 3], String> {
    match input {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(format!("expected a C x H x W input, got {other:?}")),
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel_size,
                stride,
                pad,
            } => write!(f, "conv({out_channels},{kernel_size},{stride},{pad})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Lrn { k, n, alpha, beta } => write!(f, "lrn({k},{n},{alpha},{beta})"),
            LayerSpec::MaxPool { window, stride } => write!(f, "maxpool({window},{stride})"),
            LayerSpec::Dense {
                out_features,
                in_features: None,
            } => write!(f, "dense({out_features})"),
            LayerSpec::Dense {
                out_features,
                in_features: Some(d),
            } => write!(f, "dense({d},{out_features})"),
        }
    }
}

/// Parses `conv(16,5,1,2)`, `relu`, `lrn`, `lrn(2,5,0.0001,0.75)`,
/// `maxpool(2,2)`, `dense(128)`, `dense(2048,128)` (input width, output width).
impl FromStr for LayerSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..]
                    .strip_suffix(')')
                    .ok_or_else(|| format!("missing `)` in layer `{s}`"))?;
                let args: Vec<&str> = inner.split(',').map(str::trim).collect();
                (&s[..open], args)
            }
            None => (s, Vec::new()),
        };
        let ints = |expected: usize| -> std::result::Result<Vec<usize>, String> {
            if args.len() != expected {
                return Err(format!("layer `{s}` takes {expected} arguments"));
            }
            args.iter()
                .map(|a| a.parse::<usize>().map_err(|e| format!("layer `{s}`: {e}")))
                .collect()
        };
        let spec = match name.trim() {
            "conv" => {
                let v = ints(4)?;
                LayerSpec::Conv {
                    out_channels: v[0],
                    kernel_size: v[1],
                    stride: v[2],
                    pad: v[3],
                }
            }
            "relu" if args.is_empty() => LayerSpec::Relu,
            "lrn" if args.is_empty() => LayerSpec::DEFAULT_LRN,
            "lrn" => {
                if args.len() != 4 {
                    return Err(format!("layer `{s}` takes 0 or 4 arguments"));
                }
                let num = |i: usize| {
                    args[i]
                        .parse::<f64>()
                        .map_err(|e| format!("layer `{s}`: {e}"))
                };
                LayerSpec::Lrn {
                    k: num(0)?,
                    n: args[1]
                        .parse::<usize>()
                        .map_err(|e| format!("layer `{s}`: {e}"))?,
                    alpha: num(2)?,
                    beta: num(3)?,
                }
            }
            "maxpool" => {
                let v = ints(2)?;
                LayerSpec::MaxPool {
                    window: v[0],
                    stride: v[1],
                }
            }
            "dense" if args.len() == 2 => {
                let v = ints(2)?;
                LayerSpec::Dense {
                    out_features: v[1],
                    in_features: Some(v[0]),
                }
            }
            "dense" => LayerSpec::Dense {
                out_features: ints(1)?[0],
                in_features: None,
            },
            _ => return Err(format!("unknown layer `{s}`")),
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[f, wc, kh, kw]) = (input.dims(), weights.dims()) else {
            return Err(Error::Shape(format!(
                "conv2d expects input N x C x H x W and weights F x C x kH x kW, got {:?} and {:?}",
                input.dims(),
                weights.dims()
            )));
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d input has {c} channels but weights expect {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output position `o` and kernel offset `k`, if not padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }

    /// Unfolds one sample into a `patch x out_plane` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for ch in 0..self.c {
            let xc = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let d = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        match self.src(oi, ki, self.h) {
                            None => d.fill(T::zero()),
                            Some(ii) => {
                                let xr = &xc[ii * self.w..(ii + 1) * self.w];
                                for (oj, v) in d.iter_mut().enumerate() {
                                    *v = match self.src(oj, kj, self.w) {
                                        Some(jj) => xr[jj],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Folds a `patch x out_plane` matrix back into one sample, accumulating.
    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for ch in 0..self.c {
            let dxc = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let Some(ii) = self.src(oi, ki, self.h) else {
                            continue;
                        };
                        for oj in 0..self.ow {
                            if let Some(jj) = self.src(oj, kj, self.w) {
                                dxc[ii * self.w + jj] = dxc[ii * self.w + jj] + src[oi * self.ow + oj];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input [N,C,H,W]` with `weights [F,C,kH,kW]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weights, stride, pad)?;
    if bias.len() != g.f {
        return Err(Error::Shape(format!(
            "conv2d bias has {} entries, expected {}",
            bias.len(),
            g.f
        )));
    }
    input.ensure_finite("conv2d input")?;
    let plane = g.out_plane();
    let mut out = Tensor::zeros(&[g.n, g.f, g.oh, g.ow]);
    let w = Mat::new(weights.data(), g.f, g.patch());
    input
        .data()
        .par_chunks(g.c * g.h * g.w)
        .zip(out.data_mut().par_chunks_mut(g.f * plane))
        .for_each_init(
            || vec![T::zero(); g.patch() * plane],
            |cols, (x, y)| {
                g.im2col(x, cols);
                for (fi, row) in y.chunks_mut(plane).enumerate() {
                    row.fill(bias.data()[fi]);
                }
                gemm(w, Mat::new(cols, g.patch(), plane), T::one(), y);
            },
        );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub d_input: Tensor<T>,
    pub d_weights: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ParamGrads<T>> {
    let g = ConvGeom::new(input, weights, stride, pad)?;
    if d_out.dims() != [g.n, g.f, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv2d upstream gradient {:?} does not match output {:?}",
            d_out.dims(),
            [g.n, g.f, g.oh, g.ow]
        )));
    }
    let plane = g.out_plane();
    let patch = g.patch();
    let w = Mat::new(weights.data(), g.f, patch);
    let mut d_input = Tensor::zeros(input.dims());

    // Per-sample weight gradients are reduced afterwards in sample order so the
    // result does not depend on how rayon splits the batch.
    let partials: Vec<Vec<T>> = input
        .data()
        .par_chunks(g.c * g.h * g.w)
        .zip(d_out.data().par_chunks(g.f * plane))
        .zip(d_input.data_mut().par_chunks_mut(g.c * g.h * g.w))
        .map_init(
            || (vec![T::zero(); patch * plane], vec![T::zero(); patch * plane]),
            |(cols, dcols), ((x, dy), dx)| {
                g.im2col(x, cols);
                let dy = Mat::new(dy, g.f, plane);
                let mut dw = vec![T::zero(); g.f * patch];
                gemm(dy, Mat::new(cols, patch, plane).t(), T::zero(), &mut dw);
                gemm(w.t(), dy, T::zero(), dcols);
                g.col2im(dcols, dx);
                dw
            },
        )
        .collect();

    let mut d_weights = Tensor::zeros(weights.dims());
    for dw in &partials {
        for (acc, v) in d_weights.data_mut().iter_mut().zip(dw) {
            *acc = *acc + *v;
        }
    }
    let mut d_bias = Tensor::zeros(&[g.f]);
    for dy in d_out.data().chunks(g.f * plane) {
        for (fi, row) in dy.chunks(plane).enumerate() {
            let s: T = row.iter().copied().sum();
            d_bias.data_mut()[fi] = d_bias.data()[fi] + s;
        }
    }
    Ok(ParamGrads {
        d_input,
        d_weights,
        d_bias,
    })
}

// ---------------------------------------------------------------------------
// relu

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `d_out` where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("relu", input, d_out)?;
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: upstream gradient {:?} does not match input {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// local response normalization (across channels)

#[derive(Debug, Clone, Copy)]
pub struct LrnParams {
    pub k: f64,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl LrnParams {
    fn check(&self) -> Result<()> {
        LayerSpec::Lrn {
            k: self.k,
            n: self.n,
            alpha: self.alpha,
            beta: self.beta,
        }
        .validate()
        .map_err(Error::Shape)
    }
}

fn nchw<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match t.dims() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        d => Err(Error::Shape(format!("{what} expects N x C x H x W, got {d:?}"))),
    }
}

/// `k + alpha * sum of squares over the channel window`, same layout as the input.
fn lrn_scale<T: Scalar>(x: &[T], c: usize, hw: usize, p: &LrnParams) -> Vec<T> {
    let half = p.n / 2;
    let k = T::from_f64(p.k);
    let alpha = T::from_f64(p.alpha);
    let mut scale = vec![T::zero(); x.len()];
    for (xs, ss) in x.chunks(c * hw).zip(scale.chunks_mut(c * hw)) {
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for i in 0..hw {
                let mut acc = T::zero();
                for j in lo..=hi {
                    let v = xs[j * hw + i];
                    acc = acc + v * v;
                }
                ss[ch * hw + i] = k + alpha * acc;
            }
        }
    }
    scale
}

pub fn lrn_forward<T: Scalar>(input: &Tensor<T>, p: &LrnParams) -> Result<Tensor<T>> {
    p.check()?;
    let [_, c, h, w] = nchw("lrn", input)?;
    let beta = T::from_f64(p.beta);
    let scale = lrn_scale(input.data(), c, h * w, p);
    let data = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&x, &s)| x * s.powf(-beta))
        .collect();
    Tensor::new(input.dims().to_vec(), data)
}

/// `dx_j = dy_j s_j^-b - 2ab x_j sum_{c: j in win(c)} dy_c x_c s_c^(-b-1)`.
pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    d_out: &Tensor<T>,
    p: &LrnParams,
) -> Result<Tensor<T>> {
    p.check()?;
    same_shape("lrn", input, d_out)?;
    let [_, c, h, w] = nchw("lrn", input)?;
    let hw = h * w;
    let half = p.n / 2;
    let beta = T::from_f64(p.beta);
    let coef = T::from_f64(2.0 * p.alpha * p.beta);
    let x = input.data();
    let scale = lrn_scale(x, c, hw, p);
    // t_c = dy_c * x_c * s_c^(-b-1)
    let t: Vec<T> = d_out
        .data()
        .iter()
        .zip(x)
        .zip(&scale)
        .map(|((&dy, &xv), &s)| dy * xv * s.powf(-beta - T::one()))
        .collect();
    let mut dx = vec![T::zero(); x.len()];
    for (base, out) in dx.chunks_mut(c * hw).enumerate() {
        let off = base * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for i in 0..hw {
                let idx = off + ch * hw + i;
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc = acc + t[off + j * hw + i];
                }
                out[ch * hw + i] =
                    d_out.data()[idx] * scale[idx].powf(-beta) - coef * x[idx] * acc;
            }
        }
    }
    Tensor::new(input.dims().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// max pooling

fn pool_geom<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<([usize; 4], usize, usize)> {
    let [n, c, h, w] = nchw("maxpool", input)?;
    if window == 0 || stride == 0 {
        return Err(Error::Shape("maxpool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "maxpool window {window} larger than input {h}x{w}"
        )));
    }
    Ok(([n, c, h, w], (h - window) / stride + 1, (w - window) / stride + 1))
}

/// Returns the pooled tensor and, per output, the flat input index of the
/// first row-major maximum in its window.
fn maxpool_argmax<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let ([n, c, h, w], oh, ow) = pool_geom(input, window, stride)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
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
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    Ok(maxpool_argmax(input, window, stride)?.0)
}

pub fn maxpool_backward<T: Scalar>(
    input: &Tensor<T>,
    d_out: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (out, arg) = maxpool_argmax(input, window, stride)?;
    if out.dims() != d_out.dims() {
        return Err(Error::Shape(format!(
            "maxpool upstream gradient {:?} does not match output {:?}",
            d_out.dims(),
            out.dims()
        )));
    }
    let mut dx = Tensor::zeros(input.dims());
    let d = dx.data_mut();
    for (&src, &g) in arg.iter().zip(d_out.data()) {
        d[src] = d[src] + g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// dense

fn dense_geom<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let &[d, m] = weights.dims() else {
        return Err(Error::Shape(format!(
            "dense weights must be D x M, got {:?}",
            weights.dims()
        )));
    };
    let (n, din) = input.batch_split();
    if din != d {
        return Err(Error::Shape(format!(
            "dense input has {din} features per row, weights expect {d}"
        )));
    }
    Ok((n, d, m))
}

/// `input [N, D...] * weights [D, M] + bias [M]`; trailing input dims are flattened.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d, m) = dense_geom(input, weights)?;
    if bias.len() != m {
        return Err(Error::Shape(format!(
            "dense bias has {} entries, expected {m}",
            bias.len()
        )));
    }
    input.ensure_finite("dense input")?;
    let mut out = Tensor::zeros(&[n, m]);
    for row in out.data_mut().chunks_mut(m) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        Mat::new(input.data(), n, d),
        Mat::new(weights.data(), d, m),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    let (n, d, m) = dense_geom(input, weights)?;
    if d_out.dims() != [n, m] {
        return Err(Error::Shape(format!(
            "dense upstream gradient {:?} does not match output {:?}",
            d_out.dims(),
            [n, m]
        )));
    }
    let x = Mat::new(input.data(), n, d);
    let dy = Mat::new(d_out.data(), n, m);
    let mut d_input = Tensor::zeros(input.dims());
    gemm(dy, Mat::new(weights.data(), d, m).t(), T::zero(), d_input.data_mut());
    let mut d_weights = Tensor::zeros(&[d, m]);
    gemm(x.t(), dy, T::zero(), d_weights.data_mut());
    let mut d_bias = Tensor::zeros(&[m]);
    for row in d_out.data().chunks(m) {
        for (acc, &v) in d_bias.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(ParamGrads {
        d_input,
        d_weights,
        d_bias,
    })
}
