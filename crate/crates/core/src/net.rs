//! A closed family of small feedforward networks (convolution, max-pool, dense,
//! ReLU) with hand-written reverse-mode gradients.
//!
//! Activations are kept channel-major (`C x H x W`) internally; inputs arrive as
//! `H x W x C` images and input gradients are returned in the same layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        window: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Dense { .. } => "dense",
            Layer::Relu => "relu",
        }
    }

    fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }
}

/// Activation shape, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture descriptor: input image shape, layer list, class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    /// `[height, width, channels]`
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl NetArch {
    pub fn new(input: [usize; 3], classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let arch = Self {
            input,
            classes,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// conv(8,5x5)-pool(2)-conv(16,5x5)-pool(2)-dense(128)-dense(C), ReLU after each hidden layer.
    pub fn lenet(input: [usize; 3], classes: usize) -> Result<Self> {
        Self::new(
            input,
            classes,
            vec![
                Layer::Conv {
                    out_channels: 8,
                    kernel: 5,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
                Layer::Dense { out: 128 },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
        )
    }

    /// Fully connected network over a flat `dim`-vector (stored as a `1 x dim x 1` image).
    pub fn mlp(dim: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() * 2 + 1);
        for &h in hidden {
            layers.push(Layer::Dense { out: h });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { out: classes });
        Self::new([1, dim, 1], classes, layers)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Activation shapes; entry 0 is the input, entry `k + 1` the output of layer `k`.
    pub fn shapes(&self) -> Result<Vec<Chw>> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("input dimensions must be positive"));
        }
        let mut shapes = vec![Chw { c, h, w }];
        for (i, layer) in self.layers.iter().enumerate() {
            let s = *shapes.last().unwrap();
            let next = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero conv parameter")));
                    }
                    if kernel > s.h || kernel > s.w {
                        return Err(Error::invalid(format!(
                            "layer {i}: kernel {kernel} larger than input {}x{}",
                            s.h, s.w
                        )));
                    }
                    Chw {
                        c: out_channels,
                        h: (s.h - kernel) / stride + 1,
                        w: (s.w - kernel) / stride + 1,
                    }
                }
                Layer::MaxPool { window } => {
                    if window == 0 || window > s.h || window > s.w {
                        return Err(Error::invalid(format!("layer {i}: bad pool window {window}")));
                    }
                    Chw {
                        c: s.c,
                        h: s.h / window,
                        w: s.w / window,
                    }
                }
                Layer::Dense { out } => {
                    if out == 0 {
                        return Err(Error::invalid(format!("layer {i}: zero dense width")));
                    }
                    Chw { c: out, h: 1, w: 1 }
                }
                Layer::Relu => s,
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let out = shapes.last().unwrap().len();
        if self.classes == 0 || out != self.classes {
            return Err(Error::invalid(format!(
                "final layer width {out} does not equal class count {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// `(weight_len, bias_len)` per layer; zero for parameter-free layers.
    pub fn param_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, s)| match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                } => (out_channels * s.c * kernel * kernel, out_channels),
                Layer::Dense { out } => (out * s.len(), out),
                _ => (0, 0),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Per-layer weights and biases matching a [`NetArch`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(arch: &NetArch) -> Result<Self> {
        Ok(Self {
            layers: arch
                .param_shapes()?
                .into_iter()
                .map(|(w, b)| LayerParams {
                    weight: vec![T::zero(); w],
                    bias: vec![T::zero(); b],
                })
                .collect(),
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: &NetArch, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        for (p, (&(wlen, blen), layer)) in params
            .layers
            .iter_mut()
            .zip(arch.param_shapes()?.iter().zip(&arch.layers))
        {
            if !layer.has_params() {
                continue;
            }
            let fan_in = wlen / blen;
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut p.weight {
                *w = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
        Ok(params)
    }

    pub fn check(&self, arch: &NetArch) -> Result<()> {
        let shapes = arch.param_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::shape(shapes.len(), self.layers.len()));
        }
        for (i, (&(w, b), p)) in shapes.iter().zip(&self.layers).enumerate() {
            if p.weight.len() != w || p.bias.len() != b {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i}: weight {w}, bias {b}"),
                    found: format!("weight {}, bias {}", p.weight.len(), p.bias.len()),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                    bias: l.bias.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|v| *v = T::zero());
            l.bias.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn count(&self) -> usize {
        self.values().count()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

/// Forward activations retained for a backward pass.
pub struct Trace<T> {
    shapes: Vec<Chw>,
    acts: Vec<Vec<T>>,
    /// im2col buffers for conv layers, argmax indices for pool layers.
    cols: Vec<Vec<T>>,
    pool_idx: Vec<Vec<usize>>,
}

fn check_input<T>(arch: &NetArch, x: &Tensor<T>) -> Result<()>
where
    T: Copy + Default,
{
    if x.shape() != arch.input {
        return Err(Error::shape(arch.input, x.shape()));
    }
    Ok(())
}

fn hwc_to_chw<T: Copy>(x: &[T], s: Chw) -> Vec<T> {
    if s.c == 1 {
        return x.to_vec();
    }
    let mut out = Vec::with_capacity(x.len());
    for c in 0..s.c {
        for i in 0..s.h * s.w {
            out.push(x[i * s.c + c]);
        }
    }
    out
}

fn chw_to_hwc<T: Copy + Default>(x: &[T], s: Chw) -> Vec<T> {
    if s.c == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::default(); x.len()];
    for c in 0..s.c {
        for i in 0..s.h * s.w {
            out[i * s.c + c] = x[c * s.h * s.w + i];
        }
    }
    out
}

fn im2col<T: Real>(input: &[T], s: Chw, k: usize, stride: usize, o: Chw) -> Vec<T> {
    let p = o.h * o.w;
    let mut cols = vec![T::zero(); s.c * k * k * p];
    for ci in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..o.h {
                    let src = &input[(ci * s.h + oy * stride + ky) * s.w..];
                    let d = &mut dst[oy * o.w..(oy + 1) * o.w];
                    if stride == 1 {
                        d.copy_from_slice(&src[kx..kx + o.w]);
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            *v = src[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], s: Chw, k: usize, stride: usize, o: Chw, out: &mut [T]) {
    let p = o.h * o.w;
    for ci in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..o.h {
                    let base = (ci * s.h + oy * stride + ky) * s.w + kx;
                    for ox in 0..o.w {
                        out[base + ox * stride] += src[oy * o.w + ox];
                    }
                }
            }
        }
    }
}

/// Runs the network, keeping what the backward pass needs.
pub fn trace<T: Real>(arch: &NetArch, params: &NetParams<T>, x: &Tensor<T>) -> Result<Trace<T>> {
    check_input(arch, x)?;
    params.check(arch)?;
    let shapes = arch.shapes()?;
    let n = arch.layers.len();
    let mut acts = Vec::with_capacity(n + 1);
    let mut cols = vec![Vec::new(); n];
    let mut pool_idx = vec![Vec::new(); n];
    acts.push(hwc_to_chw(x.data(), shapes[0]));

    for (i, layer) in arch.layers.iter().enumerate() {
        let s = shapes[i];
        let o = shapes[i + 1];
        let input = &acts[i];
        let p = &params.layers[i];
        let out = match *layer {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                let c = im2col(input, s, kernel, stride, o);
                let plen = o.h * o.w;
                let ckk = s.c * kernel * kernel;
                let mut out = vec![T::zero(); out_channels * plen];
                for (co, chunk) in out.chunks_mut(plen).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = p.bias[co]);
                }
                T::gemm(
                    out_channels,
                    ckk,
                    plen,
                    T::one(),
                    &p.weight,
                    ckk as isize,
                    1,
                    &c,
                    plen as isize,
                    1,
                    T::one(),
                    &mut out,
                    plen as isize,
                    1,
                );
                cols[i] = c;
                out
            }
            Layer::MaxPool { window } => {
                let mut out = Vec::with_capacity(o.len());
                let mut idx = Vec::with_capacity(o.len());
                for c in 0..s.c {
                    for oy in 0..o.h {
                        for ox in 0..o.w {
                            let mut best = (c * s.h + oy * window) * s.w + ox * window;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let j = (c * s.h + oy * window + dy) * s.w + ox * window + dx;
                                    // strict comparison keeps the first maximum on ties
                                    if input[j] > input[best] {
                                        best = j;
                                    }
                                }
                            }
                            out.push(input[best]);
                            idx.push(best);
                        }
                    }
                }
                pool_idx[i] = idx;
                out
            }
            Layer::Dense { out } => {
                let inlen = s.len();
                (0..out)
                    .map(|r| {
                        let row = &p.weight[r * inlen..(r + 1) * inlen];
                        p.bias[r] + row.iter().zip(input).map(|(&w, &v)| w * v).sum::<T>()
                    })
                    .collect()
            }
            Layer::Relu => input.iter().map(|&v| v.max(T::zero())).collect(),
        };
        acts.push(out);
    }
    Ok(Trace {
        shapes,
        acts,
        cols,
        pool_idx,
    })
}

impl<T: Real> Trace<T> {
    pub fn logits(&self) -> &[T] {
        self.acts.last().unwrap()
    }

    /// Reverse pass of `<logits, grad_logits>`. Parameter gradients are
    /// accumulated into `grad_params` when given; the input gradient is
    /// returned when `want_input` is set.
    pub fn backprop(
        &self,
        arch: &NetArch,
        params: &NetParams<T>,
        grad_logits: &[T],
        mut grad_params: Option<&mut NetParams<T>>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grad_logits.len() != arch.classes {
            return Err(Error::shape(arch.classes, grad_logits.len()));
        }
        let mut grad = grad_logits.to_vec();
        for i in (0..arch.layers.len()).rev() {
            let s = self.shapes[i];
            let o = self.shapes[i + 1];
            let input = &self.acts[i];
            let p = &params.layers[i];
            let need_input = want_input || i > 0;
            grad = match arch.layers[i] {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let plen = o.h * o.w;
                    let ckk = s.c * kernel * kernel;
                    let cols = &self.cols[i];
                    if let Some(gp) = grad_params.as_deref_mut() {
                        let g = &mut gp.layers[i];
                        T::gemm(
                            out_channels,
                            plen,
                            ckk,
                            T::one(),
                            &grad,
                            plen as isize,
                            1,
                            cols,
                            1,
                            plen as isize,
                            T::one(),
                            &mut g.weight,
                            ckk as isize,
                            1,
                        );
                        for (co, chunk) in grad.chunks(plen).enumerate() {
                            g.bias[co] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    if need_input {
                        let mut gcols = vec![T::zero(); ckk * plen];
                        T::gemm(
                            ckk,
                            out_channels,
                            plen,
                            T::one(),
                            &p.weight,
                            1,
                            ckk as isize,
                            &grad,
                            plen as isize,
                            1,
                            T::zero(),
                            &mut gcols,
                            plen as isize,
                            1,
                        );
                        let mut gin = vec![T::zero(); s.len()];
                        col2im(&gcols, s, kernel, stride, o, &mut gin);
                        gin
                    } else {
                        Vec::new()
                    }
                }
                Layer::MaxPool { .. } => {
                    let mut gin = vec![T::zero(); s.len()];
                    for (&j, &g) in self.pool_idx[i].iter().zip(&grad) {
                        gin[j] += g;
                    }
                    gin
                }
                Layer::Dense { out } => {
                    let inlen = s.len();
                    if let Some(gp) = grad_params.as_deref_mut() {
                        let gl = &mut gp.layers[i];
                        for r in 0..out {
                            let g = grad[r];
                            gl.bias[r] += g;
                            if g != T::zero() {
                                let row = &mut gl.weight[r * inlen..(r + 1) * inlen];
                                for (w, &v) in row.iter_mut().zip(input) {
                                    *w += g * v;
                                }
                            }
                        }
                    }
                    if need_input {
                        let mut gin = vec![T::zero(); inlen];
                        for r in 0..out {
                            let g = grad[r];
                            if g == T::zero() {
                                continue;
                            }
                            let row = &p.weight[r * inlen..(r + 1) * inlen];
                            for (d, &w) in gin.iter_mut().zip(row) {
                                *d += g * w;
                            }
                        }
                        gin
                    } else {
                        Vec::new()
                    }
                }
                Layer::Relu => grad
                    .iter()
                    .zip(input)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            };
            if !need_input && i == 0 {
                break;
            }
        }
        if want_input {
            let [h, w, c] = arch.input;
            Ok(Some(Tensor::from_vec(
                &[h, w, c],
                chw_to_hwc(&grad, self.shapes[0]),
            )?))
        } else {
            Ok(None)
        }
    }
}

/// Pre-softmax logits.
pub fn forward<T: Real>(arch: &NetArch, params: &NetParams<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    let mut t = trace(arch, params, x)?;
    Ok(t.acts.pop().expect("output activation"))
}

/// Exact gradients of `<logits, grad_logits>` with respect to the parameters and the input.
pub fn backward<T: Real>(
    arch: &NetArch,
    params: &NetParams<T>,
    x: &Tensor<T>,
    grad_logits: &[T],
) -> Result<(NetParams<T>, Tensor<T>)> {
    if grad_logits.len() != arch.classes {
        return Err(Error::shape(arch.classes, grad_logits.len()));
    }
    let t = trace(arch, params, x)?;
    let mut gp = NetParams::zeros(arch)?;
    let gx = t
        .backprop(arch, params, grad_logits, Some(&mut gp), true)?
        .expect("input gradient requested");
    Ok((gp, gx))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Floor added inside the logarithm of [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::invalid(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-(p + LOG_FLOOR).ln().min(0.0))
}

/// Gradient of `cross_entropy(softmax(logits), label)` with respect to the logits.
pub fn cross_entropy_grad<T: Real>(logits: &[T], label: usize) -> Vec<T> {
    let mut g = softmax(logits);
    g[label] -= T::one();
    g
}
