//! Stochastic test-time input transformations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Image;

/// A transformation family and its parameters. Pixel values live on `[0, 1]`,
/// so `epsilon` is on that scale too (an 8-bit budget of 130 is `130 / 255`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// Random pixel noise, uniform in `[-epsilon, epsilon]`.
    Rpn { epsilon: f64 },
    /// Pixel deflection followed by wavelet denoising when `sigma > 0`.
    Pd {
        deflections: usize,
        window: usize,
        sigma: f64,
    },
    /// Random resize to `s x s`, `s` in `[resize_lo, resize_hi]`, then zero pad.
    Rrp {
        resize_lo: usize,
        resize_hi: usize,
        output_size: usize,
    },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::Rpn { epsilon } => {
                if !(epsilon >= 0.0 && epsilon.is_finite()) {
                    return Err(Error::invalid(format!("rpn epsilon must be >= 0, got {epsilon}")));
                }
            }
            TransformSpec::Pd { window, sigma, .. } => {
                if window < 1 {
                    return Err(Error::invalid("pd window radius must be >= 1"));
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::invalid(format!("pd sigma must be >= 0, got {sigma}")));
                }
            }
            TransformSpec::Rrp {
                resize_lo,
                resize_hi,
                output_size,
            } => {
                if !(1 <= resize_lo && resize_lo <= resize_hi && resize_hi <= output_size) {
                    return Err(Error::invalid(format!(
                        "rrp needs 1 <= lo <= hi <= output size, got {resize_lo}, {resize_hi}, {output_size}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Short stable label, e.g. `pd(d=100,w=20,sigma=0)`.
    pub fn id(&self) -> String {
        match *self {
            TransformSpec::Rpn { epsilon } => format!("rpn(eps={epsilon})"),
            TransformSpec::Pd {
                deflections,
                window,
                sigma,
            } => format!("pd(d={deflections},w={window},sigma={sigma})"),
            TransformSpec::Rrp {
                resize_lo,
                resize_hi,
                output_size,
            } => format!("rrp({resize_lo}..={resize_hi},out={output_size})"),
        }
    }

    /// Shape of the transformed image for an input of shape `[h, w, c]`.
    pub fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        match *self {
            TransformSpec::Rrp { output_size, .. } => [output_size, output_size, input[2]],
            _ => input,
        }
    }
}

/// Moves `cand` one ulp at a time toward `x` until `|cand - x| <= eps` holds
/// exactly in f64. Only needed when f32 rounding overshoots the budget.
pub(crate) fn clamp_step(x: f32, mut cand: f32, eps: f64) -> f32 {
    while (cand as f64 - x as f64).abs() > eps {
        cand = if cand > x { cand.next_down() } else { cand.next_up() };
    }
    cand
}

pub fn apply_rpn<R: Rng>(x: &Image, epsilon: f64, rng: &mut R) -> Image {
    if epsilon == 0.0 {
        return x.clone();
    }
    x.map(|v| {
        let noise = rng.gen_range(-epsilon..=epsilon);
        let cand = ((v as f64 + noise).clamp(0.0, 1.0)) as f32;
        clamp_step(v, cand, epsilon)
    })
}

pub fn apply_pd<R: Rng>(x: &Image, deflections: usize, window: usize, sigma: f64, rng: &mut R) -> Image {
    let (h, w, c) = x.hwc();
    let mut out = x.clone();
    let data = out.data_mut();
    for _ in 0..deflections {
        let py = rng.gen_range(0..h);
        let px = rng.gen_range(0..w);
        let qy = rng.gen_range(py.saturating_sub(window)..=(py + window).min(h - 1));
        let qx = rng.gen_range(px.saturating_sub(window)..=(px + window).min(w - 1));
        for ch in 0..c {
            data[(py * w + px) * c + ch] = data[(qy * w + qx) * c + ch];
        }
    }
    if sigma > 0.0 {
        wavelet_denoise(&out, sigma)
    } else {
        out
    }
}

/// Haar decomposition depth used by [`wavelet_denoise`].
pub const HAAR_LEVELS: usize = 3;

/// Orthonormal 2-D Haar soft-threshold denoising, per channel.
///
/// Each channel is replicate-padded to power-of-two sides, decomposed
/// [`HAAR_LEVELS`] times (fewer if a side runs out), detail coefficients are
/// soft-thresholded at `sigma * sqrt(2 ln P)` with `P` the unpadded pixel
/// count, and the reconstruction is cropped and clipped to `[0, 1]`.
pub fn wavelet_denoise(x: &Image, sigma: f64) -> Image {
    let (h, w, c) = x.hwc();
    let (ph, pw) = (h.next_power_of_two(), w.next_power_of_two());
    let levels = HAAR_LEVELS.min(ph.min(pw).trailing_zeros() as usize);
    let pixels = (h * w) as f64;
    let thr = if pixels > 1.0 { sigma * (2.0 * pixels.ln()).sqrt() } else { 0.0 };
    let mut out = x.clone();
    let mut plane = vec![0.0f64; ph * pw];
    for ch in 0..c {
        for y in 0..ph {
            for xx in 0..pw {
                let (sy, sx) = (y.min(h - 1), xx.min(w - 1));
                plane[y * pw + xx] = x.data()[(sy * w + sx) * c + ch] as f64;
            }
        }
        haar_forward(&mut plane, ph, pw, levels);
        if thr > 0.0 {
            let (lh, lw) = (ph >> levels, pw >> levels);
            for y in 0..ph {
                for xx in 0..pw {
                    if y < lh && xx < lw {
                        continue;
                    }
                    let v = &mut plane[y * pw + xx];
                    *v = v.signum() * (v.abs() - thr).max(0.0);
                }
            }
        }
        haar_inverse(&mut plane, ph, pw, levels);
        let data = out.data_mut();
        for y in 0..h {
            for xx in 0..w {
                data[(y * w + xx) * c + ch] = plane[y * pw + xx].clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// In-place multi-level transform; after it, the top-left `(h >> levels) x
/// (w >> levels)` block holds the approximation coefficients.
fn haar_forward(plane: &mut [f64], h: usize, w: usize, levels: usize) {
    let mut buf = vec![0.0; h.max(w)];
    for level in 0..levels {
        let (bh, bw) = (h >> level, w >> level);
        for y in 0..bh {
            let row = &mut plane[y * w..y * w + bw];
            haar_step(row, &mut buf[..bw]);
        }
        for x in 0..bw {
            let mut col: Vec<f64> = (0..bh).map(|y| plane[y * w + x]).collect();
            haar_step(&mut col, &mut buf[..bh]);
            for (y, v) in col.into_iter().enumerate() {
                plane[y * w + x] = v;
            }
        }
    }
}

fn haar_inverse(plane: &mut [f64], h: usize, w: usize, levels: usize) {
    let mut buf = vec![0.0; h.max(w)];
    for level in (0..levels).rev() {
        let (bh, bw) = (h >> level, w >> level);
        for x in 0..bw {
            let mut col: Vec<f64> = (0..bh).map(|y| plane[y * w + x]).collect();
            haar_unstep(&mut col, &mut buf[..bh]);
            for (y, v) in col.into_iter().enumerate() {
                plane[y * w + x] = v;
            }
        }
        for y in 0..bh {
            let row = &mut plane[y * w..y * w + bw];
            haar_unstep(row, &mut buf[..bw]);
        }
    }
}

/// One 1-D level: averages to the first half, differences to the second.
fn haar_step(v: &mut [f64], buf: &mut [f64]) {
    let half = v.len() / 2;
    for i in 0..half {
        buf[i] = (v[2 * i] + v[2 * i + 1]) * INV_SQRT2;
        buf[half + i] = (v[2 * i] - v[2 * i + 1]) * INV_SQRT2;
    }
    v.copy_from_slice(buf);
}

fn haar_unstep(v: &mut [f64], buf: &mut [f64]) {
    let half = v.len() / 2;
    for i in 0..half {
        buf[2 * i] = (v[i] + v[half + i]) * INV_SQRT2;
        buf[2 * i + 1] = (v[i] - v[half + i]) * INV_SQRT2;
    }
    v.copy_from_slice(buf);
}

pub fn apply_rrp<R: Rng>(
    x: &Image,
    resize_lo: usize,
    resize_hi: usize,
    output_size: usize,
    rng: &mut R,
) -> Result<Image> {
    TransformSpec::Rrp {
        resize_lo,
        resize_hi,
        output_size,
    }
    .validate()?;
    let s = rng.gen_range(resize_lo..=resize_hi);
    let resized = resize_bilinear(x, s, s);
    let oy = rng.gen_range(0..=output_size - s);
    let ox = rng.gen_range(0..=output_size - s);
    let c = x.hwc().2;
    let mut out = Image::zeros(&[output_size, output_size, c]);
    let data = out.data_mut();
    for y in 0..s {
        for xx in 0..s {
            for ch in 0..c {
                data[((oy + y) * output_size + ox + xx) * c + ch] = resized.data()[(y * s + xx) * c + ch];
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn resize_bilinear(x: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = x.hwc();
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
    };
    let mut out = Image::zeros(&[out_h, out_w, c]);
    let src = x.data();
    let data = out.data_mut();
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for xx in 0..out_w {
            let (x0, x1, fx) = coord(xx, w, out_w);
            for ch in 0..c {
                let at = |yy: usize, xi: usize| src[(yy * w + xi) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data[(y * out_w + xx) * c + ch] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

/// Applies `spec` to `x` using the caller's generator.
pub fn apply<R: Rng>(spec: &TransformSpec, x: &Image, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    if x.shape().len() != 3 {
        return Err(Error::shape("[h, w, c]", x.shape()));
    }
    Ok(match *spec {
        TransformSpec::Rpn { epsilon } => apply_rpn(x, epsilon, rng),
        TransformSpec::Pd {
            deflections,
            window,
            sigma,
        } => apply_pd(x, deflections, window, sigma, rng),
        TransformSpec::Rrp {
            resize_lo,
            resize_hi,
            output_size,
        } => apply_rrp(x, resize_lo, resize_hi, output_size, rng)?,
    })
}

/// Applies `spec` with the derived stream for one `(seed, image, sample)`.
pub fn sample(spec: &TransformSpec, x: &Image, stream: RngStream) -> Result<Image> {
    apply(spec, x, &mut stream.rng())
}
