//! Image containers and the differentiable resampling operations shared by
//! every other module: finite-difference gradients, Gaussian smoothing (with
//! its exact adjoint), bilinear warping (with its exact backward pass), and
//! bilinear resizing.
//!
//! All arithmetic is double precision. Operations are pure functions of their
//! inputs and never mutate shared state.

use crate::error::{Error, Result};

/// Single-channel 2D intensity field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image2D {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// Image filled with a constant.
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Wrap row-major data; length must equal `width * height`.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Build from a per-pixel closure `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel count.
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Elementwise map into a new image.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Two-channel per-pixel displacement in pixel units. `ux` and `uy` are
/// row-major planes of the same dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    ux: Vec<f64>,
    uy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ux: vec![0.0; width * height],
            uy: vec![0.0; width * height],
        }
    }

    /// Wrap component planes; both must have length `width * height` and be
    /// finite everywhere.
    pub fn from_vecs(width: usize, height: usize, ux: Vec<f64>, uy: Vec<f64>) -> Result<Self> {
        if ux.len() != width * height || uy.len() != width * height {
            return Err(Error::invalid("displacement plane length mismatch"));
        }
        if !(ux.iter().all(|v| v.is_finite()) && uy.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(Self {
            width,
            height,
            ux,
            uy,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn ux(&self) -> &[f64] {
        &self.ux
    }

    #[inline]
    pub fn uy(&self) -> &[f64] {
        &self.uy
    }

    #[inline]
    pub fn ux_mut(&mut self) -> &mut [f64] {
        &mut self.ux
    }

    #[inline]
    pub fn uy_mut(&mut self) -> &mut [f64] {
        &mut self.uy
    }

    pub fn same_dims_as(&self, img: &Image2D) -> bool {
        self.width == img.width() && self.height == img.height()
    }

    /// Largest per-pixel Euclidean magnitude.
    pub fn max_magnitude(&self) -> f64 {
        self.ux
            .iter()
            .zip(&self.uy)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .fold(0.0, f64::max)
    }

    /// Mean per-pixel Euclidean magnitude.
    pub fn mean_magnitude(&self) -> f64 {
        let s: f64 = self
            .ux
            .iter()
            .zip(&self.uy)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .sum();
        s / self.ux.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.ux.iter().all(|v| v.is_finite()) && self.uy.iter().all(|v| v.is_finite())
    }
}

/// Ordered batch of same-sized slices, carrying their original volume indices.
#[derive(Debug, Clone)]
pub struct SliceStack {
    pub slices: Vec<Image2D>,
    pub slice_indices: Vec<usize>,
}

impl SliceStack {
    pub fn new(slices: Vec<Image2D>, slice_indices: Vec<usize>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::invalid("slice stack must be non-empty"));
        }
        if slice_indices.len() != slices.len() {
            return Err(Error::invalid("slice index count must match slice count"));
        }
        let (w, h) = (slices[0].width(), slices[0].height());
        for s in &slices {
            if s.width() != w || s.height() != h {
                return Err(Error::DimensionMismatch {
                    expected_w: w,
                    expected_h: h,
                    got_w: s.width(),
                    got_h: s.height(),
                });
            }
        }
        Ok(Self {
            slices,
            slice_indices,
        })
    }

    /// Stack of one slice with index 0.
    pub fn single(slice: Image2D) -> Self {
        Self {
            slices: vec![slice],
            slice_indices: vec![0],
        }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

fn check_dims(img: &Image2D, u: &DisplacementField) -> Result<()> {
    if !u.same_dims_as(img) {
        return Err(Error::DimensionMismatch {
            expected_w: img.width(),
            expected_h: img.height(),
            got_w: u.width(),
            got_h: u.height(),
        });
    }
    Ok(())
}

/// Central differences in the interior, one-sided at borders, unit pixel
/// spacing. Degenerate axes (width or height 1) get a zero component.
pub fn gradient(img: &Image2D) -> (Image2D, Image2D) {
    let (w, h) = (img.width(), img.height());
    let mut gx = Image2D::zeros(w, h);
    let mut gy = Image2D::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = if w == 1 {
                0.0
            } else if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                0.5 * (img.get(x + 1, y) - img.get(x - 1, y))
            };
            let dy = if h == 1 {
                0.0
            } else if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                0.5 * (img.get(x, y + 1) - img.get(x, y - 1))
            };
            gx.set(x, y, dx);
            gy.set(x, y, dy);
        }
    }
    (gx, gy)
}

/// Normalized 1D Gaussian taps for radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for t in -(radius as i64)..=(radius as i64) {
        let t = t as f64;
        k.push((-t * t / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

fn smooth_axis(src: &[f64], w: usize, h: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (k.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in k.iter().enumerate() {
                let t = ki as i64 - radius;
                let (sx, sy) = if horizontal {
                    (clamp_idx(x as i64 + t, w), y)
                } else {
                    (x, clamp_idx(y as i64 + t, h))
                };
                acc += kv * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`smooth_axis`]: scatter each input through the clamped taps.
fn smooth_axis_adjoint(src: &[f64], w: usize, h: usize, k: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (k.len() / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let v = src[y * w + x];
            for (ki, &kv) in k.iter().enumerate() {
                let t = ki as i64 - radius;
                let (sx, sy) = if horizontal {
                    (clamp_idx(x as i64 + t, w), y)
                } else {
                    (x, clamp_idx(y as i64 + t, h))
                };
                out[sy * w + sx] += kv * v;
            }
        }
    }
    out
}

/// Separable Gaussian smoothing, kernel radius `ceil(3 sigma)`, edge
/// replication at borders. `sigma == 0` returns the input unchanged.
pub fn gaussian_smooth(img: &Image2D, sigma: f64) -> Result<Image2D> {
    if sigma < 0.0 {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let (w, h) = (img.width(), img.height());
    let tmp = smooth_axis(img.as_slice(), w, h, &k, true);
    let out = smooth_axis(&tmp, w, h, &k, false);
    Image2D::from_vec(w, h, out)
}

/// Exact adjoint of [`gaussian_smooth`]. Matches the smoothing operator in the
/// interior; at borders the replicated taps fold mass back onto edge pixels,
/// which the plain operator does not, so gradient computations must use this.
pub fn gaussian_smooth_adjoint(img: &Image2D, sigma: f64) -> Result<Image2D> {
    if sigma < 0.0 {
        return Err(Error::invalid("sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let (w, h) = (img.width(), img.height());
    // (Gv ∘ Gh)ᵀ = Ghᵀ ∘ Gvᵀ
    let tmp = smooth_axis_adjoint(img.as_slice(), w, h, &k, false);
    let out = smooth_axis_adjoint(&tmp, w, h, &k, true);
    Image2D::from_vec(w, h, out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample of `img` at continuous coordinates `(sx, sy)` clamped to
/// the image rectangle.
#[inline]
fn sample_bilinear(img: &Image2D, sx: f64, sy: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let cx = sx.clamp(0.0, (w - 1) as f64);
    let cy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let top = lerp(img.get(x0, y0), img.get(x1, y0), fx);
    let bot = lerp(img.get(x0, y1), img.get(x1, y1), fx);
    lerp(top, bot, fy)
}

/// Warp by bilinear sampling: `out(x) = img(x + u(x))`, coordinates clamped
/// to the image rectangle. The zero field reproduces `img` exactly.
pub fn warp_bilinear(img: &Image2D, u: &DisplacementField) -> Result<Image2D> {
    check_dims(img, u)?;
    let (w, h) = (img.width(), img.height());
    let mut out = Image2D::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + u.ux()[i];
            let sy = y as f64 + u.uy()[i];
            out.set(x, y, sample_bilinear(img, sx, sy));
        }
    }
    Ok(out)
}

/// Backward pass of [`warp_bilinear`] for the scalar `sum(upstream * warp)`.
///
/// `d_u` is the derivative with respect to the displacement components; where
/// a sample coordinate was clamped the derivative in that axis is zero.
/// `d_img` is the transpose splat of `upstream` through the bilinear weights,
/// the exact adjoint of the (linear-in-`img`) warp.
pub fn warp_gradients(
    img: &Image2D,
    u: &DisplacementField,
    upstream: &Image2D,
) -> Result<(Image2D, DisplacementField)> {
    check_dims(img, u)?;
    if !img.same_dims(upstream) {
        return Err(Error::DimensionMismatch {
            expected_w: img.width(),
            expected_h: img.height(),
            got_w: upstream.width(),
            got_h: upstream.height(),
        });
    }
    let (w, h) = (img.width(), img.height());
    let mut d_img = Image2D::zeros(w, h);
    let mut d_u = DisplacementField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = upstream.as_slice()[i];
            let sx = x as f64 + u.ux()[i];
            let sy = y as f64 + u.uy()[i];
            let cx = sx.clamp(0.0, (w - 1) as f64);
            let cy = sy.clamp(0.0, (h - 1) as f64);
            let x0 = cx.floor() as usize;
            let y0 = cy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = cx - x0 as f64;
            let fy = cy - y0 as f64;

            let (i00, i10) = (img.get(x0, y0), img.get(x1, y0));
            let (i01, i11) = (img.get(x0, y1), img.get(x1, y1));

            // Sample derivative w.r.t. continuous coordinates, zeroed on clamp.
            let dx = if sx == cx {
                lerp(i10 - i00, i11 - i01, fy)
            } else {
                0.0
            };
            let dy = if sy == cy {
                lerp(i01 - i00, i11 - i10, fx)
            } else {
                0.0
            };
            d_u.ux_mut()[i] = g * dx;
            d_u.uy_mut()[i] = g * dy;

            let w00 = (1.0 - fx) * (1.0 - fy);
            let w10 = fx * (1.0 - fy);
            let w01 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            d_img.as_mut_slice()[y0 * w + x0] += g * w00;
            d_img.as_mut_slice()[y0 * w + x1] += g * w10;
            d_img.as_mut_slice()[y1 * w + x0] += g * w01;
            d_img.as_mut_slice()[y1 * w + x1] += g * w11;
        }
    }
    Ok((d_img, d_u))
}

/// Bilinear resampling to `(new_w, new_h)` with align-corners-false sampling.
/// Resizing to the source dimensions is the identity.
pub fn resize_bilinear(img: &Image2D, new_w: usize, new_h: usize) -> Result<Image2D> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::invalid("target dimensions must be positive"));
    }
    if new_w == img.width() && new_h == img.height() {
        return Ok(img.clone());
    }
    let sx_scale = img.width() as f64 / new_w as f64;
    let sy_scale = img.height() as f64 / new_h as f64;
    let out = Image2D::from_fn(new_w, new_h, |x, y| {
        let sx = (x as f64 + 0.5) * sx_scale - 0.5;
        let sy = (y as f64 + 0.5) * sy_scale - 0.5;
        sample_bilinear(img, sx, sy)
    });
    Ok(out)
}
