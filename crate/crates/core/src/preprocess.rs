//! Preprocessing that makes a template/reference slice pair comparable:
//! cropping, min-max normalization, histogram matching of the template onto
//! the reference, CLAHE contrast enhancement, and resizing to a standard
//! resolution. Also the morphological mask postprocessing applied to final
//! segmentations.

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, Image2D, SliceStack};

pub const HIST_BINS: usize = 256;

/// Pipeline configuration. `crop_rect` is `(x0, y0, w, h)` in source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub crop_rect: Option<(usize, usize, usize, usize)>,
    pub target_size: (usize, usize),
    pub clahe_tiles: (usize, usize),
    pub clahe_clip: f64,
    pub skip_resize_low_contrast: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            crop_rect: None,
            target_size: (320, 320),
            clahe_tiles: (8, 8),
            clahe_clip: 2.0,
            skip_resize_low_contrast: false,
        }
    }
}

/// Affine map of intensities onto [0, 1]. A constant image maps to all zeros.
pub fn normalize_minmax(img: &Image2D) -> Image2D {
    let lo = img.min();
    let hi = img.max();
    if hi - lo <= 0.0 {
        return Image2D::zeros(img.width(), img.height());
    }
    let scale = 1.0 / (hi - lo);
    img.map(|v| (v - lo) * scale)
}

fn histogram(img: &Image2D) -> [f64; HIST_BINS] {
    let mut h = [0.0; HIST_BINS];
    for &v in img.as_slice() {
        let k = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        h[k] += 1.0;
    }
    h
}

fn cdf_from_hist(h: &[f64; HIST_BINS]) -> [f64; HIST_BINS] {
    let total: f64 = h.iter().sum();
    let mut cdf = [0.0; HIST_BINS];
    let mut acc = 0.0;
    for (k, &c) in h.iter().enumerate() {
        acc += c;
        cdf[k] = acc / total;
    }
    cdf
}

/// Piecewise-linear CDF through the bin-edge values; `cdf[k]` is the fraction
/// of samples at or below the upper edge of bin `k`.
fn cdf_eval(cdf: &[f64; HIST_BINS], v: f64) -> f64 {
    let p = v.clamp(0.0, 1.0) * HIST_BINS as f64;
    let k = (p as usize).min(HIST_BINS - 1);
    let frac = p - k as f64;
    let lo = if k == 0 { 0.0 } else { cdf[k - 1] };
    lo + frac * (cdf[k] - lo)
}

/// Inverse of the piecewise-linear CDF. Flat stretches resolve to the least
/// upper bin whose cumulative mass strictly exceeds `q`, so that a value maps
/// back to itself under its own distribution.
fn cdf_invert(cdf: &[f64; HIST_BINS], q: f64) -> f64 {
    for k in 0..HIST_BINS {
        if cdf[k] > q {
            let lo = if k == 0 { 0.0 } else { cdf[k - 1] };
            let frac = (q - lo) / (cdf[k] - lo);
            return ((k as f64 + frac) / HIST_BINS as f64).clamp(0.0, 1.0);
        }
    }
    // q touches the top of the distribution: upper edge of the last occupied bin.
    for k in (0..HIST_BINS).rev() {
        let lo = if k == 0 { 0.0 } else { cdf[k - 1] };
        if cdf[k] > lo {
            return ((k + 1) as f64 / HIST_BINS as f64).clamp(0.0, 1.0);
        }
    }
    0.0
}

/// Classic CDF matching with 256 bins: `out = invCDF_ref(CDF_src(v))`, with
/// linear interpolation inside bins and output clamped to [0, 1]. Monotone
/// non-decreasing in the source intensity.
pub fn histogram_match(src: &Image2D, reference: &Image2D) -> Image2D {
    let cdf_src = cdf_from_hist(&histogram(src));
    let cdf_ref = cdf_from_hist(&histogram(reference));
    src.map(|v| cdf_invert(&cdf_ref, cdf_eval(&cdf_src, v)))
}

/// Clip a histogram at `clip * mean_bin_count` and redistribute the excess
/// uniformly, iterating until stable so a fully clipped histogram is exactly
/// uniform.
fn clip_histogram(h: &mut [f64; HIST_BINS], clip: f64) {
    if !clip.is_finite() {
        return;
    }
    let total: f64 = h.iter().sum();
    let limit = clip * total / HIST_BINS as f64;
    for _ in 0..64 {
        let mut excess = 0.0;
        for v in h.iter_mut() {
            if *v > limit {
                excess += *v - limit;
                *v = limit;
            }
        }
        if excess <= 1e-12 * total {
            return;
        }
        let share = excess / HIST_BINS as f64;
        for v in h.iter_mut() {
            *v += share;
        }
    }
}

struct TileMap {
    cdf: [f64; HIST_BINS],
}

impl TileMap {
    fn eval(&self, v: f64) -> f64 {
        cdf_eval(&self.cdf, v)
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Per-tile 256-bin histograms are clip-limited, turned into piecewise-linear
/// CDF mappings, and blended bilinearly between the four surrounding tile
/// centers. A tile grid that exceeds the image extent falls back to a single
/// global tile.
pub fn clahe(img: &Image2D, tiles: (usize, usize), clip: f64) -> Result<Image2D> {
    let (w, h) = (img.width(), img.height());
    let (mut tx, mut ty) = tiles;
    if tx == 0 || ty == 0 {
        return Err(Error::invalid("tile grid must be at least 1x1"));
    }
    if clip < 1.0 {
        return Err(Error::invalid("clip limit must be >= 1.0"));
    }
    if tx > w || ty > h {
        tx = 1;
        ty = 1;
    }

    // Tile i spans columns [i*w/tx, (i+1)*w/tx); likewise for rows.
    let x_bounds: Vec<(usize, usize)> = (0..tx).map(|i| (i * w / tx, (i + 1) * w / tx)).collect();
    let y_bounds: Vec<(usize, usize)> = (0..ty).map(|j| (j * h / ty, (j + 1) * h / ty)).collect();
    let x_centers: Vec<f64> = x_bounds.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();
    let y_centers: Vec<f64> = y_bounds.iter().map(|&(a, b)| (a + b - 1) as f64 / 2.0).collect();

    let mut maps = Vec::with_capacity(tx * ty);
    for &(y0, y1) in &y_bounds {
        for &(x0, x1) in &x_bounds {
            let mut hist = [0.0; HIST_BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = img.get(x, y).clamp(0.0, 1.0);
                    let k = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                    hist[k] += 1.0;
                }
            }
            clip_histogram(&mut hist, clip);
            maps.push(TileMap {
                cdf: cdf_from_hist(&hist),
            });
        }
    }

    // Index of the left/upper tile center at or before `pos`, plus the blend
    // weight towards the next center.
    let locate = |centers: &[f64], pos: f64| -> (usize, usize, f64) {
        if pos <= centers[0] {
            return (0, 0, 0.0);
        }
        if pos >= centers[centers.len() - 1] {
            let last = centers.len() - 1;
            return (last, last, 0.0);
        }
        let mut i = 0;
        while centers[i + 1] <= pos {
            i += 1;
        }
        let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };

    let out = Image2D::from_fn(w, h, |x, y| {
        let v = img.get(x, y);
        let (i0, i1, fx) = locate(&x_centers, x as f64);
        let (j0, j1, fy) = locate(&y_centers, y as f64);
        let m00 = maps[j0 * tx + i0].eval(v);
        let m10 = maps[j0 * tx + i1].eval(v);
        let m01 = maps[j1 * tx + i0].eval(v);
        let m11 = maps[j1 * tx + i1].eval(v);
        let top = m00 + fx * (m10 - m00);
        let bot = m01 + fx * (m11 - m01);
        (top + fy * (bot - top)).clamp(0.0, 1.0)
    });
    Ok(out)
}

fn crop(img: &Image2D, rect: (usize, usize, usize, usize)) -> Result<Image2D> {
    let (x0, y0, cw, ch) = rect;
    if cw == 0 || ch == 0 || x0 + cw > img.width() || y0 + ch > img.height() {
        return Err(Error::invalid(format!(
            "crop rect ({x0}, {y0}, {cw}, {ch}) outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    Ok(Image2D::from_fn(cw, ch, |x, y| img.get(x0 + x, y0 + y)))
}

/// Full slice-pair pipeline: crop, normalize, match the template histogram to
/// the paired reference slice, CLAHE on both, resize to the target size
/// (skipped when `skip_resize_low_contrast` keeps the original resolution).
pub fn preprocess_pair(
    t_stack: &SliceStack,
    r_stack: &SliceStack,
    cfg: &PreprocessConfig,
) -> Result<(SliceStack, SliceStack)> {
    if t_stack.len() != r_stack.len() {
        return Err(Error::invalid(format!(
            "slice-count mismatch: template {} vs reference {}",
            t_stack.len(),
            r_stack.len()
        )));
    }
    let mut t_out = Vec::with_capacity(t_stack.len());
    let mut r_out = Vec::with_capacity(r_stack.len());
    for (t, r) in t_stack.slices.iter().zip(&r_stack.slices) {
        let (mut t_img, mut r_img) = match cfg.crop_rect {
            Some(rect) => (crop(t, rect)?, crop(r, rect)?),
            None => (t.clone(), r.clone()),
        };
        t_img = normalize_minmax(&t_img);
        r_img = normalize_minmax(&r_img);
        t_img = histogram_match(&t_img, &r_img);
        t_img = clahe(&t_img, cfg.clahe_tiles, cfg.clahe_clip)?;
        r_img = clahe(&r_img, cfg.clahe_tiles, cfg.clahe_clip)?;
        if !cfg.skip_resize_low_contrast {
            let (tw, th) = cfg.target_size;
            t_img = resize_bilinear(&t_img, tw, th)?;
            r_img = resize_bilinear(&r_img, tw, th)?;
        }
        t_out.push(t_img);
        r_out.push(r_img);
    }
    Ok((
        SliceStack::new(t_out, t_stack.slice_indices.clone())?,
        SliceStack::new(r_out, r_stack.slice_indices.clone())?,
    ))
}

/// Pixel offsets of a disc of the given radius, including the center.
fn disc_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offs = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offs.push((dx, dy));
            }
        }
    }
    offs
}

fn erode(mask: &Image2D, offs: &[(i64, i64)]) -> Image2D {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    Image2D::from_fn(mask.width(), mask.height(), |x, y| {
        for &(dx, dy) in offs {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.get(nx as usize, ny as usize) == 0.0 {
                return 0.0;
            }
        }
        1.0
    })
}

fn dilate(mask: &Image2D, offs: &[(i64, i64)]) -> Image2D {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    Image2D::from_fn(mask.width(), mask.height(), |x, y| {
        for &(dx, dy) in offs {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && nx < w && ny < h && mask.get(nx as usize, ny as usize) == 1.0 {
                return 1.0;
            }
        }
        0.0
    })
}

/// Binarize at 0.5, then open (erode-dilate) and close (dilate-erode) with
/// disc structuring elements. Out-of-bounds neighbors are ignored, which makes
/// the pair a proper adjunction on the image domain and the composite filter
/// idempotent.
pub fn postprocess_mask(mask: &Image2D, open_radius: usize, close_radius: usize) -> Image2D {
    let bin = mask.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let open_offs = disc_offsets(open_radius);
    let close_offs = disc_offsets(close_radius);
    let opened = dilate(&erode(&bin, &open_offs), &open_offs);
    erode(&dilate(&opened, &close_offs), &close_offs)
}

/// Kolmogorov-Smirnov distance between the binned intensity distributions.
pub fn ks_distance(a: &Image2D, b: &Image2D) -> f64 {
    let ca = cdf_from_hist(&histogram(a));
    let cb = cdf_from_hist(&histogram(b));
    ca.iter()
        .zip(&cb)
        .map(|(&p, &q)| (p - q).abs())
        .fold(0.0, f64::max)
}
