//! Registration and segmentation quality metrics, plus the Pearson
//! correlation matrix over collections of metric rows.
//!
//! Registration metrics compare the warped template against the reference;
//! segmentation metrics compare a probability map against a binary ground
//! truth. Dice is computed soft (directly on probabilities) while F1 and
//! Jaccard binarize at 0.5, which is why they can differ on the same masks.

use crate::error::{Error, Result};
use crate::image::{gradient, warp_bilinear, DisplacementField, Image2D};

/// PSNR ceiling reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// One full evaluation: five registration metrics and five segmentation
/// metrics, in the order they appear in CSV output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub ncc: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub rel_ssd: f64,
    pub ngf: f64,
    pub dice: f64,
    pub f1: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
}

/// CSV column names, in order.
pub const METRIC_COLUMNS: [&str; 10] = [
    "NCC",
    "SSIM",
    "PSNR",
    "relSSD",
    "NGF",
    "Dice",
    "F1",
    "Jaccard",
    "precision",
    "recall",
];

impl MetricsRow {
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.ncc,
            self.ssim,
            self.psnr_db,
            self.rel_ssd,
            self.ngf,
            self.dice,
            self.f1,
            self.jaccard,
            self.precision,
            self.recall,
        ]
    }

    pub fn from_array(v: [f64; 10]) -> Self {
        Self {
            ncc: v[0],
            ssim: v[1],
            psnr_db: v[2],
            rel_ssd: v[3],
            ngf: v[4],
            dice: v[5],
            f1: v[6],
            jaccard: v[7],
            precision: v[8],
            recall: v[9],
        }
    }

    /// Value by CSV column name.
    pub fn by_name(&self, name: &str) -> Option<f64> {
        METRIC_COLUMNS
            .iter()
            .position(|&c| c == name)
            .map(|i| self.to_array()[i])
    }
}

/// Symmetric Pearson coefficient matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

fn check_same(a: &Image2D, b: &Image2D) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            expected_w: a.width(),
            expected_h: a.height(),
            got_w: b.width(),
            got_h: b.height(),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with MAX = 1, capped at 99 dB for
/// (near-)identical images.
pub fn psnr(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_same(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| (p - q) * (p - q))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_window() -> Vec<f64> {
    let sigma = 1.5;
    let mut w = Vec::with_capacity(121);
    for y in -5i64..=5 {
        for x in -5i64..=5 {
            let d2 = (x * x + y * y) as f64;
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_from_stats(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Mean local SSIM over all fully contained 11x11 Gaussian windows
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1). Images smaller than
/// the window fall back to a single global window with uniform weights.
pub fn ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < 11 || h < 11 {
        let n = a.len() as f64;
        let mu_a = a.mean();
        let mu_b = b.mean();
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        let mut cov = 0.0;
        for i in 0..a.len() {
            let da = a.as_slice()[i] - mu_a;
            let db = b.as_slice()[i] - mu_b;
            var_a += da * da;
            var_b += db * db;
            cov += da * db;
        }
        return Ok(ssim_from_stats(mu_a, mu_b, var_a / n, var_b / n, cov / n));
    }

    let win = ssim_window();
    let mut acc = 0.0;
    let mut count = 0usize;
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut m_aa = 0.0;
            let mut m_bb = 0.0;
            let mut m_ab = 0.0;
            let mut k = 0;
            for dy in 0..11 {
                for dx in 0..11 {
                    let va = a.get(cx + dx - 5, cy + dy - 5);
                    let vb = b.get(cx + dx - 5, cy + dy - 5);
                    let wgt = win[k];
                    k += 1;
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    m_aa += wgt * va * va;
                    m_bb += wgt * vb * vb;
                    m_ab += wgt * va * vb;
                }
            }
            let var_a = m_aa - mu_a * mu_a;
            let var_b = m_bb - mu_b * mu_b;
            let cov = m_ab - mu_a * mu_b;
            acc += ssim_from_stats(mu_a, mu_b, var_a, var_b, cov);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Pearson-style normalized cross-correlation over the whole image; defined
/// as 0 when either image is constant.
pub fn ncc(a: &Image2D, b: &Image2D) -> Result<f64> {
    check_same(a, b)?;
    let mu_a = a.mean();
    let mu_b = b.mean();
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = a.as_slice()[i] - mu_a;
        let db = b.as_slice()[i] - mu_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Sum of squared differences after warping, relative to the unregistered
/// baseline: `sum((T(x+u) - R)^2) / sum((T - R)^2)`. The zero field gives
/// exactly 1. An identical pair with zero warped residual gives 0; an
/// identical pair with nonzero residual has no meaningful baseline and errors.
pub fn rel_ssd(template: &Image2D, u: &DisplacementField, reference: &Image2D) -> Result<f64> {
    check_same(template, reference)?;
    let warped = warp_bilinear(template, u)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..template.len() {
        let rn = warped.as_slice()[i] - reference.as_slice()[i];
        let rd = template.as_slice()[i] - reference.as_slice()[i];
        num += rn * rn;
        den += rd * rd;
    }
    if den == 0.0 {
        if num == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::DegenerateBaseline);
    }
    Ok(num / den)
}

/// Normalized-gradient-field distance: 0 where the gradients of `a` and `b`
/// are everywhere parallel, approaching 1 where they are unrelated.
/// `eta = None` uses 1% of the maximum gradient magnitude of `b`.
pub fn ngf(a: &Image2D, b: &Image2D, eta: Option<f64>) -> Result<f64> {
    check_same(a, b)?;
    let (gax, gay) = gradient(a);
    let (gbx, gby) = gradient(b);
    let eta = match eta {
        Some(e) => {
            if e <= 0.0 {
                return Err(Error::invalid("ngf eta must be positive"));
            }
            e
        }
        None => {
            let max_grad = gbx
                .as_slice()
                .iter()
                .zip(gby.as_slice())
                .map(|(&x, &y)| (x * x + y * y).sqrt())
                .fold(0.0, f64::max);
            (0.01 * max_grad).max(1e-8)
        }
    };
    let e2 = eta * eta;
    let n = a.len() as f64;
    let mut acc = 0.0;
    for i in 0..a.len() {
        let (ax, ay) = (gax.as_slice()[i], gay.as_slice()[i]);
        let (bx, by) = (gbx.as_slice()[i], gby.as_slice()[i]);
        let dot = ax * bx + ay * by + e2;
        let na = ax * ax + ay * ay + e2;
        let nb = bx * bx + by * by + e2;
        acc += (dot * dot) / (na * nb);
    }
    Ok(1.0 - acc / n)
}

/// Soft Dice on probability maps: `2 sum(p g) / (sum p + sum g + 1e-8)`.
pub fn dice_soft(p: &Image2D, g: &Image2D) -> Result<f64> {
    check_same(p, g)?;
    let mut inter = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        inter += p.as_slice()[i] * g.as_slice()[i];
        total += p.as_slice()[i] + g.as_slice()[i];
    }
    Ok(2.0 * inter / (total + 1e-8))
}

fn confusion(p: &Image2D, g: &Image2D, thresh: f64) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fno = 0.0;
    for i in 0..p.len() {
        let pp = p.as_slice()[i] >= thresh;
        let gg = g.as_slice()[i] >= 0.5;
        match (pp, gg) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fno += 1.0,
            (false, false) => {}
        }
    }
    (tp, fp, fno)
}

/// Hard F1 from the thresholded confusion counts, with precision and recall.
/// Two empty masks agree perfectly.
pub fn f1_hard(p: &Image2D, g: &Image2D, thresh: f64) -> Result<(f64, f64, f64)> {
    check_same(p, g)?;
    let (tp, fp, fno) = confusion(p, g, thresh);
    if tp + fp + fno == 0.0 {
        return Ok((1.0, 1.0, 1.0));
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fno > 0.0 { tp / (tp + fno) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok((f1, precision, recall))
}

/// Hard Jaccard index `TP / (TP + FP + FN)`; two empty masks agree perfectly.
pub fn jaccard_hard(p: &Image2D, g: &Image2D, thresh: f64) -> Result<f64> {
    check_same(p, g)?;
    let (tp, fp, fno) = confusion(p, g, thresh);
    if tp + fp + fno == 0.0 {
        return Ok(1.0);
    }
    Ok(tp / (tp + fp + fno))
}

fn pearson_pair(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

/// Pairwise Pearson coefficients between the selected metric columns over a
/// collection of rows. Needs at least 3 rows; a constant column correlates 0
/// with everything off the diagonal.
pub fn pearson_matrix(rows: &[MetricsRow], labels: &[&str]) -> Result<CorrelationMatrix> {
    if rows.len() < 3 {
        return Err(Error::TooFewRows(rows.len()));
    }
    let mut columns = Vec::with_capacity(labels.len());
    for &label in labels {
        let col: Option<Vec<f64>> = rows.iter().map(|r| r.by_name(label)).collect();
        columns.push(col.ok_or_else(|| Error::invalid(format!("unknown metric '{label}'")))?);
    }
    let k = labels.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        values[i * k + i] = 1.0;
        for j in i + 1..k {
            let c = pearson_pair(&columns[i], &columns[j]);
            values[i * k + j] = c;
            values[j * k + i] = c;
        }
    }
    Ok(CorrelationMatrix {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        values,
    })
}

/// Score one instance: registration metrics compare `warp(T, u)` against the
/// reference, segmentation metrics compare `theta` against the ground-truth
/// mask.
pub fn evaluate(
    template: &Image2D,
    reference: &Image2D,
    u: &DisplacementField,
    theta: &Image2D,
    g_mask: &Image2D,
) -> Result<MetricsRow> {
    let warped = warp_bilinear(template, u)?;
    let (f1, precision, recall) = f1_hard(theta, g_mask, 0.5)?;
    Ok(MetricsRow {
        ncc: ncc(&warped, reference)?,
        ssim: ssim(&warped, reference)?,
        psnr_db: psnr(&warped, reference)?,
        rel_ssd: rel_ssd(template, u, reference)?,
        ngf: ngf(&warped, reference, None)?,
        dice: dice_soft(theta, g_mask)?,
        f1,
        jaccard: jaccard_hard(theta, g_mask, 0.5)?,
        precision,
        recall,
    })
}
