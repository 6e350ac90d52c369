//! The joint segmentation/registration loss and its analytic gradients.
//!
//! The loss couples a segmentation map `theta` and a displacement field `u`
//! through five terms: a geodesic-weighted fidelity between `theta` and the
//! template, two region-statistics terms driving `theta` (one in template
//! space, one through the warp), a global squared-difference alignment term,
//! and a local alignment term on smoothed residuals. Integrals are realized
//! as per-pixel means so the fixed weights transfer across image sizes.
//!
//! Both optimization modes consume this module, so the gradients here are the
//! single source of truth; every path is validated against central finite
//! differences.

use crate::error::{Error, Result};
use crate::geodesic::MarkerSet;
use crate::image::{
    gaussian_smooth, gaussian_smooth_adjoint, warp_bilinear, warp_gradients, DisplacementField,
    Image2D,
};

/// Weights and auxiliary constants of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParams {
    /// Fidelity weight (geodesic term).
    pub mu: f64,
    /// Template-space segmentation prior weight.
    pub lambda1: f64,
    /// Warped segmentation prior weight.
    pub lambda2: f64,
    /// Global alignment weight.
    pub beta1: f64,
    /// Local (smoothed-residual) alignment weight.
    pub beta2: f64,
    /// Mean ROI intensity of the template.
    pub a1: f64,
    /// Mean background intensity of the template.
    pub a2: f64,
    /// Mean ROI intensity of the reference.
    pub c1: f64,
    /// Mean background intensity of the reference.
    pub c2: f64,
    /// Smoothing scale (pixels) for the local alignment term.
    pub sigma_s: f64,
    /// Smoothed-absolute-value constant in the fidelity term.
    pub eps_abs: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            mu: 30.0,
            lambda1: 2.0,
            lambda2: 0.1,
            beta1: 50.0,
            beta2: 50.0,
            a1: 1.0,
            a2: 0.0,
            c1: 1.0,
            c2: 0.0,
            sigma_s: 2.0,
            eps_abs: 1e-3,
        }
    }
}

/// Per-term values of one loss evaluation. `total` is always the sum of the
/// five terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub term_fidelity: f64,
    pub term_seg_t: f64,
    pub term_seg_r: f64,
    pub term_global: f64,
    pub term_local: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
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

/// Mean intensity within `radius` pixels of any marker, and of the complement.
/// Errors if the marker neighborhoods cover the whole image.
pub fn region_means(img: &Image2D, markers: &MarkerSet, radius: f64) -> Result<(f64, f64)> {
    markers.validate_for(img.width(), img.height())?;
    let r2 = radius * radius;
    let mut sum_in = 0.0;
    let mut n_in = 0usize;
    let mut sum_out = 0.0;
    let mut n_out = 0usize;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let near = markers.points().iter().any(|&(mx, my)| {
                let dx = x as f64 - mx as f64;
                let dy = y as f64 - my as f64;
                dx * dx + dy * dy <= r2
            });
            if near {
                sum_in += img.get(x, y);
                n_in += 1;
            } else {
                sum_out += img.get(x, y);
                n_out += 1;
            }
        }
    }
    if n_out == 0 {
        return Err(Error::invalid(
            "marker radius covers the whole image; background mean undefined",
        ));
    }
    Ok((sum_in / n_in as f64, sum_out / n_out as f64))
}

/// Region indicator `(f - a_in)^2 - (f - a_out)^2`, negative where `f` is
/// closer to the ROI mean than to the background mean.
pub fn phi(f: &Image2D, a_in: f64, a_out: f64) -> Image2D {
    f.map(|v| (v - a_in) * (v - a_in) - (v - a_out) * (v - a_out))
}

/// `mu * mean(D * sqrt((theta - T)^2 + eps^2))`.
pub fn term_fidelity(
    theta: &Image2D,
    template: &Image2D,
    d: &Image2D,
    mu: f64,
    eps_abs: f64,
) -> Result<f64> {
    check_same(theta, template)?;
    check_same(theta, d)?;
    let n = theta.len() as f64;
    let mut acc = 0.0;
    for i in 0..theta.len() {
        let r = theta.as_slice()[i] - template.as_slice()[i];
        acc += d.as_slice()[i] * (r * r + eps_abs * eps_abs).sqrt();
    }
    Ok(mu * acc / n)
}

/// `weight * mean(phi_map * field)`; used with `(lambda1, theta)` in template
/// space and `(lambda2, warp(theta, u))` in reference space.
pub fn term_seg(field: &Image2D, phi_map: &Image2D, weight: f64) -> Result<f64> {
    check_same(field, phi_map)?;
    let n = field.len() as f64;
    let acc: f64 = field
        .as_slice()
        .iter()
        .zip(phi_map.as_slice())
        .map(|(&f, &p)| f * p)
        .sum();
    Ok(weight * acc / n)
}

/// `beta1 * mean((warp(T, u) - R)^2)`.
pub fn term_global(
    template: &Image2D,
    u: &DisplacementField,
    reference: &Image2D,
    beta1: f64,
) -> Result<f64> {
    check_same(template, reference)?;
    let warped = warp_bilinear(template, u)?;
    let n = template.len() as f64;
    let acc: f64 = warped
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(&w, &r)| (w - r) * (w - r))
        .sum();
    Ok(beta1 * acc / n)
}

/// `beta2 * mean((Ts - T(x+u) - Rs + R)^2)` where `Ts` smooths the already
/// warped template and `Rs` smooths the reference.
pub fn term_local(
    template: &Image2D,
    u: &DisplacementField,
    reference: &Image2D,
    sigma_s: f64,
    beta2: f64,
) -> Result<f64> {
    check_same(template, reference)?;
    let warped = warp_bilinear(template, u)?;
    let ts = gaussian_smooth(&warped, sigma_s)?;
    let rs = gaussian_smooth(reference, sigma_s)?;
    let n = template.len() as f64;
    let mut acc = 0.0;
    for i in 0..template.len() {
        let g = ts.as_slice()[i] - warped.as_slice()[i] - rs.as_slice()[i]
            + reference.as_slice()[i];
        acc += g * g;
    }
    Ok(beta2 * acc / n)
}

/// Evaluate all five terms.
pub fn total_energy(
    theta: &Image2D,
    u: &DisplacementField,
    template: &Image2D,
    reference: &Image2D,
    d: &Image2D,
    params: &EnergyParams,
) -> Result<EnergyBreakdown> {
    check_same(theta, template)?;
    check_same(theta, reference)?;
    check_same(theta, d)?;
    let phi_t = phi(template, params.a1, params.a2);
    let phi_r = phi(reference, params.c1, params.c2);
    let warped_theta = warp_bilinear(theta, u)?;

    let term_fid = term_fidelity(theta, template, d, params.mu, params.eps_abs)?;
    let term_t = term_seg(theta, &phi_t, params.lambda1)?;
    let term_r = term_seg(&warped_theta, &phi_r, params.lambda2)?;
    let term_g = term_global(template, u, reference, params.beta1)?;
    let term_l = term_local(template, u, reference, params.sigma_s, params.beta2)?;
    Ok(EnergyBreakdown {
        term_fidelity: term_fid,
        term_seg_t: term_t,
        term_seg_r: term_r,
        term_global: term_g,
        term_local: term_l,
        total: term_fid + term_t + term_r + term_g + term_l,
    })
}

/// Derivative of [`total_energy`] with respect to `theta`.
pub fn grad_theta(
    theta: &Image2D,
    u: &DisplacementField,
    template: &Image2D,
    reference: &Image2D,
    d: &Image2D,
    params: &EnergyParams,
) -> Result<Image2D> {
    check_same(theta, template)?;
    check_same(theta, reference)?;
    check_same(theta, d)?;
    let n = theta.len() as f64;
    let phi_t = phi(template, params.a1, params.a2);
    let phi_r = phi(reference, params.c1, params.c2);

    // Reference-space prior flows back through the warp's adjoint.
    let upstream_r = phi_r.map(|v| params.lambda2 * v / n);
    let (d_theta_warp, _) = warp_gradients(theta, u, &upstream_r)?;

    let mut out = Image2D::zeros(theta.width(), theta.height());
    for i in 0..theta.len() {
        let r = theta.as_slice()[i] - template.as_slice()[i];
        let smooth_abs = (r * r + params.eps_abs * params.eps_abs).sqrt();
        let g_fid = params.mu * d.as_slice()[i] * r / smooth_abs / n;
        let g_seg_t = params.lambda1 * phi_t.as_slice()[i] / n;
        out.as_mut_slice()[i] = g_fid + g_seg_t + d_theta_warp.as_slice()[i];
    }
    Ok(out)
}

/// Derivative of [`total_energy`] with respect to the displacement field,
/// chaining through the bilinear warp for the three `u`-dependent terms. The
/// local term's smoothing operator enters through its exact adjoint.
pub fn grad_u(
    theta: &Image2D,
    u: &DisplacementField,
    template: &Image2D,
    reference: &Image2D,
    d: &Image2D,
    params: &EnergyParams,
) -> Result<DisplacementField> {
    check_same(theta, template)?;
    check_same(theta, reference)?;
    check_same(theta, d)?;
    let n = theta.len() as f64;
    let (w, h) = (theta.width(), theta.height());

    // theta(x+u) pathway.
    let phi_r = phi(reference, params.c1, params.c2);
    let upstream_r = phi_r.map(|v| params.lambda2 * v / n);
    let (_, du_seg) = warp_gradients(theta, u, &upstream_r)?;

    // Shared warped template for the global and local terms.
    let warped = warp_bilinear(template, u)?;
    let ts = gaussian_smooth(&warped, params.sigma_s)?;
    let rs = gaussian_smooth(reference, params.sigma_s)?;

    let mut residual5 = Image2D::zeros(w, h);
    for i in 0..theta.len() {
        residual5.as_mut_slice()[i] = ts.as_slice()[i] - warped.as_slice()[i]
            - rs.as_slice()[i]
            + reference.as_slice()[i];
    }
    let adj5 = gaussian_smooth_adjoint(&residual5, params.sigma_s)?;

    // d/dW of  beta1*mean((W-R)^2) + beta2*mean((GW - W - Rs + R)^2).
    let mut upstream_w = Image2D::zeros(w, h);
    for i in 0..theta.len() {
        let g_global =
            2.0 * params.beta1 * (warped.as_slice()[i] - reference.as_slice()[i]) / n;
        let g_local =
            2.0 * params.beta2 * (adj5.as_slice()[i] - residual5.as_slice()[i]) / n;
        upstream_w.as_mut_slice()[i] = g_global + g_local;
    }
    let (_, du_warp) = warp_gradients(template, u, &upstream_w)?;

    let mut out = DisplacementField::zeros(w, h);
    for i in 0..theta.len() {
        out.ux_mut()[i] = du_seg.ux()[i] + du_warp.ux()[i];
        out.uy_mut()[i] = du_seg.uy()[i] + du_warp.uy()[i];
    }
    Ok(out)
}
