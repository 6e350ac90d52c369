//! Synthetic slice pairs with known deformation and tumor mask.
//!
//! The generator builds a sharper, higher-contrast reference image (smooth
//! background, a soft-edged elliptical body, a bright tumor disc) and derives
//! the template from it by warping with a known smooth field, adjusting
//! contrast, blurring, and adding noise. Every end-to-end claim in this crate
//! is tested against these instances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{gaussian_smooth, warp_bilinear, DisplacementField, Image2D};
use crate::preprocess::normalize_minmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TumorSpec {
    pub center: (f64, f64),
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomConfig {
    pub size: usize,
    pub tumor: TumorSpec,
    /// Peak displacement magnitude of the hidden field, in pixels.
    pub deform_amp: f64,
    /// Standard deviation of the additive Gaussian noise on the template.
    pub noise_sigma: f64,
    /// Gamma applied to the template intensities.
    pub contrast_gamma: f64,
}

#[derive(Debug, Clone)]
pub struct PhantomInstance {
    /// Sharper, contrastier image defining the target geometry.
    pub reference: Image2D,
    /// Degraded, warped partner to be registered onto the reference.
    pub template: Image2D,
    /// Field used to derive the template: `template ~ degrade(R(x + u_true))`.
    pub u_true: DisplacementField,
    /// Binary tumor mask in reference geometry.
    pub mask_true: Image2D,
    pub seed: u64,
}

impl PhantomInstance {
    /// Tumor mask carried into template geometry by the hidden field.
    pub fn template_mask(&self) -> Image2D {
        let warped = warp_bilinear(&self.mask_true, &self.u_true).expect("dims match");
        warped.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Centroid of the template-space tumor, as an integer marker point.
    pub fn marker_point(&self) -> (usize, usize) {
        let mask = self.template_mask();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0.0;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y) >= 0.5 {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        if n == 0.0 {
            (mask.width() / 2, mask.height() / 2)
        } else {
            ((sx / n).round() as usize, (sy / n).round() as usize)
        }
    }
}

/// Per-channel white noise smoothed at `scale_px` and rescaled so the peak
/// magnitude is exactly `amplitude_px`. Zero amplitude gives the zero field.
pub fn smooth_random_field(
    seed: u64,
    width: usize,
    height: usize,
    amplitude_px: f64,
    scale_px: f64,
) -> Result<DisplacementField> {
    if amplitude_px < 0.0 {
        return Err(Error::invalid("amplitude must be non-negative"));
    }
    if scale_px <= 0.0 {
        return Err(Error::invalid("scale must be positive"));
    }
    if amplitude_px == 0.0 {
        return Ok(DisplacementField::zeros(width, height));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_plane = |rng: &mut ChaCha8Rng| {
        Image2D::from_fn(width, height, |_, _| rng.random_range(-1.0..1.0))
    };
    let nx = gaussian_smooth(&noise_plane(&mut rng), scale_px)?;
    let ny = gaussian_smooth(&noise_plane(&mut rng), scale_px)?;
    let max_mag = nx
        .as_slice()
        .iter()
        .zip(ny.as_slice())
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    if max_mag == 0.0 {
        return Ok(DisplacementField::zeros(width, height));
    }
    let scale = amplitude_px / max_mag;
    DisplacementField::from_vecs(
        width,
        height,
        nx.as_slice().iter().map(|&v| v * scale).collect(),
        ny.as_slice().iter().map(|&v| v * scale).collect(),
    )
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard-normal sample via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Build a paired instance. The reference holds the clean geometry; the
/// template is its warped, gamma-shifted, blurred, noisy counterpart.
pub fn make_phantom(seed: u64, cfg: &PhantomConfig) -> Result<PhantomInstance> {
    let n = cfg.size;
    let (cx, cy) = cfg.tumor.center;
    let r = cfg.tumor.radius;
    if cx - r < 0.0 || cy - r < 0.0 || cx + r >= n as f64 || cy + r >= n as f64 {
        return Err(Error::invalid("tumor extends outside the image"));
    }
    if cfg.deform_amp < 0.0 || cfg.noise_sigma < 0.0 || cfg.contrast_gamma <= 0.0 {
        return Err(Error::invalid("phantom parameters must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Low-frequency background in [0.15, 0.30].
    let raw = Image2D::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
    let bg = normalize_minmax(&gaussian_smooth(&raw, n as f64 / 8.0)?);

    // Soft elliptical body and soft tumor disc.
    let (ex, ey) = (n as f64 / 2.0, n as f64 / 2.0);
    let (ax, ay) = (0.38 * n as f64, 0.30 * n as f64);
    let reference = Image2D::from_fn(n, n, |x, y| {
        let base = 0.15 + 0.15 * bg.get(x, y);
        let ell = ((x as f64 - ex) / ax).powi(2) + ((y as f64 - ey) / ay).powi(2);
        let body = base + 0.12 * logistic((1.0 - ell) / 0.1);
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let p = logistic(r - d);
        (body * (1.0 - p) + cfg.tumor.intensity * p).clamp(0.0, 1.0)
    });

    let mask_true = Image2D::from_fn(n, n, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        if d <= r {
            1.0
        } else {
            0.0
        }
    });

    let field_seed = rng.random::<u64>();
    let u_true = smooth_random_field(field_seed, n, n, cfg.deform_amp, n as f64 / 8.0)?;

    let warped = warp_bilinear(&reference, &u_true)?;
    let gamma_adjusted = warped.map(|v| v.max(0.0).powf(cfg.contrast_gamma));
    let blurred = gaussian_smooth(&gamma_adjusted, 0.8)?;
    let noisy = if cfg.noise_sigma > 0.0 {
        blurred.map(|v| v + cfg.noise_sigma * normal(&mut rng))
    } else {
        blurred
    };
    // Clamp rather than min-max stretch: keeps the template on the reference
    // intensity scale so the degradation stays local.
    let template = noisy.map(|v| v.clamp(0.0, 1.0));

    Ok(PhantomInstance {
        reference,
        template,
        u_true,
        mask_true,
        seed,
    })
}

/// The standard desk-scale configuration: 64x64, radius-8 tumor whose center
/// jitters with the seed, 3 px peak deformation, 2% noise, mild gamma shift.
pub fn desk_config(seed: u64) -> PhantomConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let jx = rng.random_range(-6.0..6.0);
    let jy = rng.random_range(-6.0..6.0);
    PhantomConfig {
        size: 64,
        tumor: TumorSpec {
            center: (32.0 + jx, 32.0 + jy),
            radius: 8.0,
            intensity: 0.9,
        },
        deform_amp: 3.0,
        noise_sigma: 0.02,
        contrast_gamma: 1.15,
    }
}

/// Standard desk-scale instance used by the end-to-end suites.
pub fn desk_instance(seed: u64) -> PhantomInstance {
    make_phantom(seed, &desk_config(seed)).expect("desk config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    #[test]
    fn zero_amplitude_gives_zero_field() {
        let u = smooth_random_field(1, 16, 16, 0.0, 4.0).unwrap();
        assert_eq!(u.max_magnitude(), 0.0);
    }

    #[test]
    fn field_is_deterministic() {
        let a = smooth_random_field(7, 24, 24, 3.0, 6.0).unwrap();
        let b = smooth_random_field(7, 24, 24, 3.0, 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn field_peak_magnitude_matches_amplitude() {
        for seed in [1u64, 2, 3] {
            let u = smooth_random_field(seed, 32, 32, 3.0, 8.0).unwrap();
            assert!((u.max_magnitude() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = desk_instance(5);
        let b = desk_instance(5);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.template, b.template);
        assert_eq!(a.u_true, b.u_true);
        assert_eq!(a.mask_true, b.mask_true);
    }

    #[test]
    fn mask_area_close_to_disc_area() {
        for seed in 0..5u64 {
            let inst = desk_instance(seed);
            let count: f64 = inst.mask_true.as_slice().iter().sum();
            let expect = std::f64::consts::PI * 8.0 * 8.0;
            assert!(
                (count - expect).abs() / expect < 0.05,
                "seed {seed}: {count} vs {expect}"
            );
        }
    }

    #[test]
    fn degenerate_generator_is_blur_only() {
        let cfg = PhantomConfig {
            size: 64,
            tumor: TumorSpec {
                center: (32.0, 32.0),
                radius: 8.0,
                intensity: 0.9,
            },
            deform_amp: 0.0,
            noise_sigma: 0.0,
            contrast_gamma: 1.0,
        };
        let inst = make_phantom(3, &cfg).unwrap();
        assert_eq!(inst.u_true.max_magnitude(), 0.0);
        let mse: f64 = inst
            .template
            .as_slice()
            .iter()
            .zip(inst.reference.as_slice())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / inst.template.len() as f64;
        assert!(mse > 0.0, "blur must leave a residual");
        assert!(mse < 0.01, "blur-only residual should be small: {mse}");
    }

    #[test]
    fn replay_oracle_prefers_true_warp() {
        // warp(R, u_true) reproduces the denoised template better than the
        // unwarped reference reproduces the actual template.
        let seed = 9;
        let noisy = desk_instance(seed);
        let mut cfg = desk_config(seed);
        cfg.noise_sigma = 0.0;
        let clean = make_phantom(seed, &cfg).unwrap();
        assert_eq!(noisy.u_true, clean.u_true);
        let replay = warp_bilinear(&clean.reference, &clean.u_true).unwrap();
        let psnr_replay = psnr(&replay, &clean.template).unwrap();
        let psnr_unwarped = psnr(&noisy.reference, &noisy.template).unwrap();
        assert!(
            psnr_replay > psnr_unwarped,
            "{psnr_replay} vs {psnr_unwarped}"
        );
    }

    #[test]
    fn rejects_out_of_bounds_tumor() {
        let cfg = PhantomConfig {
            size: 32,
            tumor: TumorSpec {
                center: (30.0, 16.0),
                radius: 8.0,
                intensity: 0.9,
            },
            deform_amp: 1.0,
            noise_sigma: 0.0,
            contrast_gamma: 1.0,
        };
        assert!(make_phantom(0, &cfg).is_err());
    }

    #[test]
    fn marker_point_lands_on_template_tumor() {
        let inst = desk_instance(2);
        let (mx, my) = inst.marker_point();
        assert_eq!(inst.template_mask().get(mx, my), 1.0);
    }
}
