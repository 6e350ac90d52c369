//! Per-instance optimization loops.
//!
//! Two modes minimize the same loss: `direct` treats the segmentation map and
//! displacement field as free per-pixel variables, `dip` parameterizes them
//! by two small encoder-decoder networks optimized from scratch on the single
//! instance. Both run Adam, record the per-epoch loss breakdown, and emit a
//! full metric row at each checkpoint epoch.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{self, EnergyBreakdown, EnergyParams};
use crate::error::{Error, Result};
use crate::geodesic::MarkerSet;
use crate::image::{warp_bilinear, DisplacementField, Image2D, SliceStack};
use crate::metrics::{self, MetricsRow};
use crate::nnet::{build_pipeline, NetConfig, TensorMap, UNet};

/// Marker neighborhood radius (pixels) used to estimate region statistics.
pub const REGION_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Dip,
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub epochs: usize,
    /// Learning rate of the segmentation variables (network 1 in dip mode).
    pub lr1: f64,
    /// Learning rate of the deformation variables (network 2 in dip mode).
    pub lr2: f64,
    pub checkpoint_epochs: Vec<usize>,
    pub seed: u64,
    pub desk_scale: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Dip,
            epochs: 200,
            lr1: 0.001,
            lr2: 0.001,
            checkpoint_epochs: vec![50, 200],
            seed: 0,
            desk_scale: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.lr1 <= 0.0 || self.lr2 <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if let Some(&bad) = self
            .checkpoint_epochs
            .iter()
            .find(|&&e| e == 0 || e > self.epochs)
        {
            return Err(Error::invalid(format!(
                "checkpoint epoch {bad} outside 1..={}",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Metric row recorded at a checkpoint epoch. Segmentation entries are NaN
/// when no ground-truth mask is available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointRow {
    pub epoch: usize,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone)]
pub struct RunOutputs {
    /// Segmentation map in template geometry.
    pub theta_t: Image2D,
    /// Segmentation map carried into reference geometry: `warp(theta, u)`.
    pub theta_r: Image2D,
    pub u: DisplacementField,
    pub warped_t: Image2D,
    /// One loss breakdown per epoch.
    pub history: Vec<EnergyBreakdown>,
    pub checkpoints: Vec<CheckpointRow>,
}

/// Elementwise Adam state for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Errors on non-finite gradients.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Region statistics from the marker neighborhoods of both images.
pub fn params_from_markers(
    base: &EnergyParams,
    template: &Image2D,
    reference: &Image2D,
    markers: &MarkerSet,
) -> Result<EnergyParams> {
    let (a1, a2) = energy::region_means(template, markers, REGION_RADIUS)?;
    let (c1, c2) = energy::region_means(reference, markers, REGION_RADIUS)?;
    Ok(EnergyParams {
        a1,
        a2,
        c1,
        c2,
        ..*base
    })
}

/// Metric row tolerant of missing ground truth and of the degenerate
/// identical-pair baseline: unavailable entries become NaN.
pub fn checkpoint_metrics(
    template: &Image2D,
    reference: &Image2D,
    u: &DisplacementField,
    theta_r: &Image2D,
    ground_truth: Option<&Image2D>,
) -> Result<MetricsRow> {
    let warped = warp_bilinear(template, u)?;
    let rel = match metrics::rel_ssd(template, u, reference) {
        Ok(v) => v,
        Err(Error::DegenerateBaseline) => f64::NAN,
        Err(e) => return Err(e),
    };
    let (dice, f1, jaccard, precision, recall) = match ground_truth {
        Some(mask) => {
            let (f1, p, r) = metrics::f1_hard(theta_r, mask, 0.5)?;
            (
                metrics::dice_soft(theta_r, mask)?,
                f1,
                metrics::jaccard_hard(theta_r, mask, 0.5)?,
                p,
                r,
            )
        }
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(MetricsRow {
        ncc: metrics::ncc(&warped, reference)?,
        ssim: metrics::ssim(&warped, reference)?,
        psnr_db: metrics::psnr(&warped, reference)?,
        rel_ssd: rel,
        ngf: metrics::ngf(&warped, reference, None)?,
        dice,
        f1,
        jaccard,
        precision,
        recall,
    })
}

fn divergence_error(epoch: usize, breakdown: &EnergyBreakdown) -> Error {
    Error::NonFinite(format!(
        "total energy at epoch {epoch}: fidelity {:.3e}, seg_t {:.3e}, seg_r {:.3e}, \
         global {:.3e}, local {:.3e}",
        breakdown.term_fidelity,
        breakdown.term_seg_t,
        breakdown.term_seg_r,
        breakdown.term_global,
        breakdown.term_local
    ))
}

/// First-order descent directly on the fields. The segmentation map starts at
/// 0.5 and is clamped to [0, 1] after every step; the field starts at zero.
pub fn run_direct(
    template: &Image2D,
    reference: &Image2D,
    d: &Image2D,
    markers: &MarkerSet,
    params: &EnergyParams,
    cfg: &RunConfig,
    ground_truth: Option<&Image2D>,
) -> Result<RunOutputs> {
    cfg.validate()?;
    let params = params_from_markers(params, template, reference, markers)?;
    let (w, h) = (template.width(), template.height());

    let mut theta = Image2D::constant(w, h, 0.5);
    let mut u = DisplacementField::zeros(w, h);
    let mut theta_state = AdamState::new(w * h);
    let mut ux_state = AdamState::new(w * h);
    let mut uy_state = AdamState::new(w * h);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 1..=cfg.epochs {
        let g_theta = energy::grad_theta(&theta, &u, template, reference, d, &params)?;
        let g_u = energy::grad_u(&theta, &u, template, reference, d, &params)?;

        adam_step(theta.as_mut_slice(), g_theta.as_slice(), &mut theta_state, cfg.lr1)
            .map_err(|_| Error::NonFinite(format!("segmentation gradient at epoch {epoch}")))?;
        for v in theta.as_mut_slice() {
            *v = v.clamp(0.0, 1.0);
        }
        adam_step(u.ux_mut(), g_u.ux(), &mut ux_state, cfg.lr2)
            .map_err(|_| Error::NonFinite(format!("field gradient at epoch {epoch}")))?;
        adam_step(u.uy_mut(), g_u.uy(), &mut uy_state, cfg.lr2)
            .map_err(|_| Error::NonFinite(format!("field gradient at epoch {epoch}")))?;

        let breakdown = energy::total_energy(&theta, &u, template, reference, d, &params)?;
        if !breakdown.is_finite() {
            return Err(divergence_error(epoch, &breakdown));
        }
        history.push(breakdown);

        if cfg.checkpoint_epochs.contains(&epoch) {
            let theta_r = warp_bilinear(&theta, &u)?;
            checkpoints.push(CheckpointRow {
                epoch,
                metrics: checkpoint_metrics(template, reference, &u, &theta_r, ground_truth)?,
            });
        }
    }

    let theta_r = warp_bilinear(&theta, &u)?;
    let warped_t = warp_bilinear(template, &u)?;
    Ok(RunOutputs {
        theta_t: theta,
        theta_r,
        u,
        warped_t,
        history,
        checkpoints,
    })
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn field_from_tensor(t: &TensorMap) -> Result<DisplacementField> {
    DisplacementField::from_vecs(
        t.width,
        t.height,
        t.plane(0).into_vec(),
        t.plane(1).into_vec(),
    )
}

/// Deep-image-prior mode: one network generates the segmentation maps, a
/// second the displacement fields, and both are fit per instance by
/// backpropagating the loss gradients. Slices of a stack run as one batch so
/// normalization statistics couple them. Returns one output bundle per slice.
#[allow(clippy::too_many_arguments)]
pub fn run_dip(
    t_stack: &SliceStack,
    r_stack: &SliceStack,
    d_stack: &SliceStack,
    markers: &[MarkerSet],
    masks: Option<&SliceStack>,
    params_base: &EnergyParams,
    cfg: &RunConfig,
    netcfg: &NetConfig,
) -> Result<Vec<RunOutputs>> {
    cfg.validate()?;
    let n_slices = t_stack.len();
    if r_stack.len() != n_slices || d_stack.len() != n_slices || markers.len() != n_slices {
        return Err(Error::invalid("stack lengths must match"));
    }
    if let Some(m) = masks {
        if m.len() != n_slices {
            return Err(Error::invalid("mask count must match slice count"));
        }
    }
    let (w, h) = (t_stack.slices[0].width(), t_stack.slices[0].height());
    for img in t_stack
        .slices
        .iter()
        .chain(&r_stack.slices)
        .chain(&d_stack.slices)
    {
        if img.width() != w || img.height() != h {
            return Err(Error::DimensionMismatch {
                expected_w: w,
                expected_h: h,
                got_w: img.width(),
                got_h: img.height(),
            });
        }
    }

    let params: Vec<EnergyParams> = t_stack
        .slices
        .iter()
        .zip(&r_stack.slices)
        .zip(markers)
        .map(|((t, r), m)| params_from_markers(params_base, t, r, m))
        .collect::<Result<_>>()?;

    // Fixed per-run noise channel, one per slice.
    let noise: Vec<Image2D> = (0..n_slices)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xA0 + i as u64));
            Image2D::from_fn(w, h, |_, _| rng.random_range(0.0..1.0))
        })
        .collect();

    let (seg_spec, reg_spec) = build_pipeline(netcfg);
    let mut seg_net = UNet::init(&seg_spec, mix(cfg.seed, 1))?;
    let mut reg_net = UNet::init(&reg_spec, mix(cfg.seed, 2))?;
    let mut seg_state = AdamState::new(seg_net.num_params());
    let mut reg_state = AdamState::new(reg_net.num_params());

    let mut u_prev: Vec<DisplacementField> =
        (0..n_slices).map(|_| DisplacementField::zeros(w, h)).collect();
    let mut histories: Vec<Vec<EnergyBreakdown>> =
        (0..n_slices).map(|_| Vec::with_capacity(cfg.epochs)).collect();
    let mut checkpoints: Vec<Vec<CheckpointRow>> = (0..n_slices).map(|_| Vec::new()).collect();
    let mut final_theta: Vec<Image2D> = Vec::new();
    let mut final_u: Vec<DisplacementField> = Vec::new();

    for epoch in 1..=cfg.epochs {
        // Segmentation network.
        let seg_inputs: Vec<TensorMap> = t_stack
            .slices
            .iter()
            .zip(&r_stack.slices)
            .zip(&noise)
            .map(|((t, r), nz)| TensorMap::from_planes(&[t, r, nz]))
            .collect::<Result<_>>()?;
        let (seg_out, seg_cache) =
            seg_net.forward(&seg_inputs, true, mix(cfg.seed, 0x1000 + epoch as u64))?;
        let thetas: Vec<Image2D> = seg_out.iter().map(|t| t.plane(0)).collect();

        // Registration network sees the previous epoch's warp of the template.
        let reg_inputs: Vec<TensorMap> = (0..n_slices)
            .map(|i| {
                let warped_prev = warp_bilinear(&t_stack.slices[i], &u_prev[i])?;
                TensorMap::from_planes(&[
                    &thetas[i],
                    &warped_prev,
                    &r_stack.slices[i],
                    &noise[i],
                ])
            })
            .collect::<Result<_>>()?;
        let (reg_out, reg_cache) =
            reg_net.forward(&reg_inputs, true, mix(cfg.seed, 0x2000 + epoch as u64))?;
        let fields: Vec<DisplacementField> = reg_out
            .iter()
            .map(field_from_tensor)
            .collect::<Result<_>>()?;

        // Loss, per-slice records, and gradients at the current outputs.
        let mut d_theta_batch = Vec::with_capacity(n_slices);
        let mut d_field_batch = Vec::with_capacity(n_slices);
        for i in 0..n_slices {
            let breakdown = energy::total_energy(
                &thetas[i],
                &fields[i],
                &t_stack.slices[i],
                &r_stack.slices[i],
                &d_stack.slices[i],
                &params[i],
            )?;
            if !breakdown.is_finite() {
                return Err(divergence_error(epoch, &breakdown));
            }
            histories[i].push(breakdown);

            let g_theta = energy::grad_theta(
                &thetas[i],
                &fields[i],
                &t_stack.slices[i],
                &r_stack.slices[i],
                &d_stack.slices[i],
                &params[i],
            )?;
            let g_u = energy::grad_u(
                &thetas[i],
                &fields[i],
                &t_stack.slices[i],
                &r_stack.slices[i],
                &d_stack.slices[i],
                &params[i],
            )?;
            d_theta_batch.push(TensorMap::from_planes(&[&g_theta])?);
            let g_u_tensor = TensorMap::from_planes(&[
                &Image2D::from_vec(w, h, g_u.ux().to_vec())?,
                &Image2D::from_vec(w, h, g_u.uy().to_vec())?,
            ])?;
            d_field_batch.push(g_u_tensor);
        }

        let seg_grads = seg_net.backward(&seg_cache, &d_theta_batch)?.flat();
        let reg_grads = reg_net.backward(&reg_cache, &d_field_batch)?.flat();

        let mut seg_params = seg_net.flat_params();
        adam_step(&mut seg_params, &seg_grads, &mut seg_state, cfg.lr1)
            .map_err(|_| Error::NonFinite(format!("segmentation net gradient at epoch {epoch}")))?;
        seg_net.set_flat_params(&seg_params)?;

        let mut reg_params = reg_net.flat_params();
        adam_step(&mut reg_params, &reg_grads, &mut reg_state, cfg.lr2)
            .map_err(|_| Error::NonFinite(format!("registration net gradient at epoch {epoch}")))?;
        reg_net.set_flat_params(&reg_params)?;

        if cfg.checkpoint_epochs.contains(&epoch) {
            for i in 0..n_slices {
                let theta_r = warp_bilinear(&thetas[i], &fields[i])?;
                let mask = masks.map(|m| &m.slices[i]);
                checkpoints[i].push(CheckpointRow {
                    epoch,
                    metrics: checkpoint_metrics(
                        &t_stack.slices[i],
                        &r_stack.slices[i],
                        &fields[i],
                        &theta_r,
                        mask,
                    )?,
                });
            }
        }

        u_prev = fields.clone();
        if epoch == cfg.epochs {
            final_theta = thetas;
            final_u = fields;
        }
    }

    let mut outputs = Vec::with_capacity(n_slices);
    for i in 0..n_slices {
        let theta_r = warp_bilinear(&final_theta[i], &final_u[i])?;
        let warped_t = warp_bilinear(&t_stack.slices[i], &final_u[i])?;
        outputs.push(RunOutputs {
            theta_t: final_theta[i].clone(),
            theta_r,
            u: final_u[i].clone(),
            warped_t,
            history: histories[i].clone(),
            checkpoints: checkpoints[i].clone(),
        });
    }
    Ok(outputs)
}
