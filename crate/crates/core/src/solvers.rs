//! Classical iterative reconstruction baselines.
//!
//! [`sart_reconstruct`] runs simultaneous algebraic reconstruction: per
//! view, the volume moves along the backprojected, ray-normalized
//! residual. [`asdpocs_reconstruct`] interleaves those data-consistency
//! sweeps with normalized total-variation descent, adapting the TV step so
//! the regularizer never overpowers the data update.
//!
//! Both solvers are deterministic: views are visited in ascending index
//! order, sweeps are sequential, and the projector contracts guarantee
//! bit-stable inner passes regardless of thread count.

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::objectives::tv3d_grad;
use crate::projector::{backproject_view, forward_project_view, MarchConfig};
use crate::volume::{ProjectionStack, Volume};

#[derive(Debug, Clone, Copy)]
pub struct SartConfig {
    /// Full sweeps over all views.
    pub n_iterations: usize,
    /// Update relaxation, in (0, 2].
    pub relaxation: f64,
    /// Clamp the volume to nonnegative values after each sweep.
    pub nonneg_clamp: bool,
    pub march: MarchConfig,
}

impl SartConfig {
    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        SartConfig {
            n_iterations: 20,
            relaxation: 1.0,
            nonneg_clamp: true,
            march: MarchConfig::for_geometry(geom),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.relaxation > 0.0 && self.relaxation <= 2.0) {
            return Err(Error::Config(format!(
                "relaxation must be in (0, 2], got {}",
                self.relaxation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AsdPocsConfig {
    pub sart: SartConfig,
    /// TV descent steps after each data sweep.
    pub n_tv_steps: usize,
    /// Initial TV step as a fraction of the data update magnitude.
    pub tv_step_init: f64,
    /// Multiplier shrinking the TV step when it moves too far, in (0, 1).
    pub alpha_reduction: f64,
    /// The TV move may be at most this multiple of the data move, in
    /// (0, 1].
    pub ratio_cap: f64,
}

impl AsdPocsConfig {
    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        AsdPocsConfig {
            sart: SartConfig::for_geometry(geom),
            n_tv_steps: 20,
            tv_step_init: 0.2,
            alpha_reduction: 0.95,
            ratio_cap: 0.95,
        }
    }

    fn validate(&self) -> Result<()> {
        self.sart.validate()?;
        if !(self.alpha_reduction > 0.0 && self.alpha_reduction < 1.0) {
            return Err(Error::Config(format!(
                "alpha reduction must be in (0, 1), got {}",
                self.alpha_reduction
            )));
        }
        if !(self.ratio_cap > 0.0 && self.ratio_cap <= 1.0) {
            return Err(Error::Config(format!(
                "ratio cap must be in (0, 1], got {}",
                self.ratio_cap
            )));
        }
        if !(self.tv_step_init > 0.0 && self.tv_step_init.is_finite()) {
            return Err(Error::Config(format!(
                "initial TV step must be positive, got {}",
                self.tv_step_init
            )));
        }
        Ok(())
    }
}

/// Per-view normalization weights: `ray` is 1 / (A_v 1) on the detector,
/// `vox` is 1 / (A_v^T 1) on the grid, both with zero rows guarded to 0.
struct ViewWeights {
    ray: Vec<f64>,
    vox: Vec<f64>,
}

pub(crate) fn check_stack(stack: &ProjectionStack, geom: &ConeBeamGeometry) -> Result<()> {
    if stack.n_views() != geom.n_views()
        || stack.rows != geom.detector_rows
        || stack.cols != geom.detector_cols
    {
        return Err(Error::Shape(format!(
            "stack {}x{}x{} does not match geometry {}x{}x{}",
            stack.n_views(),
            stack.rows,
            stack.cols,
            geom.n_views(),
            geom.detector_rows,
            geom.detector_cols
        )));
    }
    Ok(())
}

fn guarded_reciprocal(values: Vec<f64>) -> Vec<f64> {
    values
        .into_iter()
        .map(|v| if v > 1e-12 { 1.0 / v } else { 0.0 })
        .collect()
}

fn compute_weights(geom: &ConeBeamGeometry, march: &MarchConfig) -> Result<Vec<ViewWeights>> {
    let ones_vol = Volume::new(
        geom.volume_dims,
        geom.voxel_size,
        vec![1.0; geom.volume_dims.0 * geom.volume_dims.1 * geom.volume_dims.2],
    )?;
    let ones_pix = vec![1.0; geom.detector_rows * geom.detector_cols];
    (0..geom.n_views())
        .map(|v| {
            let ray = forward_project_view(&ones_vol, geom, v, march)?.data;
            let vox = backproject_view(geom, v, &ones_pix, march)?.into_data();
            Ok(ViewWeights {
                ray: guarded_reciprocal(ray),
                vox: guarded_reciprocal(vox),
            })
        })
        .collect()
}

/// One full pass over all views, in ascending order.
fn sart_sweep(
    x: &mut Volume,
    stack: &ProjectionStack,
    geom: &ConeBeamGeometry,
    weights: &[ViewWeights],
    cfg: &SartConfig,
) -> Result<()> {
    for v in 0..geom.n_views() {
        let projected = forward_project_view(x, geom, v, &cfg.march)?;
        let w = &weights[v];
        let residual: Vec<f64> = stack
            .view(v)
            .iter()
            .zip(&projected.data)
            .zip(&w.ray)
            .map(|((b, ax), wr)| (b - ax) * wr)
            .collect();
        let update = backproject_view(geom, v, &residual, &cfg.march)?;
        for ((xi, ui), wv) in x.data_mut().iter_mut().zip(update.data()).zip(&w.vox) {
            *xi += cfg.relaxation * ui * wv;
        }
    }
    if cfg.nonneg_clamp {
        x.clamp_nonneg();
    }
    Ok(())
}

/// SART from a caller-supplied starting volume.
pub fn sart_reconstruct_from(
    stack: &ProjectionStack,
    geom: &ConeBeamGeometry,
    cfg: &SartConfig,
    initial: Volume,
) -> Result<Volume> {
    cfg.validate()?;
    check_stack(stack, geom)?;
    if initial.dims() != geom.volume_dims {
        return Err(Error::Shape(format!(
            "initial volume {:?} does not match geometry grid {:?}",
            initial.dims(),
            geom.volume_dims
        )));
    }
    let weights = compute_weights(geom, &cfg.march)?;
    let mut x = initial;
    for _ in 0..cfg.n_iterations {
        sart_sweep(&mut x, stack, geom, &weights, cfg)?;
    }
    Ok(x)
}

/// SART from a zero volume.
pub fn sart_reconstruct(stack: &ProjectionStack, geom: &ConeBeamGeometry, cfg: &SartConfig) -> Result<Volume> {
    sart_reconstruct_from(stack, geom, cfg, Volume::zeros(geom.volume_dims, geom.voxel_size))
}

fn l2_distance(a: &Volume, b: &Volume) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Alternating data-consistency sweeps and adaptive TV descent.
pub fn asdpocs_reconstruct(stack: &ProjectionStack, geom: &ConeBeamGeometry, cfg: &AsdPocsConfig) -> Result<Volume> {
    cfg.validate()?;
    check_stack(stack, geom)?;
    let weights = compute_weights(geom, &cfg.sart.march)?;
    let mut x = Volume::zeros(geom.volume_dims, geom.voxel_size);
    let mut alpha = cfg.tv_step_init;
    for _ in 0..cfg.sart.n_iterations {
        let x_prev = x.clone();
        sart_sweep(&mut x, stack, geom, &weights, &cfg.sart)?;
        if cfg.n_tv_steps == 0 {
            continue;
        }
        let data_move = l2_distance(&x, &x_prev);
        if data_move == 0.0 {
            continue;
        }
        let x_data = x.clone();
        // the whole TV phase moves about alpha * data_move, spread over
        // the descent steps so it can follow the curved TV landscape
        let tv_step = alpha * data_move / cfg.n_tv_steps as f64;
        for _ in 0..cfg.n_tv_steps {
            let (_, grad) = tv3d_grad(&x);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                break;
            }
            let scale = tv_step / norm;
            for (xi, g) in x.data_mut().iter_mut().zip(&grad) {
                *xi -= scale * g;
            }
        }
        let tv_move = l2_distance(&x, &x_data);
        if tv_move > cfg.ratio_cap * data_move {
            alpha *= cfg.alpha_reduction;
        }
    }
    Ok(x)
}
