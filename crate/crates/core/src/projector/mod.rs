//! Forward models mapping volumetric content to detector images.
//!
//! Two projection routes share the cone-beam geometry. [`forward_project`]
//! marches rays through a voxel grid and pairs with [`backproject`] as its
//! exact adjoint; [`splat_project`] renders a Gaussian kernel cloud in
//! closed form with analytic parameter gradients. [`add_photon_noise`]
//! corrupts clean projections with a seeded photon-counting model.

mod march;
mod noise;
mod splat;

pub use march::{backproject, backproject_view, forward_project, forward_project_view};
pub use noise::add_photon_noise;
pub use splat::{
    splat_parallel_grad, splat_project, splat_project_parallel, splat_project_view,
    splat_view_grad, ParallelGeometry,
};

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;

/// How a marched ray reads values between voxel centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Sampling plan for ray marching.
#[derive(Debug, Clone, Copy)]
pub struct MarchConfig {
    /// Target distance between samples along a ray, in world units. The
    /// actual step never exceeds it: each ray divides its clipped span
    /// into equal steps of at most this length.
    pub step_length: f64,
    /// Upper bound on samples per ray, a guard against degenerate
    /// configurations asking for absurd sample counts.
    pub samples_per_ray_cap: usize,
    pub interpolation: Interpolation,
}

impl MarchConfig {
    pub fn new(step_length: f64, samples_per_ray_cap: usize, interpolation: Interpolation) -> Result<Self> {
        if !step_length.is_finite() || step_length <= 0.0 {
            return Err(Error::Config(format!(
                "step length must be positive, got {step_length}"
            )));
        }
        if samples_per_ray_cap < 2 {
            return Err(Error::Config(format!(
                "samples per ray cap must be at least 2, got {samples_per_ray_cap}"
            )));
        }
        Ok(MarchConfig {
            step_length,
            samples_per_ray_cap,
            interpolation,
        })
    }

    /// Half the smallest voxel edge, trilinear, generous sample cap.
    pub fn for_geometry(geom: &ConeBeamGeometry) -> Self {
        let min_sp = geom.voxel_size.0.min(geom.voxel_size.1).min(geom.voxel_size.2);
        MarchConfig {
            step_length: 0.5 * min_sp,
            samples_per_ray_cap: 4096,
            interpolation: Interpolation::Trilinear,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_angles;

    #[test]
    fn default_step_is_half_the_smallest_voxel() {
        let geom = ConeBeamGeometry::standard(
            (32, 32, 16),
            (1.0, 0.5, 2.0),
            uniform_angles(4, std::f64::consts::TAU).unwrap(),
        )
        .unwrap();
        let cfg = MarchConfig::for_geometry(&geom);
        assert_eq!(cfg.step_length, 0.25);
        assert_eq!(cfg.samples_per_ray_cap, 4096);
        assert_eq!(cfg.interpolation, Interpolation::Trilinear);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(MarchConfig::new(0.0, 100, Interpolation::Trilinear).is_err());
        assert!(MarchConfig::new(-1.0, 100, Interpolation::Nearest).is_err());
        assert!(MarchConfig::new(f64::NAN, 100, Interpolation::Trilinear).is_err());
        assert!(MarchConfig::new(0.5, 1, Interpolation::Trilinear).is_err());
        assert!(MarchConfig::new(0.5, 2, Interpolation::Trilinear).is_ok());
    }
}
