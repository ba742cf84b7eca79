//! Trainable volume parameterizations: a dense voxel grid and a Gaussian
//! kernel mixture, behind one [`Representation`] interface so the
//! reconstruction loop does not care which it is driving. Gradients for the
//! grid come from the exact projector adjoint; the mixture carries analytic
//! gradients for every kernel parameter.

pub mod covariance;
mod query;

pub use query::{query_cloud, query_cloud_region, query_cloud_region_grad};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::formats::KernelRecord;
use crate::geometry::ConeBeamGeometry;
use crate::projector::{
    backproject_view, forward_project_view, splat_project_view, splat_view_grad, MarchConfig,
};
use crate::volume::{Image, Volume};
use covariance::KernelShape;

/// Kernels are evaluated out to this Mahalanobis radius and dropped beyond
/// it. The discarded tail is exp(-12.5) ~ 3.7e-6 of the peak, which keeps
/// truncated projections pixelwise within 1e-3 of untruncated line
/// integrals even where several kernel tails overlap; a 3 sigma cut (tail
/// 1.1e-2) would not.
pub const TRUNCATION_RADIUS: f64 = 5.0;

// ---------------------------------------------------------------------------
// optimizer

/// Plain Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `label` names the parameter block in error messages.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], label: &str) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {label}[{i}]: {g}"
                )));
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gaussian cloud

/// Mixture of anisotropic Gaussian kernels. Covariances are stored as
/// log-scales plus a rotation quaternion (see [`covariance`]); densities are
/// clamped to zero at query/render time but stay unclamped as parameters so
/// optimization remains smooth.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub densities: Vec<f64>,
    /// Kernel centers, world mm.
    pub positions: Vec<[f64; 3]>,
    /// ln of per-axis standard deviations, mm.
    pub log_scales: Vec<[f64; 3]>,
    /// Unit quaternions, w first.
    pub rotations: Vec<[f64; 4]>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.densities.len();
        if self.positions.len() != n || self.log_scales.len() != n || self.rotations.len() != n {
            return Err(Error::Shape(format!(
                "cloud arrays disagree: {} densities, {} positions, {} scales, {} rotations",
                n,
                self.positions.len(),
                self.log_scales.len(),
                self.rotations.len()
            )));
        }
        Ok(())
    }

    /// Assembled covariance of kernel `i`.
    pub fn shape(&self, i: usize) -> Result<KernelShape> {
        covariance::build_shape(self.log_scales[i], self.rotations[i], i)
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            covariance::renormalize_quat(q);
        }
    }

    pub fn to_records(&self) -> Vec<KernelRecord> {
        (0..self.len())
            .map(|i| KernelRecord {
                density: self.densities[i],
                position: self.positions[i],
                log_scales: self.log_scales[i],
                rotation: self.rotations[i],
            })
            .collect()
    }

    pub fn from_records(records: &[KernelRecord]) -> Self {
        Self {
            densities: records.iter().map(|r| r.density).collect(),
            positions: records.iter().map(|r| r.position).collect(),
            log_scales: records.iter().map(|r| r.log_scales).collect(),
            rotations: records.iter().map(|r| r.rotation).collect(),
        }
    }
}

/// Per-parameter gradient buffers shaped like a [`GaussianCloud`].
#[derive(Debug, Clone)]
pub struct CloudGrads {
    pub densities: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            densities: vec![0.0; n],
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
        }
    }

    pub fn clear(&mut self) {
        self.densities.fill(0.0);
        self.positions.fill([0.0; 3]);
        self.log_scales.fill([0.0; 3]);
        self.rotations.fill([0.0; 4]);
    }
}

/// Adam step sizes per kernel parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudLearningRates {
    pub density: f64,
    /// mm per step scale; positions live in world units.
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
}

impl Default for CloudLearningRates {
    fn default() -> Self {
        Self {
            density: 0.01,
            position: 0.05,
            log_scale: 0.005,
            rotation: 0.001,
        }
    }
}

// ---------------------------------------------------------------------------
// shared training interface

/// What the reconstruction loop needs from a volume parameterization:
/// render one view, evaluate the density on (a region of) the scan grid,
/// push gradients back through both paths, and take an optimizer step on
/// whatever was accumulated.
pub trait Representation {
    fn render_view(&self, geom: &ConeBeamGeometry, view: usize) -> Result<Image>;

    /// Density on a sub-box of the scan grid (`full_dims` voxels of
    /// `spacing` mm centered on the origin).
    fn query_region(
        &self,
        full_dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
    ) -> Result<Volume>;

    fn query(&self, dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Volume> {
        self.query_region(dims, spacing, (0, 0, 0), dims)
    }

    /// Accumulates d(loss)/d(params) given d(loss)/d(rendered pixel).
    fn grad_render_view(
        &mut self,
        geom: &ConeBeamGeometry,
        view: usize,
        upstream: &Image,
    ) -> Result<()>;

    /// Accumulates d(loss)/d(params) given d(loss)/d(queried voxel).
    fn grad_query_region(
        &mut self,
        full_dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
        upstream: &[f64],
    ) -> Result<()>;

    /// Applies the accumulated gradients and clears them.
    fn apply_step(&mut self) -> Result<()>;

    fn n_params(&self) -> usize;
}

// ---------------------------------------------------------------------------
// voxel field

/// Dense trainable density grid rendered with the ray-marching projector.
/// Stands in for a coordinate-network field: the training loop only ever
/// calls render/query/gradient, and a grid provides those with exact
/// adjoint gradients and no network machinery.
pub struct VoxelField {
    grid: Volume,
    grad: Vec<f64>,
    adam: AdamState,
    march: MarchConfig,
}

impl VoxelField {
    pub fn new(initial: Volume, march: MarchConfig, lr: f64) -> Self {
        let n = initial.len();
        Self {
            grid: initial,
            grad: vec![0.0; n],
            adam: AdamState::new(n, lr),
            march,
        }
    }

    pub fn grid(&self) -> &Volume {
        &self.grid
    }

    pub fn into_grid(self) -> Volume {
        self.grid
    }

    fn expect_native(&self, full_dims: (usize, usize, usize)) -> Result<()> {
        if full_dims != self.grid.dims() {
            return Err(Error::Shape(format!(
                "voxel field is {:?}, queried as {:?}",
                self.grid.dims(),
                full_dims
            )));
        }
        Ok(())
    }
}

impl Representation for VoxelField {
    fn render_view(&self, geom: &ConeBeamGeometry, view: usize) -> Result<Image> {
        forward_project_view(&self.grid, geom, view, &self.march)
    }

    fn query_region(
        &self,
        full_dims: (usize, usize, usize),
        _spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
    ) -> Result<Volume> {
        if full_dims != self.grid.dims() {
            // whole-volume resample is supported; partial off-grid regions
            // are not
            if offset == (0, 0, 0) && dims == full_dims {
                return self.grid.resample_trilinear(dims);
            }
            return Err(Error::Shape(format!(
                "voxel field is {:?}, region queried on a {:?} grid",
                self.grid.dims(),
                full_dims
            )));
        }
        let mut out = Volume::zeros(dims, self.grid.spacing());
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    out.set(x, y, z, self.grid.at(x + offset.0, y + offset.1, z + offset.2));
                }
            }
        }
        Ok(out)
    }

    fn grad_render_view(
        &mut self,
        geom: &ConeBeamGeometry,
        view: usize,
        upstream: &Image,
    ) -> Result<()> {
        let g = backproject_view(geom, view, &upstream.data, &self.march)?;
        for (acc, v) in self.grad.iter_mut().zip(g.data()) {
            *acc += v;
        }
        Ok(())
    }

    fn grad_query_region(
        &mut self,
        full_dims: (usize, usize, usize),
        _spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
        upstream: &[f64],
    ) -> Result<()> {
        self.expect_native(full_dims)?;
        assert_eq!(upstream.len(), dims.0 * dims.1 * dims.2);
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let i = self
                        .grid
                        .index(x + offset.0, y + offset.1, z + offset.2);
                    self.grad[i] += upstream[(z * dims.1 + y) * dims.0 + x];
                }
            }
        }
        Ok(())
    }

    fn apply_step(&mut self) -> Result<()> {
        self.adam
            .step(self.grid.data_mut(), &self.grad, "voxel grid")?;
        self.grad.fill(0.0);
        Ok(())
    }

    fn n_params(&self) -> usize {
        self.grid.len()
    }
}

// ---------------------------------------------------------------------------
// trainable cloud

/// A [`GaussianCloud`] bundled with gradient buffers and per-block Adam
/// states. Quaternions are renormalized after every step, so unit norm is
/// an invariant between steps.
pub struct TrainableCloud {
    pub cloud: GaussianCloud,
    grads: CloudGrads,
    adam_density: AdamState,
    adam_position: AdamState,
    adam_log_scale: AdamState,
    adam_rotation: AdamState,
}

impl TrainableCloud {
    pub fn new(cloud: GaussianCloud, lrs: CloudLearningRates) -> Result<Self> {
        cloud.validate()?;
        let m = cloud.len();
        Ok(Self {
            grads: CloudGrads::zeros(m),
            adam_density: AdamState::new(m, lrs.density),
            adam_position: AdamState::new(3 * m, lrs.position),
            adam_log_scale: AdamState::new(3 * m, lrs.log_scale),
            adam_rotation: AdamState::new(4 * m, lrs.rotation),
            cloud,
        })
    }
}

impl Representation for TrainableCloud {
    fn render_view(&self, geom: &ConeBeamGeometry, view: usize) -> Result<Image> {
        splat_project_view(&self.cloud, geom, view)
    }

    fn query_region(
        &self,
        full_dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
    ) -> Result<Volume> {
        query_cloud_region(&self.cloud, full_dims, spacing, offset, dims)
    }

    fn grad_render_view(
        &mut self,
        geom: &ConeBeamGeometry,
        view: usize,
        upstream: &Image,
    ) -> Result<()> {
        splat_view_grad(&self.cloud, geom, view, upstream, &mut self.grads)
    }

    fn grad_query_region(
        &mut self,
        full_dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        offset: (usize, usize, usize),
        dims: (usize, usize, usize),
        upstream: &[f64],
    ) -> Result<()> {
        query_cloud_region_grad(
            &self.cloud,
            full_dims,
            spacing,
            offset,
            dims,
            upstream,
            &mut self.grads,
        )
    }

    fn apply_step(&mut self) -> Result<()> {
        self.adam_density.step(
            &mut self.cloud.densities,
            &self.grads.densities,
            "kernel density",
        )?;
        self.adam_position.step(
            self.cloud.positions.as_flattened_mut(),
            self.grads.positions.as_flattened(),
            "kernel position",
        )?;
        self.adam_log_scale.step(
            self.cloud.log_scales.as_flattened_mut(),
            self.grads.log_scales.as_flattened(),
            "kernel log-scale",
        )?;
        self.adam_rotation.step(
            self.cloud.rotations.as_flattened_mut(),
            self.grads.rotations.as_flattened(),
            "kernel rotation",
        )?;
        self.cloud.renormalize_rotations();
        self.grads.clear();
        Ok(())
    }

    fn n_params(&self) -> usize {
        11 * self.cloud.len()
    }
}

// ---------------------------------------------------------------------------
// initialization

/// Default kernel budget for a cloud covering `dims` voxels: one kernel
/// per 512-voxel block, floored at 2000 so small volumes still get enough
/// kernels to resolve structure.
pub fn default_kernel_count(dims: (usize, usize, usize)) -> usize {
    (dims.0 * dims.1 * dims.2 / 512).max(2000)
}

/// Seeds a cloud from a coarse reconstruction: centers drawn with
/// probability proportional to density (uniform if the volume is all
/// zeros), densities taken from the sampled voxel (floored slightly above
/// zero so no kernel starts gated off), isotropic scales set to the mean
/// distance to the three nearest sibling centers.
pub fn init_cloud_from_volume(coarse: &Volume, m: usize, seed: u64) -> Result<GaussianCloud> {
    if m == 0 {
        return Err(Error::Config("kernel count must be >= 1".into()));
    }
    let weights: Vec<f64> = coarse.data().iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let uniform = total <= 0.0;

    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in &weights {
        acc += if uniform { 1.0 } else { w };
        cum.push(acc);
    }
    let total = acc;

    let (nx, ny, _) = coarse.dims();
    let sp = coarse.spacing();
    let positives: Vec<f64> = coarse.data().iter().cloned().filter(|&v| v > 0.0).collect();
    let mean_positive = if positives.is_empty() {
        1.0
    } else {
        positives.iter().sum::<f64>() / positives.len() as f64
    };
    let density_floor = 0.01 * mean_positive;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(m);
    let mut densities = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.gen::<f64>() * total;
        let idx = cum.partition_point(|&c| c < u).min(cum.len() - 1);
        let x = idx % nx;
        let y = (idx / nx) % ny;
        let z = idx / (nx * ny);
        let c = coarse.voxel_center(x, y, z);
        // jitter keeps coincident draws from producing duplicate centers
        positions.push([
            c[0] + rng.gen_range(-0.5..0.5) * sp.0,
            c[1] + rng.gen_range(-0.5..0.5) * sp.1,
            c[2] + rng.gen_range(-0.5..0.5) * sp.2,
        ]);
        densities.push(coarse.data()[idx].max(density_floor));
    }

    let mean_spacing = (sp.0 + sp.1 + sp.2) / 3.0;
    let scale_floor = 0.25 * sp.0.min(sp.1).min(sp.2);
    let log_scales: Vec<[f64; 3]> = (0..m)
        .map(|i| {
            let s = if m == 1 {
                mean_spacing
            } else {
                mean_distance_to_3_nearest(&positions, i).max(scale_floor)
            };
            [s.ln(); 3]
        })
        .collect();

    Ok(GaussianCloud {
        densities,
        positions,
        log_scales,
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; m],
    })
}

fn mean_distance_to_3_nearest(positions: &[[f64; 3]], i: usize) -> f64 {
    let p = positions[i];
    let mut best = [f64::INFINITY; 3];
    for (j, q) in positions.iter().enumerate() {
        if j == i {
            continue;
        }
        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if d2 < best[2] {
            best[2] = d2;
            if best[2] < best[1] {
                best.swap(1, 2);
            }
            if best[1] < best[0] {
                best.swap(0, 1);
            }
        }
    }
    let k = best.iter().filter(|d| d.is_finite()).count();
    best.iter()
        .take(k)
        .map(|d2| d2.sqrt())
        .sum::<f64>()
        / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut adam = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3], "t").unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // bias correction makes m_hat = g and v_hat = g^2 on step one
        let mut adam = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[3.0, -0.5], "t").unwrap();
        assert_relative_eq!(p[0], -0.1, epsilon = 1e-8);
        assert_relative_eq!(p[1], 0.1, epsilon = 1e-7);
    }

    #[test]
    fn adam_converges_on_parabola() {
        let mut adam = AdamState::new(1, 0.1);
        let mut x = vec![1.0];
        for _ in 0..100 {
            let g = vec![2.0 * x[0]];
            adam.step(&mut x, &g, "x").unwrap();
        }
        assert!(x[0].abs() < 0.05, "x = {}", x[0]);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_label() {
        let mut adam = AdamState::new(2, 0.1);
        let mut p = vec![0.0, 0.0];
        let err = adam.step(&mut p, &[0.0, f64::NAN], "kernel density").unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("kernel density[1]"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_hot_volume_pins_all_centers() {
        let mut v = Volume::zeros((8, 8, 8), (1.0, 1.0, 1.0));
        v.set(2, 3, 4, 5.0);
        let cloud = init_cloud_from_volume(&v, 50, 1).unwrap();
        let c = v.voxel_center(2, 3, 4);
        for p in &cloud.positions {
            for a in 0..3 {
                assert!((p[a] - c[a]).abs() <= 0.5, "center {p:?} outside voxel");
            }
        }
        for &d in &cloud.densities {
            assert_eq!(d, 5.0);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let v = Volume::new(
            (6, 6, 6),
            (1.0, 1.0, 1.0),
            (0..216).map(|i| (i % 7) as f64).collect(),
        )
        .unwrap();
        let a = init_cloud_from_volume(&v, 100, 42).unwrap();
        let b = init_cloud_from_volume(&v, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = init_cloud_from_volume(&v, 100, 43).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn uniform_volume_samples_uniformly() {
        let v = Volume::new((16, 16, 16), (1.0, 1.0, 1.0), vec![1.0; 4096]).unwrap();
        let m = 10_000;
        let cloud = init_cloud_from_volume(&v, m, 7).unwrap();
        // 4x4x4 spatial bins, chi-squared uniformity at p > 0.01
        let mut bins = [0usize; 64];
        for p in &cloud.positions {
            let bx = (((p[0] + 8.0) / 4.0) as usize).min(3);
            let by = (((p[1] + 8.0) / 4.0) as usize).min(3);
            let bz = (((p[2] + 8.0) / 4.0) as usize).min(3);
            bins[(bz * 4 + by) * 4 + bx] += 1;
        }
        let expected = m as f64 / 64.0;
        let stat: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let critical = ChiSquared::new(63.0).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "chi2 {stat} >= {critical}");
    }

    #[test]
    fn all_zero_volume_falls_back_to_uniform() {
        let v = Volume::zeros((8, 8, 8), (1.0, 1.0, 1.0));
        let cloud = init_cloud_from_volume(&v, 500, 3).unwrap();
        // spread across all octants rather than collapsed anywhere
        let mut octants = [0usize; 8];
        for p in &cloud.positions {
            let i = (p[0] > 0.0) as usize + 2 * ((p[1] > 0.0) as usize) + 4 * ((p[2] > 0.0) as usize);
            octants[i] += 1;
        }
        for (i, &count) in octants.iter().enumerate() {
            assert!(count > 20, "octant {i} nearly empty: {count}");
        }
        // trainable despite the zero source volume
        assert!(cloud.densities.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn nearest_neighbor_scales_track_spacing() {
        // two tight clusters far apart: within-cluster spacing dominates
        let positions = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [100.0, 0.0, 0.0],
            [101.0, 0.0, 0.0],
            [100.0, 1.0, 0.0],
            [100.0, 0.0, 1.0],
        ];
        let d = mean_distance_to_3_nearest(&positions, 0);
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
    }
}
