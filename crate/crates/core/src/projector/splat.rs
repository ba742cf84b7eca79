//! Closed-form projection of Gaussian kernel clouds.
//!
//! Each kernel projects to an anisotropic 2D Gaussian footprint on the
//! detector. The footprint covariance is J Sigma J^T, where J is the
//! jacobian of detector coordinates with respect to world position at the
//! kernel center, and the amplitude is the exact line integral through the
//! center along the viewing direction, rho * sqrt(2 pi / d^T Sigma^-1 d).
//! Under parallel projection this footprint is the exact marginal of the
//! kernel, so a quadrature oracle over rays can pin the whole pipeline
//! down; the cone-beam version replaces the projection by its first-order
//! expansion at the center, which is the usual splatting approximation.
//!
//! Footprints are rasterized over an analytically bounded pixel box with
//! the same row-recurrence trick the voxel query uses: one exp per kernel
//! row start plus one constant ratio, instead of one exp per pixel.
//!
//! Rendering loops kernels in index order within a view and parallelizes
//! over views; gradients parallelize over kernels, each of which owns its
//! output slot. Both are bit-deterministic for any thread count.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::representations::covariance::{self, KernelShape};
use crate::representations::{CloudGrads, GaussianCloud, TRUNCATION_RADIUS};
use crate::volume::{Image, ProjectionStack};

/// A single orthographic view, mainly useful as a test harness because the
/// splatted footprint is exact under it.
#[derive(Debug, Clone, Copy)]
pub struct ParallelGeometry {
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Pixel pitch as (row direction, column direction), like the cone
    /// detector.
    pub pixel_size: (f64, f64),
    /// View angle, same convention as [`ConeBeamGeometry::angles`].
    pub angle: f64,
}

/// One view's projection model, covering both camera types.
struct SplatCamera {
    /// World-to-detector-frame rotation; rows are e_u, e_v, e_w.
    rv: Matrix3<f64>,
    /// Source position (cone only).
    source: Vector3<f64>,
    dsd: f64,
    perspective: bool,
    rows: usize,
    cols: usize,
    pitch: (f64, f64),
}

/// Per-kernel projection data shared by rendering and gradients.
struct Footprint {
    /// Detector coordinates of the projected center.
    c: Vector2<f64>,
    /// d(detector coords)/d(world position) at the center.
    j: Matrix2x3<f64>,
    /// Unit integration direction through the kernel center.
    d: Vector3<f64>,
    /// Camera-frame kernel center (only meaningful for perspective views).
    cam: Vector3<f64>,
    /// Distance from source to kernel center (perspective views).
    range: f64,
}

impl SplatCamera {
    fn cone(geom: &ConeBeamGeometry, view: usize) -> Result<Self> {
        if view >= geom.n_views() {
            return Err(Error::Index(format!(
                "view {view} out of range for {} views",
                geom.n_views()
            )));
        }
        let (e_u, e_v, e_w) = geom.detector_frame(view);
        let rv = Matrix3::from_rows(&[
            Vector3::from(e_u).transpose(),
            Vector3::from(e_v).transpose(),
            Vector3::from(e_w).transpose(),
        ]);
        Ok(SplatCamera {
            rv,
            source: Vector3::from(geom.source_position(view)),
            dsd: geom.dist_source_detector,
            perspective: true,
            rows: geom.detector_rows,
            cols: geom.detector_cols,
            pitch: geom.detector_pixel_size,
        })
    }

    fn parallel(pg: &ParallelGeometry) -> Self {
        let (s, c) = pg.angle.sin_cos();
        let rv = Matrix3::from_rows(&[
            Vector3::new(-s, c, 0.0).transpose(),
            Vector3::new(0.0, 0.0, 1.0).transpose(),
            Vector3::new(-c, -s, 0.0).transpose(),
        ]);
        SplatCamera {
            rv,
            source: Vector3::zeros(),
            dsd: 0.0,
            perspective: false,
            rows: pg.detector_rows,
            cols: pg.detector_cols,
            pitch: pg.pixel_size,
        }
    }

    /// Projects a kernel center; `None` when it sits at or behind the
    /// source plane and cannot be splatted.
    fn project(&self, p: Vector3<f64>) -> Option<Footprint> {
        if self.perspective {
            let rel = p - self.source;
            let cam = self.rv * rel;
            let z = cam.z;
            if z <= 1e-6 * self.dsd {
                return None;
            }
            let f = self.dsd / z;
            let c = Vector2::new(f * cam.x, f * cam.y);
            let j_cam = Matrix2x3::new(
                f,
                0.0,
                -f * cam.x / z,
                0.0,
                f,
                -f * cam.y / z,
            );
            let range = rel.norm();
            Some(Footprint {
                c,
                j: j_cam * self.rv,
                d: rel / range,
                cam,
                range,
            })
        } else {
            let cam = self.rv * p;
            Some(Footprint {
                c: Vector2::new(cam.x, cam.y),
                j: Matrix2x3::from_rows(&[self.rv.row(0).into_owned(), self.rv.row(1).into_owned()]),
                d: self.rv.row(2).transpose(),
                cam,
                range: 1.0,
            })
        }
    }

    #[inline]
    fn u_of_col(&self, col: usize) -> f64 {
        (col as f64 - (self.cols as f64 - 1.0) / 2.0) * self.pitch.1
    }

    #[inline]
    fn v_of_row(&self, row: usize) -> f64 {
        (row as f64 - (self.rows as f64 - 1.0) / 2.0) * self.pitch.0
    }

    /// Index interval [lo, hi] of detector coordinates within `coord` of
    /// `center`, or `None` if it misses the detector.
    fn index_interval(center: f64, halfwidth: f64, pitch: f64, n: usize) -> Option<(usize, usize)> {
        let mid = (n as f64 - 1.0) / 2.0;
        let lo = ((center - halfwidth) / pitch + mid).ceil().max(0.0);
        let hi = ((center + halfwidth) / pitch + mid).floor().min(n as f64 - 1.0);
        if lo > hi {
            None
        } else {
            Some((lo as usize, hi as usize))
        }
    }
}

/// Everything needed to rasterize or differentiate one kernel's footprint.
struct PreparedKernel {
    fp: Footprint,
    shape: KernelShape,
    /// Inverse footprint covariance.
    q2: Matrix2<f64>,
    /// Footprint covariance J Sigma J^T.
    sigma2: Matrix2<f64>,
    /// Line integral through the center: rho * sqrt(2 pi / k).
    amp: f64,
    /// Amplitude at unit density, amp / rho.
    amp_unit: f64,
    /// d^T Sigma^-1 d.
    k: f64,
}

fn prepare_kernel(camera: &SplatCamera, cloud: &GaussianCloud, i: usize) -> Result<Option<PreparedKernel>> {
    let rho = cloud.densities[i];
    if rho <= 0.0 {
        return Ok(None);
    }
    let shape = cloud.shape(i)?;
    let Some(fp) = camera.project(Vector3::from(cloud.positions[i])) else {
        return Ok(None);
    };
    let k = (shape.inv_sigma * fp.d).dot(&fp.d);
    let sigma2 = fp.j * shape.sigma * fp.j.transpose();
    let det = sigma2[(0, 0)] * sigma2[(1, 1)] - sigma2[(0, 1)] * sigma2[(1, 0)];
    if !(det.is_finite() && det > 0.0 && k.is_finite() && k > 0.0) {
        return Err(Error::Numeric(format!(
            "kernel {i}: projected footprint degenerate (det {det}, k {k})"
        )));
    }
    let q2 = Matrix2::new(
        sigma2[(1, 1)] / det,
        -sigma2[(0, 1)] / det,
        -sigma2[(0, 1)] / det,
        sigma2[(0, 0)] / det,
    );
    let amp_unit = (2.0 * std::f64::consts::PI / k).sqrt();
    Ok(Some(PreparedKernel {
        fp,
        shape,
        q2,
        sigma2,
        amp: rho * amp_unit,
        amp_unit,
        k,
    }))
}

/// Walks the truncated footprint pixel box, calling `visit(index, delta_u,
/// delta_v, weight)` with the unnormalized Gaussian weight per pixel.
fn for_each_footprint_pixel<F: FnMut(usize, f64, f64, f64)>(
    camera: &SplatCamera,
    pk: &PreparedKernel,
    mut visit: F,
) {
    let r = TRUNCATION_RADIUS;
    let (q00, q01, q11) = (pk.q2[(0, 0)], pk.q2[(0, 1)], pk.q2[(1, 1)]);
    let det_q = q00 * q11 - q01 * q01;
    let v_half = r * pk.sigma2[(1, 1)].max(0.0).sqrt();
    let Some((row_lo, row_hi)) =
        SplatCamera::index_interval(pk.fp.c.y, v_half, camera.pitch.0, camera.rows)
    else {
        return;
    };
    let h = camera.pitch.1;
    let rr = (-q00 * h * h).exp();
    for row in row_lo..=row_hi {
        let dv = camera.v_of_row(row) - pk.fp.c.y;
        // u extent where q00 du^2 + 2 q01 du dv + q11 dv^2 <= r^2
        let disc = q00 * r * r - det_q * dv * dv;
        if disc <= 0.0 {
            continue;
        }
        let sd = disc.sqrt() / q00;
        let mid = -q01 * dv / q00;
        let Some((col_lo, col_hi)) = SplatCamera::index_interval(
            pk.fp.c.x + mid,
            sd,
            camera.pitch.1,
            camera.cols,
        ) else {
            continue;
        };
        let du0 = camera.u_of_col(col_lo) - pk.fp.c.x;
        let f0 = -0.5 * (q00 * du0 * du0 + 2.0 * q01 * du0 * dv + q11 * dv * dv);
        let df0 = -0.5 * q00 * (2.0 * du0 * h + h * h) - q01 * h * dv;
        let mut w = f0.exp();
        let mut ratio = df0.exp();
        let base = row * camera.cols;
        for col in col_lo..=col_hi {
            let du = du0 + (col - col_lo) as f64 * h;
            visit(base + col, du, dv, w);
            w *= ratio;
            ratio *= rr;
        }
    }
}

fn render(camera: &SplatCamera, cloud: &GaussianCloud) -> Result<Image> {
    cloud.validate()?;
    let mut pixels = vec![0.0; camera.rows * camera.cols];
    for i in 0..cloud.len() {
        let Some(pk) = prepare_kernel(camera, cloud, i)? else {
            continue;
        };
        for_each_footprint_pixel(camera, &pk, |idx, _du, _dv, w| {
            pixels[idx] += pk.amp * w;
        });
    }
    Image::new(camera.cols, camera.rows, pixels)
}

/// Per-kernel parameter gradients, accumulated into `grads`.
fn render_grad(
    camera: &SplatCamera,
    cloud: &GaussianCloud,
    upstream: &Image,
    grads: &mut CloudGrads,
) -> Result<()> {
    cloud.validate()?;
    if upstream.width != camera.cols || upstream.height != camera.rows {
        return Err(Error::Shape(format!(
            "upstream image {}x{} does not match detector {}x{}",
            upstream.width, upstream.height, camera.cols, camera.rows
        )));
    }
    if grads.densities.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "gradient buffers sized for {} kernels, cloud has {}",
            grads.densities.len(),
            cloud.len()
        )));
    }
    struct KernelGrad {
        i: usize,
        rho: f64,
        pos: Vector3<f64>,
        log_scales: [f64; 3],
        quat: [f64; 4],
    }
    let per_kernel: Vec<Option<KernelGrad>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| -> Result<Option<KernelGrad>> {
            let Some(pk) = prepare_kernel(camera, cloud, i)? else {
                return Ok(None);
            };
            // footprint moments weighted by the upstream signal
            let mut s0 = 0.0;
            let mut s1 = Vector2::zeros();
            let mut s2 = Matrix2::zeros();
            for_each_footprint_pixel(camera, &pk, |idx, du, dv, w| {
                let uw = upstream.data[idx] * w;
                s0 += uw;
                s1.x += uw * du;
                s1.y += uw * dv;
                s2[(0, 0)] += uw * du * du;
                s2[(0, 1)] += uw * du * dv;
                s2[(1, 1)] += uw * dv * dv;
            });
            s2[(1, 0)] = s2[(0, 1)];

            let rho_grad = s0 * pk.amp_unit;
            let g_c = pk.amp * (pk.q2 * s1);
            let g_sigma2 = 0.5 * pk.amp * (pk.q2 * s2 * pk.q2);
            // amplitude's own covariance dependence through k = d^T Q d
            let qd = pk.shape.inv_sigma * pk.fp.d;
            let g_sigma = pk.fp.j.transpose() * g_sigma2 * pk.fp.j
                + (s0 * pk.amp / (2.0 * pk.k)) * (qd * qd.transpose());
            let (ds, dq) = covariance::backprop_sigma(&pk.shape, &g_sigma, cloud.rotations[i]);

            let mut g_p = pk.fp.j.transpose() * g_c;
            if camera.perspective {
                // footprint covariance also moves through J(position)
                let w2 = 2.0 * (g_sigma2 * pk.fp.j * pk.shape.sigma * camera.rv.transpose());
                let (x, y, z) = (pk.fp.cam.x, pk.fp.cam.y, pk.fp.cam.z);
                let fz2 = camera.dsd / (z * z);
                let g_cam = Vector3::new(
                    -fz2 * w2[(0, 2)],
                    -fz2 * w2[(1, 2)],
                    -fz2 * (w2[(0, 0)] + w2[(1, 1)])
                        + 2.0 * camera.dsd / (z * z * z) * (x * w2[(0, 2)] + y * w2[(1, 2)]),
                );
                g_p += camera.rv.transpose() * g_cam;
                // and the integration direction d moves with the center
                let g_d = -(s0 * pk.amp / pk.k) * qd;
                g_p += (g_d - pk.fp.d * pk.fp.d.dot(&g_d)) / pk.fp.range;
            }
            Ok(Some(KernelGrad {
                i,
                rho: rho_grad,
                pos: g_p,
                log_scales: ds,
                quat: dq,
            }))
        })
        .collect::<Result<_>>()?;
    for kg in per_kernel.into_iter().flatten() {
        grads.densities[kg.i] += kg.rho;
        for a in 0..3 {
            grads.positions[kg.i][a] += kg.pos[a];
            grads.log_scales[kg.i][a] += kg.log_scales[a];
        }
        for a in 0..4 {
            grads.rotations[kg.i][a] += kg.quat[a];
        }
    }
    Ok(())
}

/// Splats the cloud onto one cone-beam view.
pub fn splat_project_view(cloud: &GaussianCloud, geom: &ConeBeamGeometry, view: usize) -> Result<Image> {
    render(&SplatCamera::cone(geom, view)?, cloud)
}

/// Splats the cloud onto every view of the geometry.
pub fn splat_project(cloud: &GaussianCloud, geom: &ConeBeamGeometry) -> Result<ProjectionStack> {
    let images: Vec<Image> = (0..geom.n_views())
        .into_par_iter()
        .map(|v| splat_project_view(cloud, geom, v))
        .collect::<Result<_>>()?;
    let mut stack = ProjectionStack::zeros(geom.detector_rows, geom.detector_cols, geom.angles.clone());
    for (v, img) in images.into_iter().enumerate() {
        stack.view_mut(v).copy_from_slice(&img.data);
    }
    Ok(stack)
}

/// Orthographic splat; exact Gaussian line integrals up to truncation.
pub fn splat_project_parallel(cloud: &GaussianCloud, pg: &ParallelGeometry) -> Result<Image> {
    render(&SplatCamera::parallel(pg), cloud)
}

/// Accumulates d(upstream . rendered view)/d(cloud parameters) into `grads`.
pub fn splat_view_grad(
    cloud: &GaussianCloud,
    geom: &ConeBeamGeometry,
    view: usize,
    upstream: &Image,
    grads: &mut CloudGrads,
) -> Result<()> {
    render_grad(&SplatCamera::cone(geom, view)?, cloud, upstream, grads)
}

/// Gradient of the orthographic splat.
pub fn splat_parallel_grad(
    cloud: &GaussianCloud,
    pg: &ParallelGeometry,
    upstream: &Image,
    grads: &mut CloudGrads,
) -> Result<()> {
    render_grad(&SplatCamera::parallel(pg), cloud, upstream, grads)
}
