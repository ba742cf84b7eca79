//! Dense-grid evaluation of a Gaussian kernel mixture and its reverse pass.
//!
//! The mixture value at a voxel center v is
//!
//!   sigma_g(v) = sum_i max(rho_i, 0) exp(-1/2 (v - p_i)^T Q_i (v - p_i))
//!
//! with kernels cut off at Mahalanobis radius [`TRUNCATION_RADIUS`]. Two
//! things keep this fast enough to sit inside a training loop:
//!
//! - Per-kernel loop bounds are analytic. The z-extent comes from the
//!   marginal variance Sigma_zz, the y-extent for a fixed z from the (y,z)
//!   Schur complement of Q, and the x-extent for fixed (y,z) from the
//!   quadratic in delta_x directly, so no voxel outside the truncation
//!   ellipsoid is ever touched.
//! - Along an x-row the exponent is a quadratic with constant second
//!   difference, so consecutive weights obey w(x+1) = w(x) r(x) with
//!   r(x+1) = r(x) rr and a per-row constant rr. Each row costs three exp
//!   calls regardless of length.
//!
//! The forward pass parallelizes over output z-slices (each voxel gathers
//! its kernels in index order, so results do not depend on the worker
//! count); the gradient pass parallelizes over kernels for the same reason.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::volume::Volume;

use super::covariance::{backprop_sigma, KernelShape};
use super::{CloudGrads, GaussianCloud, TRUNCATION_RADIUS};

/// Analytic support intervals of one truncated kernel.
struct SupportBounds {
    q00: f64,
    q01: f64,
    q02: f64,
    q11: f64,
    q12: f64,
    q22: f64,
    /// (y,z) marginal precision = Schur complement of Q w.r.t. x.
    s_yy: f64,
    s_yz: f64,
    s_zz: f64,
    sigma_zz: f64,
    r2: f64,
}

impl SupportBounds {
    fn new(shape: &KernelShape, radius: f64) -> Self {
        let q = &shape.inv_sigma;
        let (q00, q01, q02) = (q[(0, 0)], q[(0, 1)], q[(0, 2)]);
        let (q11, q12, q22) = (q[(1, 1)], q[(1, 2)], q[(2, 2)]);
        Self {
            q00,
            q01,
            q02,
            q11,
            q12,
            q22,
            s_yy: q11 - q01 * q01 / q00,
            s_yz: q12 - q01 * q02 / q00,
            s_zz: q22 - q02 * q02 / q00,
            sigma_zz: shape.sigma[(2, 2)],
            r2: radius * radius,
        }
    }

    /// Half-width of the support along z.
    fn z_halfwidth(&self) -> f64 {
        (self.r2 * self.sigma_zz).sqrt()
    }

    /// delta_y interval for a fixed delta_z, if the slice intersects the
    /// ellipsoid.
    fn y_interval(&self, dz: f64) -> Option<(f64, f64)> {
        let det_s = self.s_yy * self.s_zz - self.s_yz * self.s_yz;
        let disc = self.s_yy * self.r2 - det_s * dz * dz;
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        Some(((-self.s_yz * dz - s) / self.s_yy, (-self.s_yz * dz + s) / self.s_yy))
    }

    /// delta_x interval for fixed (delta_y, delta_z).
    fn x_interval(&self, dy: f64, dz: f64) -> Option<(f64, f64)> {
        let beta = self.q01 * dy + self.q02 * dz;
        let rest = self.q11 * dy * dy + 2.0 * self.q12 * dy * dz + self.q22 * dz * dz;
        let disc = beta * beta - self.q00 * (rest - self.r2);
        if disc <= 0.0 {
            return None;
        }
        let s = disc.sqrt();
        Some(((-beta - s) / self.q00, (-beta + s) / self.q00))
    }
}

/// Voxel indices of a full-grid axis whose centers fall in [lo, hi],
/// further clipped to [clip_lo, clip_hi]. Centers sit at
/// (i + 0.5) sp - n sp / 2.
fn index_range(
    lo: f64,
    hi: f64,
    sp: f64,
    n: usize,
    clip_lo: usize,
    clip_hi: usize,
) -> Option<(usize, usize)> {
    let half = n as f64 * sp * 0.5;
    let i0 = ((lo + half) / sp - 0.5).ceil().max(0.0) as usize;
    let i1f = ((hi + half) / sp - 0.5).floor();
    if i1f < 0.0 {
        return None;
    }
    let i0 = i0.max(clip_lo);
    let i1 = (i1f as usize).min(n - 1).min(clip_hi);
    if i0 > i1 {
        None
    } else {
        Some((i0, i1))
    }
}

#[inline]
fn center(i: usize, sp: f64, n: usize) -> f64 {
    (i as f64 + 0.5) * sp - n as f64 * sp * 0.5
}

struct PreparedKernel {
    rho: f64,
    pos: [f64; 3],
    bounds: SupportBounds,
    /// Original index in the cloud (zero-density kernels are skipped).
    index: usize,
}

fn prepare(cloud: &GaussianCloud) -> Result<Vec<PreparedKernel>> {
    let mut out = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        if cloud.densities[i] <= 0.0 {
            continue;
        }
        let shape = cloud.shape(i)?;
        out.push(PreparedKernel {
            rho: cloud.densities[i],
            pos: cloud.positions[i],
            bounds: SupportBounds::new(&shape, TRUNCATION_RADIUS),
            index: i,
        });
    }
    Ok(out)
}

/// Evaluates the mixture on a sub-box of the full voxel grid. `offset` and
/// `dims` select the box; voxel world positions are those of the full grid
/// (`full_dims` centered at the origin), so a region query equals the
/// matching sub-block of the full query to rounding error.
pub fn query_cloud_region(
    cloud: &GaussianCloud,
    full_dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    offset: (usize, usize, usize),
    dims: (usize, usize, usize),
) -> Result<Volume> {
    debug_assert!(
        offset.0 + dims.0 <= full_dims.0
            && offset.1 + dims.1 <= full_dims.1
            && offset.2 + dims.2 <= full_dims.2
    );
    let kernels = prepare(cloud)?;
    let (dx, dy, dz) = dims;
    // bucket kernels by the region z-slices they can touch
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); dz];
    for (ki, k) in kernels.iter().enumerate() {
        let hw = k.bounds.z_halfwidth();
        if let Some((z0, z1)) = index_range(
            k.pos[2] - hw,
            k.pos[2] + hw,
            spacing.2,
            full_dims.2,
            offset.2,
            offset.2 + dz - 1,
        ) {
            for z in z0..=z1 {
                buckets[z - offset.2].push(ki as u32);
            }
        }
    }

    let mut data = vec![0.0; dx * dy * dz];
    data.par_chunks_mut(dx * dy)
        .enumerate()
        .for_each(|(z_rel, slab)| {
            let z = offset.2 + z_rel;
            let cz = center(z, spacing.2, full_dims.2);
            for &ki in &buckets[z_rel] {
                let k = &kernels[ki as usize];
                let b = &k.bounds;
                let dzk = cz - k.pos[2];
                let Some((ylo, yhi)) = b.y_interval(dzk) else {
                    continue;
                };
                let Some((y0, y1)) = index_range(
                    k.pos[1] + ylo,
                    k.pos[1] + yhi,
                    spacing.1,
                    full_dims.1,
                    offset.1,
                    offset.1 + dy - 1,
                ) else {
                    continue;
                };
                let h = spacing.0;
                let rr = (-b.q00 * h * h).exp();
                for y in y0..=y1 {
                    let dyk = center(y, spacing.1, full_dims.1) - k.pos[1];
                    let Some((xlo, xhi)) = b.x_interval(dyk, dzk) else {
                        continue;
                    };
                    let Some((x0, x1)) = index_range(
                        k.pos[0] + xlo,
                        k.pos[0] + xhi,
                        spacing.0,
                        full_dims.0,
                        offset.0,
                        offset.0 + dx - 1,
                    ) else {
                        continue;
                    };
                    let dx0 = center(x0, spacing.0, full_dims.0) - k.pos[0];
                    let beta = b.q01 * dyk + b.q02 * dzk;
                    let rest =
                        b.q11 * dyk * dyk + 2.0 * b.q12 * dyk * dzk + b.q22 * dzk * dzk;
                    let f0 = -0.5 * (b.q00 * dx0 * dx0 + 2.0 * beta * dx0 + rest);
                    let df0 = -0.5 * (b.q00 * (2.0 * dx0 * h + h * h) + 2.0 * beta * h);
                    let mut w = k.rho * f0.exp();
                    let mut r = df0.exp();
                    let row = (y - offset.1) * dx;
                    for x in x0..=x1 {
                        slab[row + (x - offset.0)] += w;
                        w *= r;
                        r *= rr;
                    }
                }
            }
        });
    Volume::new(dims, spacing, data)
}

pub fn query_cloud(
    cloud: &GaussianCloud,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<Volume> {
    query_cloud_region(cloud, dims, spacing, (0, 0, 0), dims)
}

/// Reverse pass of [`query_cloud_region`]: given dL/d(voxel) for the region,
/// accumulates dL/d(kernel parameters) into `grads`. Kernels with rho <= 0
/// contributed nothing and receive zero gradient (the density clamp gates
/// them out).
pub fn query_cloud_region_grad(
    cloud: &GaussianCloud,
    full_dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    offset: (usize, usize, usize),
    dims: (usize, usize, usize),
    upstream: &[f64],
    grads: &mut CloudGrads,
) -> Result<()> {
    let (dx, dy, dz) = dims;
    assert_eq!(upstream.len(), dx * dy * dz, "upstream does not match region");
    let kernels = prepare(cloud)?;

    struct KernelGrad {
        index: usize,
        rho: f64,
        pos: Vector3<f64>,
        log_scales: [f64; 3],
        quat: [f64; 4],
    }

    let per_kernel: Vec<KernelGrad> = kernels
        .par_iter()
        .map(|k| {
            let b = &k.bounds;
            // moment accumulators: sum u w, sum u w delta, sum u w delta delta^T
            let mut s0 = 0.0;
            let mut s1 = Vector3::zeros();
            let mut s2 = Matrix3::zeros();
            let hw = b.z_halfwidth();
            if let Some((z0, z1)) = index_range(
                k.pos[2] - hw,
                k.pos[2] + hw,
                spacing.2,
                full_dims.2,
                offset.2,
                offset.2 + dz - 1,
            ) {
                let h = spacing.0;
                let rr = (-b.q00 * h * h).exp();
                for z in z0..=z1 {
                    let dzk = center(z, spacing.2, full_dims.2) - k.pos[2];
                    let Some((ylo, yhi)) = b.y_interval(dzk) else {
                        continue;
                    };
                    let Some((y0, y1)) = index_range(
                        k.pos[1] + ylo,
                        k.pos[1] + yhi,
                        spacing.1,
                        full_dims.1,
                        offset.1,
                        offset.1 + dy - 1,
                    ) else {
                        continue;
                    };
                    for y in y0..=y1 {
                        let dyk = center(y, spacing.1, full_dims.1) - k.pos[1];
                        let Some((xlo, xhi)) = b.x_interval(dyk, dzk) else {
                            continue;
                        };
                        let Some((x0, x1)) = index_range(
                            k.pos[0] + xlo,
                            k.pos[0] + xhi,
                            spacing.0,
                            full_dims.0,
                            offset.0,
                            offset.0 + dx - 1,
                        ) else {
                            continue;
                        };
                        let mut dxk = center(x0, spacing.0, full_dims.0) - k.pos[0];
                        let beta = b.q01 * dyk + b.q02 * dzk;
                        let rest =
                            b.q11 * dyk * dyk + 2.0 * b.q12 * dyk * dzk + b.q22 * dzk * dzk;
                        let f0 = -0.5 * (b.q00 * dxk * dxk + 2.0 * beta * dxk + rest);
                        let df0 = -0.5 * (b.q00 * (2.0 * dxk * h + h * h) + 2.0 * beta * h);
                        let mut w = f0.exp();
                        let mut r = df0.exp();
                        let base = ((z - offset.2) * dy + (y - offset.1)) * dx - offset.0;
                        for x in x0..=x1 {
                            let uw = upstream[base + x] * w;
                            s0 += uw;
                            s1[0] += uw * dxk;
                            s1[1] += uw * dyk;
                            s1[2] += uw * dzk;
                            s2[(0, 0)] += uw * dxk * dxk;
                            s2[(0, 1)] += uw * dxk * dyk;
                            s2[(0, 2)] += uw * dxk * dzk;
                            s2[(1, 1)] += uw * dyk * dyk;
                            s2[(1, 2)] += uw * dyk * dzk;
                            s2[(2, 2)] += uw * dzk * dzk;
                            w *= r;
                            r *= rr;
                            dxk += h;
                        }
                    }
                }
            }
            s2[(1, 0)] = s2[(0, 1)];
            s2[(2, 0)] = s2[(0, 2)];
            s2[(2, 1)] = s2[(1, 2)];
            // value = rho exp(-q/2), delta = v - p:
            //   d/drho = sum u w
            //   d/dp   = rho Q (sum u w delta)
            //   dL/dQ  = -rho/2 sum u w delta delta^T, dL/dSigma = -Q (dL/dQ) Q
            let shape = cloud
                .shape(k.index)
                .expect("shape validated during prepare");
            let q = shape.inv_sigma;
            let g_pos = q * s1 * k.rho;
            let g_sigma = q * s2 * q * (0.5 * k.rho);
            let (g_ls, g_quat) = backprop_sigma(&shape, &g_sigma, cloud.rotations[k.index]);
            KernelGrad {
                index: k.index,
                rho: s0,
                pos: g_pos,
                log_scales: g_ls,
                quat: g_quat,
            }
        })
        .collect();

    for g in per_kernel {
        grads.densities[g.index] += g.rho;
        for a in 0..3 {
            grads.positions[g.index][a] += g.pos[a];
            grads.log_scales[g.index][a] += g.log_scales[a];
        }
        for a in 0..4 {
            grads.rotations[g.index][a] += g.quat[a];
        }
    }
    Ok(())
}
