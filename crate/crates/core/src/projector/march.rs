//! Ray-marched line integrals and their exact adjoint.
//!
//! A pixel value is sum_i field(r(s_i)) * delta with equidistant midpoint
//! samples over the clipped ray span [s_near, s_far]; delta is the span
//! divided by the sample count, so the quadrature always covers the chord
//! exactly. The adjoint scatters pixel * delta back through the identical
//! sample positions and interpolation weights, which makes
//! <A x, y> = <x, A^T y> hold to rounding error rather than to a
//! discretization tolerance.
//!
//! Forward marching parallelizes over pixels (pure gather). The adjoint
//! accumulates per view into a private buffer, sequentially within the
//! view, and buffers merge in ascending view order, so outputs are
//! bit-identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Ray};
use crate::volume::{Image, ProjectionStack, Volume};

use super::{Interpolation, MarchConfig};

fn check_volume(vol: &Volume, geom: &ConeBeamGeometry) -> Result<()> {
    if vol.dims() != geom.volume_dims {
        return Err(Error::Shape(format!(
            "volume {:?} does not match geometry grid {:?}",
            vol.dims(),
            geom.volume_dims
        )));
    }
    if vol.spacing() != geom.voxel_size {
        return Err(Error::Shape(format!(
            "volume spacing {:?} does not match geometry voxel size {:?}",
            vol.spacing(),
            geom.voxel_size
        )));
    }
    Ok(())
}

/// Sample count and step for one clipped ray.
#[inline]
fn sample_plan(ray: &Ray, cfg: &MarchConfig) -> Option<(usize, f64)> {
    let span = ray.s_far - ray.s_near;
    if span <= 0.0 {
        return None;
    }
    let n = ((span / cfg.step_length).ceil() as usize)
        .max(1)
        .min(cfg.samples_per_ray_cap);
    Some((n, span / n as f64))
}

/// Continuous voxel-center coordinates of a world point.
#[inline]
fn grid_coords(p: [f64; 3], dims: (usize, usize, usize), sp: (f64, f64, f64)) -> (f64, f64, f64) {
    (
        (p[0] + 0.5 * dims.0 as f64 * sp.0) / sp.0 - 0.5,
        (p[1] + 0.5 * dims.1 as f64 * sp.1) / sp.1 - 0.5,
        (p[2] + 0.5 * dims.2 as f64 * sp.2) / sp.2 - 0.5,
    )
}

#[inline]
fn sample_field(data: &[f64], dims: (usize, usize, usize), sp: (f64, f64, f64), p: [f64; 3], interp: Interpolation) -> f64 {
    let (cx, cy, cz) = grid_coords(p, dims, sp);
    let (nx, ny, nz) = (dims.0 as isize, dims.1 as isize, dims.2 as isize);
    match interp {
        Interpolation::Nearest => {
            let (x, y, z) = (cx.round() as isize, cy.round() as isize, cz.round() as isize);
            if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                0.0
            } else {
                data[((z * ny + y) * nx + x) as usize]
            }
        }
        Interpolation::Trilinear => {
            let (x0, y0, z0) = (cx.floor() as isize, cy.floor() as isize, cz.floor() as isize);
            let (tx, ty, tz) = (cx - x0 as f64, cy - y0 as f64, cz - z0 as f64);
            let mut acc = 0.0;
            for dz in 0..2 {
                let z = z0 + dz;
                if z < 0 || z >= nz {
                    continue;
                }
                let wz = if dz == 0 { 1.0 - tz } else { tz };
                for dy in 0..2 {
                    let y = y0 + dy;
                    if y < 0 || y >= ny {
                        continue;
                    }
                    let wy = if dy == 0 { 1.0 - ty } else { ty };
                    for dx in 0..2 {
                        let x = x0 + dx;
                        if x < 0 || x >= nx {
                            continue;
                        }
                        let wx = if dx == 0 { 1.0 - tx } else { tx };
                        acc += wz * wy * wx * data[((z * ny + y) * nx + x) as usize];
                    }
                }
            }
            acc
        }
    }
}

/// Adjoint of [`sample_field`]: adds `amount` through the same weights.
#[inline]
fn scatter_field(data: &mut [f64], dims: (usize, usize, usize), sp: (f64, f64, f64), p: [f64; 3], amount: f64, interp: Interpolation) {
    let (cx, cy, cz) = grid_coords(p, dims, sp);
    let (nx, ny, nz) = (dims.0 as isize, dims.1 as isize, dims.2 as isize);
    match interp {
        Interpolation::Nearest => {
            let (x, y, z) = (cx.round() as isize, cy.round() as isize, cz.round() as isize);
            if !(x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz) {
                data[((z * ny + y) * nx + x) as usize] += amount;
            }
        }
        Interpolation::Trilinear => {
            let (x0, y0, z0) = (cx.floor() as isize, cy.floor() as isize, cz.floor() as isize);
            let (tx, ty, tz) = (cx - x0 as f64, cy - y0 as f64, cz - z0 as f64);
            for dz in 0..2 {
                let z = z0 + dz;
                if z < 0 || z >= nz {
                    continue;
                }
                let wz = if dz == 0 { 1.0 - tz } else { tz };
                for dy in 0..2 {
                    let y = y0 + dy;
                    if y < 0 || y >= ny {
                        continue;
                    }
                    let wy = if dy == 0 { 1.0 - ty } else { ty };
                    for dx in 0..2 {
                        let x = x0 + dx;
                        if x < 0 || x >= nx {
                            continue;
                        }
                        let wx = if dx == 0 { 1.0 - tx } else { tx };
                        data[((z * ny + y) * nx + x) as usize] += wz * wy * wx * amount;
                    }
                }
            }
        }
    }
}

fn march_ray(vol: &Volume, ray: &Ray, cfg: &MarchConfig) -> f64 {
    let Some((n, delta)) = sample_plan(ray, cfg) else {
        return 0.0;
    };
    let dims = vol.dims();
    let sp = vol.spacing();
    let data = vol.data();
    let mut acc = 0.0;
    for i in 0..n {
        let s = ray.s_near + (i as f64 + 0.5) * delta;
        acc += sample_field(data, dims, sp, ray.point_at(s), cfg.interpolation);
    }
    acc * delta
}

/// Line integrals of `vol` for one view; pixels row-major, column fastest.
pub fn forward_project_view(
    vol: &Volume,
    geom: &ConeBeamGeometry,
    view: usize,
    cfg: &MarchConfig,
) -> Result<Image> {
    check_volume(vol, geom)?;
    let rays = geom.rays_for_view(view)?;
    let pixels: Vec<f64> = rays
        .par_iter()
        .map(|ray| march_ray(vol, ray, cfg))
        .collect();
    Image::new(geom.detector_cols, geom.detector_rows, pixels)
}

/// Line integrals for every view of the geometry.
pub fn forward_project(
    vol: &Volume,
    geom: &ConeBeamGeometry,
    cfg: &MarchConfig,
) -> Result<ProjectionStack> {
    check_volume(vol, geom)?;
    let images: Vec<Image> = (0..geom.n_views())
        .into_par_iter()
        .map(|v| forward_project_view(vol, geom, v, cfg))
        .collect::<Result<_>>()?;
    let mut stack = ProjectionStack::zeros(geom.detector_rows, geom.detector_cols, geom.angles.clone());
    for (v, img) in images.into_iter().enumerate() {
        stack.view_mut(v).copy_from_slice(&img.data);
    }
    Ok(stack)
}

/// Adjoint of [`forward_project_view`] applied to one view's pixel values.
pub fn backproject_view(
    geom: &ConeBeamGeometry,
    view: usize,
    pixels: &[f64],
    cfg: &MarchConfig,
) -> Result<Volume> {
    if pixels.len() != geom.detector_rows * geom.detector_cols {
        return Err(Error::Shape(format!(
            "view has {} pixels, geometry wants {}x{}",
            pixels.len(),
            geom.detector_rows,
            geom.detector_cols
        )));
    }
    let rays = geom.rays_for_view(view)?;
    let mut vol = Volume::zeros(geom.volume_dims, geom.voxel_size);
    let dims = vol.dims();
    let sp = vol.spacing();
    let data = vol.data_mut();
    for (ray, &px) in rays.iter().zip(pixels) {
        if px == 0.0 {
            continue;
        }
        let Some((n, delta)) = sample_plan(ray, cfg) else {
            continue;
        };
        let amount = px * delta;
        for i in 0..n {
            let s = ray.s_near + (i as f64 + 0.5) * delta;
            scatter_field(data, dims, sp, ray.point_at(s), amount, cfg.interpolation);
        }
    }
    Ok(vol)
}

/// Adjoint of [`forward_project`]: sums per-view backprojections in view
/// order.
pub fn backproject(stack: &ProjectionStack, geom: &ConeBeamGeometry, cfg: &MarchConfig) -> Result<Volume> {
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
    let views: Vec<Volume> = (0..geom.n_views())
        .into_par_iter()
        .map(|v| backproject_view(geom, v, stack.view(v), cfg))
        .collect::<Result<_>>()?;
    let mut out = Volume::zeros(geom.volume_dims, geom.voxel_size);
    for v in views {
        for (acc, x) in out.data_mut().iter_mut().zip(v.data()) {
            *acc += x;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_angles;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry(dims: (usize, usize, usize), n_views: usize, det: usize) -> ConeBeamGeometry {
        ConeBeamGeometry::new(
            500.0,
            1000.0,
            det,
            det,
            (2.0, 2.0),
            dims,
            (1.0, 1.0, 1.0),
            uniform_angles(n_views, std::f64::consts::TAU).unwrap(),
        )
        .unwrap()
    }

    fn random_volume(dims: (usize, usize, usize), seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, (1.0, 1.0, 1.0), (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let geom = geometry((16, 16, 16), 3, 17);
        let cfg = MarchConfig::for_geometry(&geom);
        let stack = forward_project(&Volume::zeros((16, 16, 16), (1.0, 1.0, 1.0)), &geom, &cfg).unwrap();
        assert!(stack.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn central_ray_through_unit_cube_reads_the_chord() {
        // unit density, 64 mm cube; central pixel of an odd detector
        let geom = geometry((64, 64, 64), 1, 65);
        let cfg = MarchConfig::for_geometry(&geom);
        let vol = Volume::new((64, 64, 64), (1.0, 1.0, 1.0), vec![1.0; 64 * 64 * 64]).unwrap();
        let img = forward_project_view(&vol, &geom, 0, &cfg).unwrap();
        let center = img.at(32, 32);
        assert!(
            (center - 64.0).abs() <= cfg.step_length,
            "central integral {center}"
        );
    }

    #[test]
    fn off_center_ray_matches_box_chord() {
        let geom = geometry((64, 64, 64), 1, 65);
        let cfg = MarchConfig::for_geometry(&geom);
        let vol = Volume::new((64, 64, 64), (1.0, 1.0, 1.0), vec![1.0; 64 * 64 * 64]).unwrap();
        let img = forward_project_view(&vol, &geom, 0, &cfg).unwrap();
        let rays = geom.rays_for_view(0).unwrap();
        for &(row, col) in &[(32usize, 20usize), (20, 32), (12, 12), (32, 5)] {
            let ray = &rays[row * 65 + col];
            let chord = ray.s_far - ray.s_near;
            let got = img.at(col, row);
            assert!(
                (got - chord).abs() <= cfg.step_length,
                "({row},{col}): {got} vs chord {chord}"
            );
        }
    }

    #[test]
    fn forward_is_linear() {
        let geom = geometry((12, 12, 12), 2, 13);
        let cfg = MarchConfig::for_geometry(&geom);
        let a = random_volume((12, 12, 12), 1);
        let b = random_volume((12, 12, 12), 2);
        let mixed = Volume::new(
            (12, 12, 12),
            (1.0, 1.0, 1.0),
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 1.7 * x - 0.6 * y)
                .collect(),
        )
        .unwrap();
        let pa = forward_project(&a, &geom, &cfg).unwrap();
        let pb = forward_project(&b, &geom, &cfg).unwrap();
        let pm = forward_project(&mixed, &geom, &cfg).unwrap();
        let scale = pa.data.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..pm.data.len() {
            let want = 1.7 * pa.data[i] - 0.6 * pb.data[i];
            assert!((pm.data[i] - want).abs() <= 1e-6 * scale.max(1.0));
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let geom = geometry((32, 32, 32), 8, 32);
        let cfg = MarchConfig::for_geometry(&geom);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for draw in 0..5 {
            let x = random_volume((32, 32, 32), 100 + draw);
            let y_data: Vec<f64> = (0..8 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = ProjectionStack::new(32, 32, geom.angles.clone(), y_data).unwrap();
            let ax = forward_project(&x, &geom, &cfg).unwrap();
            let aty = backproject(&y, &geom, &cfg).unwrap();
            let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1e-12),
                "draw {draw}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn zero_stack_backprojects_to_zero() {
        let geom = geometry((16, 16, 16), 4, 17);
        let cfg = MarchConfig::for_geometry(&geom);
        let stack = ProjectionStack::zeros(17, 17, geom.angles.clone());
        let vol = backproject(&stack, &geom, &cfg).unwrap();
        assert!(vol.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_backprojects_into_a_tube() {
        let geom = geometry((32, 32, 32), 1, 33);
        let cfg = MarchConfig::for_geometry(&geom);
        let mut stack = ProjectionStack::zeros(33, 33, geom.angles.clone());
        let (row, col) = (16usize, 10usize);
        stack.view_mut(0)[row * 33 + col] = 1.0;
        let vol = backproject(&stack, &geom, &cfg).unwrap();
        let ray = &geom.rays_for_view(0).unwrap()[row * 33 + col];
        let mut touched = 0;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    if vol.at(x, y, z) == 0.0 {
                        continue;
                    }
                    touched += 1;
                    // distance from the voxel center to the ray axis
                    let c = vol.voxel_center(x, y, z);
                    let d = [c[0] - ray.origin[0], c[1] - ray.origin[1], c[2] - ray.origin[2]];
                    let along = d[0] * ray.direction[0] + d[1] * ray.direction[1] + d[2] * ray.direction[2];
                    let perp2 = d.iter().map(|v| v * v).sum::<f64>() - along * along;
                    assert!(
                        perp2.sqrt() <= 2.0,
                        "voxel ({x},{y},{z}) is {} mm off the ray",
                        perp2.sqrt()
                    );
                }
            }
        }
        assert!(touched > 0, "backprojection left no trace");
    }

    #[test]
    fn halving_the_step_shrinks_the_error() {
        // smooth blob so quadrature error dominates over interpolation kinks
        let dims = (32, 32, 32);
        let mut vol = Volume::zeros(dims, (1.0, 1.0, 1.0));
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let c = vol.voxel_center(x, y, z);
                    let r2 = c.iter().map(|v| v * v).sum::<f64>();
                    vol.set(x, y, z, (-r2 / 60.0).exp());
                }
            }
        }
        let geom = geometry(dims, 2, 33);
        let project = |step: f64| {
            let cfg = MarchConfig::new(step, 1 << 16, Interpolation::Trilinear).unwrap();
            forward_project(&vol, &geom, &cfg).unwrap()
        };
        let reference = project(0.0625);
        let err = |stack: &ProjectionStack| -> f64 {
            stack
                .data
                .iter()
                .zip(&reference.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(&project(0.5));
        let e2 = err(&project(0.25));
        assert!(e1 > e2, "error did not shrink: {e1} vs {e2}");
        assert!(e1 / e2 >= 1.5, "convergence ratio {} too shallow", e1 / e2);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let geom = geometry((16, 16, 16), 2, 17);
        let cfg = MarchConfig::for_geometry(&geom);
        let wrong = Volume::zeros((8, 8, 8), (1.0, 1.0, 1.0));
        assert!(matches!(
            forward_project(&wrong, &geom, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nearest_interpolation_also_pairs_adjointly() {
        let geom = geometry((16, 16, 16), 2, 17);
        let cfg = MarchConfig::new(0.5, 4096, Interpolation::Nearest).unwrap();
        let x = random_volume((16, 16, 16), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y_data: Vec<f64> = (0..2 * 17 * 17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = ProjectionStack::new(17, 17, geom.angles.clone(), y_data).unwrap();
        let ax = forward_project(&x, &geom, &cfg).unwrap();
        let aty = backproject(&y, &geom, &cfg).unwrap();
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }
}
