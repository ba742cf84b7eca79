//! Cone-beam scanning geometry and per-pixel ray generation.
//!
//! Conventions, fixed once for the whole crate:
//! - The volume is centered at the world origin and spans
//!   `[-dims*spacing/2, +dims*spacing/2]` per axis.
//! - The source orbits in the z = 0 plane at radius `dist_source_origin`,
//!   with the orbit angle measured counterclockwise from the +x axis.
//! - The detector is orthogonal to the central ray, centered on it, at
//!   `dist_source_detector` from the source. Detector columns run along the
//!   in-plane tangent direction, rows along +z. Offsets default to zero.

use crate::error::{Error, Result};

/// Scanner calibration: distances, detector grid, volume grid, and the
/// per-view orbit angles.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeBeamGeometry {
    /// Source to rotation-center distance (mm).
    pub dist_source_origin: f64,
    /// Source to detector-plane distance (mm).
    pub dist_source_detector: f64,
    pub detector_rows: usize,
    pub detector_cols: usize,
    /// Pixel pitch (mm) as (row height, column width).
    pub detector_pixel_size: (f64, f64),
    /// Volume grid counts (X, Y, Z).
    pub volume_dims: (usize, usize, usize),
    /// Voxel pitch (mm) per axis.
    pub voxel_size: (f64, f64, f64),
    /// One orbit angle (radians, in `[0, 2π)`) per view.
    pub angles: Vec<f64>,
}

impl ConeBeamGeometry {
    pub fn new(
        dist_source_origin: f64,
        dist_source_detector: f64,
        detector_rows: usize,
        detector_cols: usize,
        detector_pixel_size: (f64, f64),
        volume_dims: (usize, usize, usize),
        voxel_size: (f64, f64, f64),
        angles: Vec<f64>,
    ) -> Result<Self> {
        if !(dist_source_origin > 0.0) {
            return Err(Error::Config(format!(
                "dist_source_origin must be positive, got {dist_source_origin}"
            )));
        }
        if !(dist_source_detector > dist_source_origin) {
            return Err(Error::Config(format!(
                "dist_source_detector ({dist_source_detector}) must exceed dist_source_origin ({dist_source_origin})"
            )));
        }
        if detector_rows == 0 || detector_cols == 0 {
            return Err(Error::Config("detector counts must be >= 1".into()));
        }
        let (x, y, z) = volume_dims;
        if x == 0 || y == 0 || z == 0 {
            return Err(Error::Config("volume dims must be >= 1".into()));
        }
        if !(detector_pixel_size.0 > 0.0 && detector_pixel_size.1 > 0.0) {
            return Err(Error::Config("detector pixel size must be positive".into()));
        }
        if !(voxel_size.0 > 0.0 && voxel_size.1 > 0.0 && voxel_size.2 > 0.0) {
            return Err(Error::Config("voxel size must be positive".into()));
        }
        if angles.is_empty() {
            return Err(Error::Config("at least one view angle required".into()));
        }
        const TAU: f64 = std::f64::consts::TAU;
        for (i, &a) in angles.iter().enumerate() {
            if !a.is_finite() || !(0.0..TAU).contains(&a) {
                return Err(Error::Config(format!(
                    "angle {i} = {a} outside [0, 2*pi)"
                )));
            }
        }
        Ok(Self {
            dist_source_origin,
            dist_source_detector,
            detector_rows,
            detector_cols,
            detector_pixel_size,
            volume_dims,
            voxel_size,
            angles,
        })
    }

    /// A geometry sized for `volume_dims`/`voxel_size` with source distance
    /// scaled so a 64 mm volume sees a 500 mm orbit, magnification 2, and a
    /// detector pitch that keeps one detector pixel per voxel at the
    /// isocenter. Covers objects inscribed in the volume sphere; widen the
    /// detector for objects filling the cube corners.
    pub fn standard(
        volume_dims: (usize, usize, usize),
        voxel_size: (f64, f64, f64),
        angles: Vec<f64>,
    ) -> Result<Self> {
        let extent = (volume_dims.0 as f64 * voxel_size.0)
            .max(volume_dims.1 as f64 * voxel_size.1)
            .max(volume_dims.2 as f64 * voxel_size.2);
        let dso = extent * 500.0 / 64.0;
        let dsd = 2.0 * dso;
        let rows = volume_dims.2;
        let cols = volume_dims.0.max(volume_dims.1);
        let pitch = 2.0 * voxel_size.0.max(voxel_size.1).max(voxel_size.2);
        Self::new(
            dso,
            dsd,
            rows,
            cols,
            (pitch, pitch),
            volume_dims,
            voxel_size,
            angles,
        )
    }

    /// The same scanner with a different orbit.
    pub fn with_angles(&self, angles: Vec<f64>) -> Result<Self> {
        Self::new(
            self.dist_source_origin,
            self.dist_source_detector,
            self.detector_rows,
            self.detector_cols,
            self.detector_pixel_size,
            self.volume_dims,
            self.voxel_size,
            angles,
        )
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Half-extent of the volume bounding box per axis (mm).
    pub fn volume_half_extent(&self) -> (f64, f64, f64) {
        (
            0.5 * self.volume_dims.0 as f64 * self.voxel_size.0,
            0.5 * self.volume_dims.1 as f64 * self.voxel_size.1,
            0.5 * self.volume_dims.2 as f64 * self.voxel_size.2,
        )
    }

    /// Source position for a view (mm).
    pub fn source_position(&self, view_index: usize) -> [f64; 3] {
        let a = self.angles[view_index];
        [
            self.dist_source_origin * a.cos(),
            self.dist_source_origin * a.sin(),
            0.0,
        ]
    }

    /// Orthonormal detector frame for a view: (col direction, row direction,
    /// central ray direction).
    pub fn detector_frame(&self, view_index: usize) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let a = self.angles[view_index];
        let e_u = [-a.sin(), a.cos(), 0.0];
        let e_v = [0.0, 0.0, 1.0];
        let e_w = [-a.cos(), -a.sin(), 0.0];
        (e_u, e_v, e_w)
    }

    /// Detector pixel center in world coordinates (mm).
    pub fn pixel_position(&self, view_index: usize, row: usize, col: usize) -> [f64; 3] {
        let src = self.source_position(view_index);
        let (e_u, e_v, e_w) = self.detector_frame(view_index);
        let u = (col as f64 - 0.5 * (self.detector_cols as f64 - 1.0)) * self.detector_pixel_size.1;
        let v = (row as f64 - 0.5 * (self.detector_rows as f64 - 1.0)) * self.detector_pixel_size.0;
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = src[k] + self.dist_source_detector * e_w[k] + u * e_u[k] + v * e_v[k];
        }
        p
    }

    /// Rays for every detector pixel of one view, row-major (column fastest).
    pub fn rays_for_view(&self, view_index: usize) -> Result<Vec<Ray>> {
        if view_index >= self.n_views() {
            return Err(Error::Index(format!(
                "view {view_index} >= {} views",
                self.n_views()
            )));
        }
        let src = self.source_position(view_index);
        let half = self.volume_half_extent();
        let mut rays = Vec::with_capacity(self.detector_rows * self.detector_cols);
        for row in 0..self.detector_rows {
            for col in 0..self.detector_cols {
                let pix = self.pixel_position(view_index, row, col);
                rays.push(Ray::through_points(src, pix, half));
            }
        }
        Ok(rays)
    }
}

/// One ray `r(s) = origin + s * direction` with the entry/exit path
/// parameters of the volume bounding box precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction.
    pub direction: [f64; 3],
    /// Entry parameter (mm); `s_near == s_far == 0` when the ray misses.
    pub s_near: f64,
    pub s_far: f64,
}

impl Ray {
    /// Ray from `origin` through `target`, clipped against the axis-aligned
    /// box `[-half, +half]` per axis.
    pub fn through_points(origin: [f64; 3], target: [f64; 3], half: (f64, f64, f64)) -> Self {
        let mut d = [
            target[0] - origin[0],
            target[1] - origin[1],
            target[2] - origin[2],
        ];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        for v in &mut d {
            *v /= norm;
        }
        let (s_near, s_far) = slab_clip(origin, d, [half.0, half.1, half.2]);
        Ray {
            origin,
            direction: d,
            s_near,
            s_far,
        }
    }

    pub fn point_at(&self, s: f64) -> [f64; 3] {
        [
            self.origin[0] + s * self.direction[0],
            self.origin[1] + s * self.direction[1],
            self.origin[2] + s * self.direction[2],
        ]
    }

    pub fn hits_volume(&self) -> bool {
        self.s_far > self.s_near
    }
}

/// Slab test against `[-half, half]^3`. Returns `(0, 0)` on a miss; entry is
/// clamped to 0 for origins inside the box.
fn slab_clip(origin: [f64; 3], dir: [f64; 3], half: [f64; 3]) -> (f64, f64) {
    let mut t0 = 0.0_f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-300 {
            if origin[k].abs() > half[k] {
                return (0.0, 0.0);
            }
            continue;
        }
        let inv = 1.0 / dir[k];
        let mut a = (-half[k] - origin[k]) * inv;
        let mut b = (half[k] - origin[k]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return (0.0, 0.0);
        }
    }
    (t0, t1)
}

/// `n_views` angles at uniform spacing `full_range / n_views`, starting at 0.
pub fn uniform_angles(n_views: usize, full_range: f64) -> Result<Vec<f64>> {
    if n_views == 0 {
        return Err(Error::Config("n_views must be >= 1".into()));
    }
    Ok((0..n_views)
        .map(|k| k as f64 * full_range / n_views as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_geometry(n_angles: usize) -> ConeBeamGeometry {
        ConeBeamGeometry::new(
            500.0,
            1000.0,
            65,
            65,
            (2.0, 2.0),
            (64, 64, 64),
            (1.0, 1.0, 1.0),
            uniform_angles(n_angles, std::f64::consts::TAU).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn central_ray_at_angle_zero_points_down_the_x_axis() {
        let geom = test_geometry(4);
        let rays = geom.rays_for_view(0).unwrap();
        // 65x65 detector: pixel (32, 32) is the exact center.
        let central = rays[32 * 65 + 32];
        assert_relative_eq!(central.direction[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(central.direction[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(central.direction[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn half_turn_negates_the_central_direction() {
        let geom = test_geometry(4);
        let r0 = geom.rays_for_view(0).unwrap()[32 * 65 + 32];
        let r2 = geom.rays_for_view(2).unwrap()[32 * 65 + 32]; // angle pi
        for k in 0..3 {
            assert_relative_eq!(r2.direction[k], -r0.direction[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn central_chord_equals_volume_extent() {
        // 64^3 volume, 1 mm voxels, source at 500 mm: the central ray crosses
        // the box from x=+32 to x=-32.
        let geom = test_geometry(1);
        let central = geom.rays_for_view(0).unwrap()[32 * 65 + 32];
        assert_relative_eq!(central.s_far - central.s_near, 64.0, epsilon = 1e-9);
        assert_relative_eq!(central.s_near, 468.0, epsilon = 1e-9);
    }

    #[test]
    fn ray_directions_are_unit_norm() {
        let geom = test_geometry(3);
        for ray in geom.rays_for_view(1).unwrap() {
            let n = ray
                .direction
                .iter()
                .map(|d| d * d)
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn entry_points_lie_on_the_box_boundary() {
        let geom = test_geometry(5);
        let half = geom.volume_half_extent();
        for ray in geom.rays_for_view(3).unwrap() {
            if !ray.hits_volume() {
                continue;
            }
            let p = ray.point_at(ray.s_near);
            let dist_to_face = (p[0].abs() - half.0)
                .abs()
                .min((p[1].abs() - half.1).abs())
                .min((p[2].abs() - half.2).abs());
            assert!(
                dist_to_face < 1e-6,
                "entry point {p:?} not on box boundary"
            );
        }
    }

    #[test]
    fn ray_grid_is_deterministic() {
        let geom = test_geometry(7);
        let a = geom.rays_for_view(4).unwrap();
        let b = geom.rays_for_view(4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn view_index_out_of_range_errors() {
        let geom = test_geometry(2);
        assert!(matches!(geom.rays_for_view(2), Err(Error::Index(_))));
    }

    #[test]
    fn uniform_angles_quarters() {
        let a = uniform_angles(4, std::f64::consts::TAU).unwrap();
        assert_eq!(a.len(), 4);
        assert_relative_eq!(a[0], 0.0);
        assert_relative_eq!(a[1], std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(a[2], std::f64::consts::PI);
        assert_relative_eq!(a[3], 3.0 * std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn uniform_angles_single_and_paper_counts() {
        assert_eq!(uniform_angles(1, std::f64::consts::TAU).unwrap(), vec![0.0]);
        let a36 = uniform_angles(36, std::f64::consts::TAU).unwrap();
        assert_eq!(a36.len(), 36);
        let ten_deg = 10.0_f64.to_radians();
        for w in a36.windows(2) {
            assert_relative_eq!(w[1] - w[0], ten_deg, epsilon = 1e-12);
        }
        assert!(matches!(
            uniform_angles(0, std::f64::consts::TAU),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn geometry_invariants_rejected() {
        let angles = vec![0.0];
        assert!(ConeBeamGeometry::new(
            500.0, 400.0, 4, 4, (1.0, 1.0), (4, 4, 4), (1.0, 1.0, 1.0), angles.clone()
        )
        .is_err());
        assert!(ConeBeamGeometry::new(
            500.0, 1000.0, 4, 4, (1.0, 1.0), (4, 4, 4), (1.0, 1.0, 1.0), vec![7.0]
        )
        .is_err());
        assert!(ConeBeamGeometry::new(
            500.0, 1000.0, 4, 4, (1.0, 1.0), (4, 4, 4), (1.0, 1.0, 1.0), vec![]
        )
        .is_err());
    }
}
