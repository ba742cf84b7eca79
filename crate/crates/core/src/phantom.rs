//! Synthetic test volumes.
//!
//! [`shepp_logan`] evaluates the canonical ten-ellipsoid 3D Shepp-Logan
//! head (the modified contrast variant, additive densities) at voxel
//! centers, so the skull shell reads 1.0, the interior 0.2, and the
//! background 0. [`random_ellipsoids`] builds seeded random additive
//! mixtures clamped to [0, 1] for when one deterministic head is not
//! variety enough.
//!
//! Ellipsoids live in normalized [-1, 1] coordinates spanning the volume
//! extent, so the same anatomy appears at any grid resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Volume;

/// One additive ellipsoid: semi-axes, center, rotation about z, density.
#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    axes: [f64; 3],
    center: [f64; 3],
    /// Rotation of the (x, y) cross-section, radians.
    phi: f64,
    density: f64,
}

impl Ellipsoid {
    fn contains(&self, q: [f64; 3]) -> bool {
        let dx = q[0] - self.center[0];
        let dy = q[1] - self.center[1];
        let dz = q[2] - self.center[2];
        let (s, c) = self.phi.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let m = (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) + (dz / self.axes[2]).powi(2);
        m <= 1.0
    }
}

/// The modified 3D Shepp-Logan ellipsoid table.
fn shepp_logan_table() -> [Ellipsoid; 10] {
    let deg = std::f64::consts::PI / 180.0;
    let e = |axes: [f64; 3], center: [f64; 3], phi_deg: f64, density: f64| Ellipsoid {
        axes,
        center,
        phi: phi_deg * deg,
        density,
    };
    [
        e([0.69, 0.92, 0.81], [0.0, 0.0, 0.0], 0.0, 1.0),
        e([0.6624, 0.874, 0.78], [0.0, -0.0184, 0.0], 0.0, -0.8),
        e([0.11, 0.31, 0.22], [0.22, 0.0, 0.0], -18.0, -0.2),
        e([0.16, 0.41, 0.28], [-0.22, 0.0, 0.0], 18.0, -0.2),
        e([0.21, 0.25, 0.41], [0.0, 0.35, -0.15], 0.0, 0.1),
        e([0.046, 0.046, 0.05], [0.0, 0.1, 0.25], 0.0, 0.1),
        e([0.046, 0.046, 0.05], [0.0, -0.1, 0.25], 0.0, 0.1),
        e([0.046, 0.023, 0.05], [-0.08, -0.605, 0.0], 0.0, 0.1),
        e([0.023, 0.023, 0.02], [0.0, -0.606, 0.0], 0.0, 0.1),
        e([0.023, 0.046, 0.02], [0.06, -0.605, 0.0], 0.0, 0.1),
    ]
}

fn check_dims(dims: (usize, usize, usize)) -> Result<()> {
    if dims.0 < 16 || dims.1 < 16 || dims.2 < 16 {
        return Err(Error::Config(format!(
            "phantom dims must be at least 16 per axis, got {dims:?}"
        )));
    }
    Ok(())
}

fn rasterize(ellipsoids: &[Ellipsoid], dims: (usize, usize, usize), spacing: (f64, f64, f64), clamp01: bool) -> Volume {
    let mut vol = Volume::zeros(dims, spacing);
    let half = (
        0.5 * dims.0 as f64 * spacing.0,
        0.5 * dims.1 as f64 * spacing.1,
        0.5 * dims.2 as f64 * spacing.2,
    );
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let c = vol.voxel_center(x, y, z);
                let q = [c[0] / half.0, c[1] / half.1, c[2] / half.2];
                let mut acc = 0.0;
                for e in ellipsoids {
                    if e.contains(q) {
                        acc += e.density;
                    }
                }
                if clamp01 {
                    acc = acc.clamp(0.0, 1.0);
                } else {
                    // additive f64 sums can leave -1e-17 dust where
                    // densities cancel; attenuation is nonnegative
                    acc = acc.max(0.0);
                }
                vol.set(x, y, z, acc);
            }
        }
    }
    vol
}

/// Canonical 3D Shepp-Logan head at voxel-center resolution.
pub fn shepp_logan(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Volume> {
    check_dims(dims)?;
    Ok(rasterize(&shepp_logan_table(), dims, spacing, false))
}

/// Seeded mixture of 5 to 12 random ellipsoids, densities clamped to
/// [0, 1]. The first ellipsoid is always a large positive envelope so the
/// volume is never empty.
pub fn random_ellipsoids(dims: (usize, usize, usize), spacing: (f64, f64, f64), seed: u64) -> Result<Volume> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(5..=12usize);
    let mut ellipsoids = Vec::with_capacity(count);
    ellipsoids.push(Ellipsoid {
        axes: [
            rng.gen_range(0.55..0.8),
            rng.gen_range(0.55..0.8),
            rng.gen_range(0.55..0.8),
        ],
        center: [0.0, 0.0, 0.0],
        phi: rng.gen_range(0.0..std::f64::consts::PI),
        density: rng.gen_range(0.4..0.8),
    });
    for _ in 1..count {
        ellipsoids.push(Ellipsoid {
            axes: [
                rng.gen_range(0.06..0.4),
                rng.gen_range(0.06..0.4),
                rng.gen_range(0.06..0.4),
            ],
            center: [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ],
            phi: rng.gen_range(0.0..std::f64::consts::PI),
            density: rng.gen_range(-0.3..0.5),
        });
    }
    Ok(rasterize(&ellipsoids, dims, spacing, true))
}
