//! Photon-counting noise for simulated projections.
//!
//! Projection values are treated as line integrals of attenuation: a pixel
//! p receives an expected photon count of `photons * exp(-p)`. The count
//! is Poisson-drawn, clamped to at least one photon so the log transform
//! stays finite, and converted back with `ln(photons / count)`.
//!
//! Draws walk the stack in storage order (view, row, column) from one
//! seeded generator, so the result depends only on the stack, the photon
//! budget, and the seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::volume::ProjectionStack;

pub fn add_photon_noise(stack: &ProjectionStack, photons: f64, seed: u64) -> Result<ProjectionStack> {
    if !photons.is_finite() || photons < 1.0 {
        return Err(Error::Config(format!(
            "photon budget must be at least 1, got {photons}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = stack.clone();
    for p in out.data.iter_mut() {
        let mean = (photons * (-*p).exp()).max(1e-300);
        let count = Poisson::new(mean)
            .map_err(|e| Error::Numeric(format!("photon mean {mean} invalid: {e}")))?
            .sample(&mut rng)
            .max(1.0);
        *p = (photons / count).ln();
    }
    Ok(out)
}
