//! Pluggable slice repair.
//!
//! Reconstruction engines hand intermediate slices to a [`SliceFixer`]
//! together with two orthogonal conditioning projections and a text
//! prompt, and get back a repaired slice of the same size. The built-ins
//! are [`IdentityFixer`] (pass-through), [`TvDenoiseFixer`] (classical TV
//! smoothing), and [`OracleFixer`] (ground truth plus seeded noise, for
//! benchmarking the surrounding optimization without any learned model).
//! [`ExternalFixer`] attaches an arbitrary subprocess over a framed pipe
//! protocol, which is where a real learned model plugs in.

mod external;

pub use external::{serve_echo, EchoMode, ExternalFixer};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::objectives::tv2d_grad;
use crate::volume::{extract_slice, resample_bilinear, Image, ProjectionStack, SliceAxis, SliceImage, Volume};

/// One slice repair request: the slice to fix, two orthogonal conditioning
/// projections, and an opaque prompt. Provenance (axis, index) rides on
/// the slice itself.
#[derive(Debug, Clone)]
pub struct FixerRequest {
    pub slice: SliceImage,
    pub cond_a: Image,
    pub cond_b: Image,
    pub prompt: String,
}

impl FixerRequest {
    pub fn validate(&self) -> Result<()> {
        if self.cond_a.width != self.cond_b.width || self.cond_a.height != self.cond_b.height {
            return Err(Error::Shape(format!(
                "conditioning projections disagree: {}x{} vs {}x{}",
                self.cond_a.width, self.cond_a.height, self.cond_b.width, self.cond_b.height
            )));
        }
        if !self.slice.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "slice {:?}/{} contains non-finite values",
                self.slice.axis, self.slice.index
            )));
        }
        Ok(())
    }
}

/// A repaired slice, same dims and provenance as the request.
#[derive(Debug, Clone)]
pub struct FixerResponse {
    pub slice: SliceImage,
}

/// The repair contract. Implementations must be deterministic per
/// instance and preserve slice dimensions.
pub trait SliceFixer {
    fn fix_slice(&mut self, req: &FixerRequest) -> Result<FixerResponse>;
}

fn check_response_dims(req: &FixerRequest, out: &SliceImage) -> Result<()> {
    if out.width() != req.slice.width() || out.height() != req.slice.height() {
        return Err(Error::Fixer(format!(
            "fixer changed slice {:?}/{} dims from {}x{} to {}x{}",
            req.slice.axis,
            req.slice.index,
            req.slice.width(),
            req.slice.height(),
            out.width(),
            out.height()
        )));
    }
    if !out.data().iter().all(|v| v.is_finite()) {
        return Err(Error::Fixer(format!(
            "fixer returned non-finite values for slice {:?}/{}",
            req.slice.axis, req.slice.index
        )));
    }
    Ok(())
}

/// Returns the slice unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFixer;

impl SliceFixer for IdentityFixer {
    fn fix_slice(&mut self, req: &FixerRequest) -> Result<FixerResponse> {
        req.validate()?;
        Ok(FixerResponse {
            slice: req.slice.clone(),
        })
    }
}

/// Classical smoother: a few steps of normalized-gradient descent on the
/// slice's total variation. Each step moves the image by `step_scale`
/// times the input's value range along the unit TV gradient, mirroring
/// the TV phase of the ASD-POCS solver. The step size is fixed once from
/// the input, so flat slices come back untouched.
#[derive(Debug, Clone, Copy)]
pub struct TvDenoiseFixer {
    pub steps: usize,
    /// Per-step move length as a fraction of the input range.
    pub step_scale: f64,
}

impl Default for TvDenoiseFixer {
    fn default() -> Self {
        TvDenoiseFixer {
            steps: 30,
            step_scale: 0.1,
        }
    }
}

impl SliceFixer for TvDenoiseFixer {
    fn fix_slice(&mut self, req: &FixerRequest) -> Result<FixerResponse> {
        req.validate()?;
        let (min, max) = req.slice.image.min_max();
        let step = self.step_scale * (max - min);
        let mut img = req.slice.image.clone();
        if step > 0.0 {
            for _ in 0..self.steps {
                let (_, grad) = tv2d_grad(&img);
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm <= 1e-12 {
                    break;
                }
                let scale = step / norm;
                for (v, g) in img.data.iter_mut().zip(&grad) {
                    *v -= scale * g;
                }
            }
        }
        let slice = SliceImage {
            image: img,
            axis: req.slice.axis,
            index: req.slice.index,
        };
        check_response_dims(req, &slice)?;
        Ok(FixerResponse { slice })
    }
}

/// Benchmark fixer that answers with the ground-truth slice, optionally
/// corrupted by seeded Gaussian noise. Noise depends only on (seed, axis,
/// index), so call order does not matter.
#[derive(Debug, Clone)]
pub struct OracleFixer {
    ground_truth: Volume,
    noise_sigma: f64,
    seed: u64,
}

impl OracleFixer {
    pub fn new(ground_truth: Volume, noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise sigma must be finite and nonnegative, got {noise_sigma}"
            )));
        }
        Ok(OracleFixer {
            ground_truth,
            noise_sigma,
            seed,
        })
    }

    fn slice_rng(&self, axis: SliceAxis, index: usize) -> ChaCha8Rng {
        // splitmix-style mixing so each slice gets an independent stream
        let mut h = self
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(axis_code(axis) as u64)
            .wrapping_mul(0xbf58476d1ce4e5b9)
            .wrapping_add(index as u64);
        h ^= h >> 31;
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl SliceFixer for OracleFixer {
    fn fix_slice(&mut self, req: &FixerRequest) -> Result<FixerResponse> {
        req.validate()?;
        let dims = self.ground_truth.dims();
        let (w, h) = req.slice.axis.plane_dims(dims);
        let extent = req.slice.axis.extent(dims);
        if req.slice.index >= extent {
            return Err(Error::Index(format!(
                "slice {:?}/{} outside ground truth ({extent} slices)",
                req.slice.axis, req.slice.index
            )));
        }
        let gt = extract_slice(&self.ground_truth, req.slice.axis, req.slice.index);
        let mut out = if (w, h) == (req.slice.width(), req.slice.height()) {
            gt
        } else {
            resample_bilinear(&gt, (req.slice.width(), req.slice.height()))?
        };
        if self.noise_sigma > 0.0 {
            let mut rng = self.slice_rng(req.slice.axis, req.slice.index);
            for v in out.image.data.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += self.noise_sigma * n;
            }
        }
        check_response_dims(req, &out)?;
        Ok(FixerResponse { slice: out })
    }
}

/// Stable wire encoding of a slice axis.
pub fn axis_code(axis: SliceAxis) -> u32 {
    match axis {
        SliceAxis::Axial => 0,
        SliceAxis::Coronal => 1,
        SliceAxis::Sagittal => 2,
    }
}

pub fn axis_from_code(code: u32) -> Result<SliceAxis> {
    match code {
        0 => Ok(SliceAxis::Axial),
        1 => Ok(SliceAxis::Coronal),
        2 => Ok(SliceAxis::Sagittal),
        other => Err(Error::Format {
            path: "<fixer stream>".into(),
            reason: format!("unknown slice axis code {other}"),
        }),
    }
}

/// Rounds values to f32 precision in place. The subprocess wire format
/// carries f32 samples, so pipelines snap request payloads before building
/// a [`FixerRequest`]; that keeps in-process fixers and subprocess fixers
/// bit-interchangeable.
pub fn snap_to_f32(values: &mut [f64]) {
    for v in values.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Picks the two measured views whose angles sit closest to 0 and pi/2
/// (ties broken toward the lower index); these become the orthogonal
/// conditioning projections.
pub fn select_conditioning(stack: &ProjectionStack) -> Result<(usize, usize)> {
    if stack.n_views() < 2 {
        return Err(Error::Config(format!(
            "conditioning needs at least 2 views, stack has {}",
            stack.n_views()
        )));
    }
    let circ_dist = |a: f64, target: f64| -> f64 {
        let tau = std::f64::consts::TAU;
        let d = (a - target).rem_euclid(tau);
        d.min(tau - d)
    };
    let closest = |target: f64| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &a) in stack.angles.iter().enumerate() {
            let d = circ_dist(a, target);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };
    Ok((closest(0.0), closest(std::f64::consts::FRAC_PI_2)))
}
