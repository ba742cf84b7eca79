//! Loss functions and quality metrics: L1, windowed structural similarity
//! in 2D and 3D, and isotropic total variation. Every loss comes in a
//! value-only and a value-plus-gradient flavor; gradients are analytic and
//! taken with respect to the first operand.
//!
//! The structural-similarity map follows the standard form: on each 11x11
//! Gaussian-weighted patch (sigma 1.5),
//!
//!   S = (2 mu1 mu2 + c1)(2 cov + c2) / ((mu1^2 + mu2^2 + c1)(var1 + var2 + c2))
//!
//! with c1 = (k1 L)^2, c2 = (k2 L)^2 for dynamic range L, and the score is
//! the mean of S over the valid (un-padded) map. The gradient is exact: the
//! chain through mu1, var1, and cov reduces to three correlation fields
//! scattered back through the transposed window operator, so it costs the
//! same as a handful of extra blurs. At a == b the gradient is identically
//! zero (the analytic terms cancel), which keeps optimizers stationary at
//! perfect agreement.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{extract_slice, Image, SliceAxis, Volume};

/// Stabilizer inside the total-variation square root.
pub const TV_EPSILON: f64 = 1e-8;

/// Windowed structural-similarity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Intensity span L; `None` takes the max of the reference operand.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

impl SsimConfig {
    /// Normalized 1D window taps; the 2D window is their outer product.
    fn window_1d(&self) -> Vec<f64> {
        let n = self.window_size;
        let c = (n as f64 - 1.0) / 2.0;
        let mut w: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.window_sigma * self.window_sigma)).exp())
            .collect();
        let sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= sum;
        }
        w
    }

    fn resolve_range(&self, reference: &[f64]) -> Result<f64> {
        match self.dynamic_range {
            Some(r) if r > 0.0 => Ok(r),
            Some(r) => Err(Error::Config(format!("dynamic range must be > 0, got {r}"))),
            None => Ok(reference
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(1e-12)),
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Mean absolute difference and its subgradient sign(a-b)/n (0 at ties).
pub fn l1_loss_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_same_len(a, b)?;
    let n = a.len() as f64;
    let mut loss = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "operands differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty operands".into()));
    }
    Ok(())
}

/// Structural similarity of two images (gradient-free).
pub fn ssim2d(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim2d_inner(a, b, cfg, false)?.0)
}

/// Structural similarity and d(ssim)/da, laid out like `a`.
pub fn ssim2d_grad(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim2d_inner(a, b, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim2d_inner(
    a: &Image,
    b: &Image,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "image dims differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let win = cfg.window_1d();
    let k = win.len();
    if a.width < k || a.height < k {
        return Err(Error::Config(format!(
            "image {}x{} smaller than the {k}x{k} window",
            a.width, a.height
        )));
    }
    let range = cfg.resolve_range(&b.data)?;
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);

    let (w, h) = (a.width, a.height);
    let mw = w - k + 1;
    let mh = h - k + 1;
    let p = (mw * mh) as f64;

    let sq_a: Vec<f64> = a.data.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.data.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();

    let mu1 = valid_corr(&a.data, w, h, &win);
    let mu2 = valid_corr(&b.data, w, h, &win);
    let m11 = valid_corr(&sq_a, w, h, &win);
    let m22 = valid_corr(&sq_b, w, h, &win);
    let m12 = valid_corr(&ab, w, h, &win);

    let n = mw * mh;
    let mut value = 0.0;
    let mut f1 = if want_grad { vec![0.0; n] } else { Vec::new() };
    let mut f2 = f1.clone();
    let mut f3 = f1.clone();

    for i in 0..n {
        let (u1, u2) = (mu1[i], mu2[i]);
        let var1 = m11[i] - u1 * u1;
        let var2 = m22[i] - u2 * u2;
        let cov = m12[i] - u1 * u2;
        let aa = 2.0 * u1 * u2 + c1;
        let bb = 2.0 * cov + c2;
        let cc = u1 * u1 + u2 * u2 + c1;
        let dd = var1 + var2 + c2;
        let inv_cd = 1.0 / (cc * dd);
        let s = aa * bb * inv_cd;
        value += s;
        if want_grad {
            let ds_dmu1 = 2.0 * u2 * bb * inv_cd - 2.0 * u1 * s / cc;
            let ds_dvar1 = -s / dd;
            let ds_dcov = 2.0 * aa * inv_cd;
            f1[i] = ds_dmu1 - 2.0 * u1 * ds_dvar1 - u2 * ds_dcov;
            f2[i] = 2.0 * ds_dvar1;
            f3[i] = ds_dcov;
        }
    }
    value /= p;

    if !want_grad {
        return Ok((value, None));
    }

    let t1 = valid_corr_transpose(&f1, mw, mh, &win, w, h);
    let t2 = valid_corr_transpose(&f2, mw, mh, &win, w, h);
    let t3 = valid_corr_transpose(&f3, mw, mh, &win, w, h);
    let grad = (0..w * h)
        .map(|j| (t1[j] + a.data[j] * t2[j] + b.data[j] * t3[j]) / p)
        .collect();
    Ok((value, Some(grad)))
}

/// Separable valid-mode correlation with an outer-product window; output is
/// (w-k+1) x (h-k+1).
fn valid_corr(data: &[f64], w: usize, h: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let mw = w - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; mw * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..mw {
            let mut acc = 0.0;
            for (t, &g) in win.iter().enumerate() {
                acc += g * row[x + t];
            }
            tmp[y * mw + x] = acc;
        }
    }
    // vertical pass
    let mh = h - k + 1;
    let mut out = vec![0.0; mw * mh];
    for y in 0..mh {
        for x in 0..mw {
            let mut acc = 0.0;
            for (t, &g) in win.iter().enumerate() {
                acc += g * tmp[(y + t) * mw + x];
            }
            out[y * mw + x] = acc;
        }
    }
    out
}

/// Adjoint of [`valid_corr`]: scatters a valid-mode map back to full image
/// extent through the same window.
fn valid_corr_transpose(map: &[f64], mw: usize, mh: usize, win: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = win.len();
    debug_assert_eq!(mw + k - 1, w);
    debug_assert_eq!(mh + k - 1, h);
    // vertical scatter: (mw x mh) -> (mw x h)
    let mut tmp = vec![0.0; mw * h];
    for y in 0..mh {
        for (t, &g) in win.iter().enumerate() {
            let dst = &mut tmp[(y + t) * mw..(y + t + 1) * mw];
            let src = &map[y * mw..(y + 1) * mw];
            for x in 0..mw {
                dst[x] += g * src[x];
            }
        }
    }
    // horizontal scatter: (mw x h) -> (w x h)
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let src = &tmp[y * mw..(y + 1) * mw];
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..mw {
            let v = src[x];
            for (t, &g) in win.iter().enumerate() {
                dst[x + t] += g * v;
            }
        }
    }
    out
}

/// Volume-level structural similarity: the mean of the per-axis slice-SSIM
/// means over the three orthogonal slicing planes.
pub fn ssim3d(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim3d_inner(a, b, cfg, false)?.0)
}

/// [`ssim3d`] plus d(ssim)/da laid out like the volume data.
pub fn ssim3d_grad(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim3d_inner(a, b, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ssim3d_inner(
    a: &Volume,
    b: &Volume,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "volume dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let dims = a.dims();
    let k = cfg.window_size;
    if dims.0 < k || dims.1 < k || dims.2 < k {
        return Err(Error::Config(format!(
            "volume {dims:?} has an axis smaller than the {k}x{k} window"
        )));
    }
    // The dynamic range must be shared by every slice, not derived per
    // slice, or planes of a dim reference region would be scored on a
    // different scale.
    let shared = SsimConfig {
        dynamic_range: Some(cfg.resolve_range(b.data())?),
        ..cfg.clone()
    };

    let mut total = 0.0;
    let mut grad = if want_grad {
        Some(vec![0.0; a.len()])
    } else {
        None
    };
    for axis in SliceAxis::ALL {
        let n_slices = axis.extent(dims);
        // Slices are independent; order of the reduction below is fixed by
        // index, so the result does not depend on thread count.
        let per_slice: Vec<(f64, Option<Vec<f64>>)> = (0..n_slices)
            .into_par_iter()
            .map(|i| {
                let sa = extract_slice(a, axis, i);
                let sb = extract_slice(b, axis, i);
                ssim2d_inner(&sa.image, &sb.image, &shared, want_grad)
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / (3.0 * n_slices as f64);
        for (i, (value, slice_grad)) in per_slice.into_iter().enumerate() {
            total += value * scale;
            if let (Some(g), Some(sg)) = (grad.as_mut(), slice_grad) {
                scatter_slice_grad(g, a, axis, i, &sg, scale);
            }
        }
    }
    Ok((total, grad))
}

/// Adds `scale * slice_grad` into the volume-shaped gradient at the voxels
/// the slice was extracted from.
fn scatter_slice_grad(
    grad: &mut [f64],
    vol: &Volume,
    axis: SliceAxis,
    index: usize,
    slice_grad: &[f64],
    scale: f64,
) {
    let (w, h) = axis.plane_dims(vol.dims());
    for v in 0..h {
        for u in 0..w {
            let g = slice_grad[v * w + u] * scale;
            let idx = match axis {
                SliceAxis::Axial => vol.index(u, v, index),
                SliceAxis::Coronal => vol.index(u, index, v),
                SliceAxis::Sagittal => vol.index(index, u, v),
            };
            grad[idx] += g;
        }
    }
}

/// Isotropic total variation with forward differences (zero at the far
/// boundary): sum over voxels of sqrt(dx^2 + dy^2 + dz^2 + eps). A constant
/// volume scores exactly N*sqrt(eps).
pub fn tv3d(v: &Volume) -> f64 {
    tv3d_inner(v, false).0
}

pub fn tv3d_grad(v: &Volume) -> (f64, Vec<f64>) {
    let (value, g) = tv3d_inner(v, true);
    (value, g.expect("gradient requested"))
}

fn tv3d_inner(vol: &Volume, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (nx, ny, nz) = vol.dims();
    let data = vol.data();
    let mut value = 0.0;
    let mut grad = if want_grad {
        Some(vec![0.0; data.len()])
    } else {
        None
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = vol.index(x, y, z);
                let v = data[i];
                let dx = if x + 1 < nx { data[i + 1] - v } else { 0.0 };
                let dy = if y + 1 < ny { data[i + nx] - v } else { 0.0 };
                let dz = if z + 1 < nz { data[i + nx * ny] - v } else { 0.0 };
                let t = (dx * dx + dy * dy + dz * dz + TV_EPSILON).sqrt();
                value += t;
                if let Some(g) = grad.as_mut() {
                    let inv = 1.0 / t;
                    g[i] -= (dx + dy + dz) * inv;
                    if x + 1 < nx {
                        g[i + 1] += dx * inv;
                    }
                    if y + 1 < ny {
                        g[i + nx] += dy * inv;
                    }
                    if z + 1 < nz {
                        g[i + nx * ny] += dz * inv;
                    }
                }
            }
        }
    }
    (value, grad)
}

/// 2D total variation via a one-voxel-thick volume; used by the denoising
/// fixer.
pub fn tv2d_grad(img: &Image) -> (f64, Vec<f64>) {
    let vol = Volume::new(
        (img.width, img.height, 1),
        (1.0, 1.0, 1.0),
        img.data.clone(),
    )
    .expect("image buffer matches its dims");
    tv3d_grad(&vol)
}
