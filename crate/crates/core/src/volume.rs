//! Dense volumes, 2D images, slicing, resampling, and basic quality metrics.
//!
//! Every buffer in this crate is row-major with x fastest:
//! `Volume` indexes as `data[(z * Y + y) * X + x]`, `Image` as
//! `data[y * width + x]`. Slices keep the fastest in-plane axis of the
//! parent volume as their width.

use crate::error::{Error, Result};

/// Dense 3D scalar density grid (attenuation, mm^-1).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), data: Vec<f64>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume data length {} != {}x{}x{}",
                data.len(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::Config("voxel spacing must be positive".into()));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Rebrands the physical voxel pitch; grid data is untouched. Volume
    /// files store no spacing, so readers attach it from the geometry config.
    pub fn with_spacing(mut self, spacing: (f64, f64, f64)) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.0 + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// World coordinate of a voxel center, volume centered at the origin.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            (x as f64 + 0.5) * self.spacing.0 - 0.5 * self.dims.0 as f64 * self.spacing.0,
            (y as f64 + 0.5) * self.spacing.1 - 0.5 * self.dims.1 as f64 * self.spacing.1,
            (z as f64 + 0.5) * self.spacing.2 - 0.5 * self.dims.2 as f64 * self.spacing.2,
        ]
    }

    /// Zeroes negative densities in place.
    pub fn clamp_nonneg(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    pub fn stats(&self) -> VolumeStats {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        VolumeStats {
            min,
            max,
            mean: sum / self.data.len().max(1) as f64,
        }
    }

    /// Trilinear resample to `new_dims` on half-pixel-centered index
    /// coordinates, linearly extrapolating at the borders like
    /// [`resample_bilinear`]. Spacing rescales so the physical extent is
    /// preserved.
    pub fn resample_trilinear(&self, new_dims: (usize, usize, usize)) -> Result<Volume> {
        if new_dims.0 == 0 || new_dims.1 == 0 || new_dims.2 == 0 {
            return Err(Error::Config("resample dims must be >= 1".into()));
        }
        if new_dims == self.dims {
            return Ok(self.clone());
        }
        let (nx, ny, nz) = new_dims;
        let (ox, oy, oz) = self.dims;
        let mut out = vec![0.0; nx * ny * nz];
        let fx = ox as f64 / nx as f64;
        let fy = oy as f64 / ny as f64;
        let fz = oz as f64 / nz as f64;
        for z in 0..nz {
            let (z0, tz) = sample_coord((z as f64 + 0.5) * fz - 0.5, oz);
            for y in 0..ny {
                let (y0, ty) = sample_coord((y as f64 + 0.5) * fy - 0.5, oy);
                for x in 0..nx {
                    let (x0, tx) = sample_coord((x as f64 + 0.5) * fx - 0.5, ox);
                    let x1 = (x0 + 1).min(ox - 1);
                    let y1 = (y0 + 1).min(oy - 1);
                    let z1 = (z0 + 1).min(oz - 1);
                    let c00 = lerp(self.at(x0, y0, z0), self.at(x1, y0, z0), tx);
                    let c10 = lerp(self.at(x0, y1, z0), self.at(x1, y1, z0), tx);
                    let c01 = lerp(self.at(x0, y0, z1), self.at(x1, y0, z1), tx);
                    let c11 = lerp(self.at(x0, y1, z1), self.at(x1, y1, z1), tx);
                    out[(z * ny + y) * nx + x] = lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz);
                }
            }
        }
        Volume::new(
            new_dims,
            (
                self.spacing.0 * ox as f64 / nx as f64,
                self.spacing.1 * oy as f64 / ny as f64,
                self.spacing.2 * oz as f64 / nz as f64,
            ),
            out,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl VolumeStats {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Plain 2D buffer, row-major, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image data length {} != {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
        }
        (min, max)
    }
}

/// Slicing planes of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceAxis {
    /// Fixed z; slice dims (X, Y).
    Axial,
    /// Fixed y; slice dims (X, Z).
    Coronal,
    /// Fixed x; slice dims (Y, Z).
    Sagittal,
}

impl SliceAxis {
    pub const ALL: [SliceAxis; 3] = [SliceAxis::Axial, SliceAxis::Sagittal, SliceAxis::Coronal];

    /// Number of slices this axis yields from a volume of `dims`.
    pub fn extent(&self, dims: (usize, usize, usize)) -> usize {
        match self {
            SliceAxis::Axial => dims.2,
            SliceAxis::Coronal => dims.1,
            SliceAxis::Sagittal => dims.0,
        }
    }

    /// In-plane (width, height) of a slice from a volume of `dims`.
    pub fn plane_dims(&self, dims: (usize, usize, usize)) -> (usize, usize) {
        match self {
            SliceAxis::Axial => (dims.0, dims.1),
            SliceAxis::Coronal => (dims.0, dims.2),
            SliceAxis::Sagittal => (dims.1, dims.2),
        }
    }
}

/// One extracted plane of a volume, carrying its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub image: Image,
    pub axis: SliceAxis,
    pub index: usize,
}

impl SliceImage {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn data(&self) -> &[f64] {
        &self.image.data
    }
}

/// N log-domain projection images with their view angles.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub rows: usize,
    pub cols: usize,
    pub angles: Vec<f64>,
    /// Layout `[view][row][col]`, column fastest.
    pub data: Vec<f64>,
}

impl ProjectionStack {
    pub fn new(rows: usize, cols: usize, angles: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * angles.len() {
            return Err(Error::Shape(format!(
                "projection data length {} != {} views x {rows} x {cols}",
                data.len(),
                angles.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            angles,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, angles: Vec<f64>) -> Self {
        let n = rows * cols * angles.len();
        Self {
            rows,
            cols,
            angles,
            data: vec![0.0; n],
        }
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn view(&self, i: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.rows * self.cols;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn view_image(&self, i: usize) -> Image {
        Image {
            width: self.cols,
            height: self.rows,
            data: self.view(i).to_vec(),
        }
    }
}

/// All slices of `vol` along `axis`, in ascending index order.
pub fn extract_slices(vol: &Volume, axis: SliceAxis) -> Vec<SliceImage> {
    (0..axis.extent(vol.dims()))
        .map(|i| extract_slice(vol, axis, i))
        .collect()
}

pub fn extract_slice(vol: &Volume, axis: SliceAxis, index: usize) -> SliceImage {
    let (w, h) = axis.plane_dims(vol.dims());
    let mut data = Vec::with_capacity(w * h);
    match axis {
        SliceAxis::Axial => {
            for y in 0..h {
                for x in 0..w {
                    data.push(vol.at(x, y, index));
                }
            }
        }
        SliceAxis::Coronal => {
            for z in 0..h {
                for x in 0..w {
                    data.push(vol.at(x, index, z));
                }
            }
        }
        SliceAxis::Sagittal => {
            for z in 0..h {
                for y in 0..w {
                    data.push(vol.at(index, y, z));
                }
            }
        }
    }
    SliceImage {
        image: Image {
            width: w,
            height: h,
            data,
        },
        axis,
        index,
    }
}

/// Reassembles slices into a volume; inverse of [`extract_slices`] when the
/// slices arrive in extraction order.
pub fn stack_slices(slices: &[SliceImage], spacing: (f64, f64, f64)) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero slices".into()))?;
    let axis = first.axis;
    let (w, h) = (first.width(), first.height());
    for s in slices {
        if s.axis != axis || s.width() != w || s.height() != h {
            return Err(Error::Shape(format!(
                "inconsistent slice {}x{} ({:?}) in stack of {w}x{h} ({axis:?})",
                s.width(),
                s.height(),
                s.axis
            )));
        }
    }
    let n = slices.len();
    let dims = match axis {
        SliceAxis::Axial => (w, h, n),
        SliceAxis::Coronal => (w, n, h),
        SliceAxis::Sagittal => (n, w, h),
    };
    let mut vol = Volume::zeros(dims, spacing);
    for (k, s) in slices.iter().enumerate() {
        match axis {
            SliceAxis::Axial => {
                for y in 0..h {
                    for x in 0..w {
                        vol.set(x, y, k, s.image.at(x, y));
                    }
                }
            }
            SliceAxis::Coronal => {
                for z in 0..h {
                    for x in 0..w {
                        vol.set(x, k, z, s.image.at(x, z));
                    }
                }
            }
            SliceAxis::Sagittal => {
                for z in 0..h {
                    for y in 0..w {
                        vol.set(k, y, z, s.image.at(y, z));
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Fractional sample position for half-pixel-centered interpolation.
/// Returns the left sample index (clamped so index+1 is addressable) and the
/// offset from it; offsets outside [0, 1] linearly extrapolate at borders,
/// which keeps smooth ramps exact under up/down-sampling round trips.
#[inline]
fn sample_coord(pos: f64, extent: usize) -> (usize, f64) {
    if extent == 1 {
        return (0, 0.0);
    }
    let i = pos.floor() as isize;
    let i = i.clamp(0, extent as isize - 2) as usize;
    (i, pos - i as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Separable bilinear resample on half-pixel-centered coordinates.
pub fn resample_bilinear_image(img: &Image, new_dims: (usize, usize)) -> Result<Image> {
    let (nw, nh) = new_dims;
    if nw == 0 || nh == 0 {
        return Err(Error::Config("resample dims must be >= 1".into()));
    }
    // Pass 1: resample rows to the new width.
    let fx = img.width as f64 / nw as f64;
    let mut tmp = vec![0.0; nw * img.height];
    for y in 0..img.height {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        for x in 0..nw {
            let (i, t) = sample_coord((x as f64 + 0.5) * fx - 0.5, img.width);
            let j = (i + 1).min(img.width - 1);
            tmp[y * nw + x] = lerp(row[i], row[j], t);
        }
    }
    // Pass 2: resample columns to the new height.
    let fy = img.height as f64 / nh as f64;
    let mut out = vec![0.0; nw * nh];
    for y in 0..nh {
        let (i, t) = sample_coord((y as f64 + 0.5) * fy - 0.5, img.height);
        let j = (i + 1).min(img.height - 1);
        for x in 0..nw {
            out[y * nw + x] = lerp(tmp[i * nw + x], tmp[j * nw + x], t);
        }
    }
    Image::new(nw, nh, out)
}

/// [`resample_bilinear_image`] preserving slice provenance.
pub fn resample_bilinear(slice: &SliceImage, new_dims: (usize, usize)) -> Result<SliceImage> {
    Ok(SliceImage {
        image: resample_bilinear_image(&slice.image, new_dims)?,
        axis: slice.axis,
        index: slice.index,
    })
}

/// Peak signal-to-noise ratio in dB with the peak taken from the reference
/// operand `b`. Identical inputs report `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "psnr operands differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape("psnr of empty buffers".into()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn psnr_volumes(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "psnr volumes differ in dims: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    psnr(a.data(), b.data())
}
