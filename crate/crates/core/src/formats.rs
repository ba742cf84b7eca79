//! On-disk containers. All binary formats are little-endian and carry an
//! 8-byte ASCII magic.
//!
//! Volume ("TOMOVOL1"): 32-byte header = magic, u32 X, Y, Z, u32 dtype tag
//! (1 = f32), 8 reserved zero bytes; then f32 samples row-major, x fastest.
//! Spacing is not stored; it comes from the geometry config.
//!
//! Projections ("TOMOPRJ1"): magic, u32 n_views, rows, cols; f32 angles;
//! f32 pixel data per view, row-major, column fastest.
//!
//! Cloud checkpoint ("TOMOGSC1"): magic, u32 kernel count; 11 f32 per
//! kernel: density, position xyz, log-scales xyz, quaternion wxyz.
//!
//! Training pairs ("TOMOPAIR"): magic, u32 record count; per record u32
//! width, height, f32 corrupted slice, f32 clean slice, u16 source kind,
//! u16 view count, f32 fit fraction, u64 seed.
//!
//! Since every payload is stored as f32, write -> read -> write round-trips
//! are byte-identical even though the in-memory types are f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write as IoWrite};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::volume::{Image, ProjectionStack, Volume};

pub const VOLUME_MAGIC: &[u8; 8] = b"TOMOVOL1";
pub const PROJECTION_MAGIC: &[u8; 8] = b"TOMOPRJ1";
pub const CLOUD_MAGIC: &[u8; 8] = b"TOMOGSC1";
pub const PAIR_MAGIC: &[u8; 8] = b"TOMOPAIR";

/// Pair record source tags.
pub const PAIR_KIND_VOXEL: u16 = 0;
pub const PAIR_KIND_CLOUD: u16 = 1;

/// Refuse to allocate for headers claiming more elements than this.
const MAX_ELEMENTS: u64 = 1 << 31;

// ---------------------------------------------------------------------------
// little-endian primitives with path-tagged errors

struct FileReader<'p> {
    inner: BufReader<File>,
    path: &'p Path,
}

impl<'p> FileReader<'p> {
    fn open(path: &'p Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: BufReader::new(file),
            path,
        })
    }

    fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.path, "unexpected end of file")
            } else {
                Error::io(self.path, e)
            }
        })
    }

    fn magic(&mut self, expect: &[u8; 8]) -> Result<()> {
        let mut m = [0u8; 8];
        self.bytes(&mut m)?;
        if &m != expect {
            return Err(Error::format(
                self.path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(expect)
                ),
            ));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.bytes(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f32(&mut self) -> Result<f64> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(f32::from_le_bytes(b) as f64)
    }

    /// Reads `n` f32 samples, widening to f64.
    fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 4];
        self.bytes(&mut raw)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.path, "trailing bytes after payload")),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }

    fn checked_len(&self, elems: &[u64]) -> Result<usize> {
        let mut total = 1u64;
        for &e in elems {
            total = total
                .checked_mul(e)
                .filter(|&t| t <= MAX_ELEMENTS)
                .ok_or_else(|| Error::format(self.path, "implausible element count in header"))?;
        }
        Ok(total as usize)
    }
}

struct FileWriter<'p> {
    inner: BufWriter<File>,
    path: &'p Path,
}

impl<'p> FileWriter<'p> {
    fn create(path: &'p Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: BufWriter::new(file),
            path,
        })
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(self.path, e))
    }

    fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32(&mut self, v: f64) -> Result<()> {
        self.bytes(&(v as f32).to_le_bytes())
    }

    fn f32_slice(&mut self, vs: &[f64]) -> Result<()> {
        let mut raw = Vec::with_capacity(vs.len() * 4);
        for &v in vs {
            raw.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.bytes(&raw)
    }

    fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(self.path, e))
    }
}

fn dim_u32(path: &Path, n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(path, format!("dimension {n} exceeds u32")))
}

// ---------------------------------------------------------------------------
// volumes

pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let path = path.as_ref();
    let (x, y, z) = vol.dims();
    let mut w = FileWriter::create(path)?;
    w.bytes(VOLUME_MAGIC)?;
    w.u32(dim_u32(path, x)?)?;
    w.u32(dim_u32(path, y)?)?;
    w.u32(dim_u32(path, z)?)?;
    w.u32(1)?; // dtype tag: f32
    w.bytes(&[0u8; 8])?; // reserved, pads the header to 32 bytes
    w.f32_slice(vol.data())?;
    w.finish()
}

/// Reads a volume file; spacing defaults to unit voxels since the container
/// does not record it (see [`Volume::with_spacing`]).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut r = FileReader::open(path)?;
    r.magic(VOLUME_MAGIC)?;
    let x = r.u32()? as u64;
    let y = r.u32()? as u64;
    let z = r.u32()? as u64;
    let dtype = r.u32()?;
    if dtype != 1 {
        return Err(Error::format(path, format!("unsupported dtype tag {dtype}")));
    }
    let mut reserved = [0u8; 8];
    r.bytes(&mut reserved)?;
    let n = r.checked_len(&[x, y, z])?;
    let data = r.f32_vec(n)?;
    r.expect_eof()?;
    Volume::new((x as usize, y as usize, z as usize), (1.0, 1.0, 1.0), data)
}

// ---------------------------------------------------------------------------
// projections

pub fn write_projections(path: impl AsRef<Path>, stack: &ProjectionStack) -> Result<()> {
    let path = path.as_ref();
    let mut w = FileWriter::create(path)?;
    w.bytes(PROJECTION_MAGIC)?;
    w.u32(dim_u32(path, stack.n_views())?)?;
    w.u32(dim_u32(path, stack.rows)?)?;
    w.u32(dim_u32(path, stack.cols)?)?;
    w.f32_slice(&stack.angles)?;
    w.f32_slice(&stack.data)?;
    w.finish()
}

pub fn read_projections(path: impl AsRef<Path>) -> Result<ProjectionStack> {
    let path = path.as_ref();
    let mut r = FileReader::open(path)?;
    r.magic(PROJECTION_MAGIC)?;
    let n_views = r.u32()? as u64;
    let rows = r.u32()? as u64;
    let cols = r.u32()? as u64;
    let _ = r.checked_len(&[n_views, rows, cols])?;
    let angles = r.f32_vec(n_views as usize)?;
    let data = r.f32_vec((n_views * rows * cols) as usize)?;
    r.expect_eof()?;
    ProjectionStack::new(rows as usize, cols as usize, angles, data)
}

// ---------------------------------------------------------------------------
// gaussian cloud checkpoints

/// One splatting kernel as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRecord {
    pub density: f64,
    pub position: [f64; 3],
    pub log_scales: [f64; 3],
    /// Unit quaternion, w first.
    pub rotation: [f64; 4],
}

pub fn write_cloud(path: impl AsRef<Path>, kernels: &[KernelRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = FileWriter::create(path)?;
    w.bytes(CLOUD_MAGIC)?;
    w.u32(dim_u32(path, kernels.len())?)?;
    for k in kernels {
        w.f32(k.density)?;
        w.f32_slice(&k.position)?;
        w.f32_slice(&k.log_scales)?;
        w.f32_slice(&k.rotation)?;
    }
    w.finish()
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<Vec<KernelRecord>> {
    let path = path.as_ref();
    let mut r = FileReader::open(path)?;
    r.magic(CLOUD_MAGIC)?;
    let m = r.u32()? as u64;
    let _ = r.checked_len(&[m, 11])?;
    let mut kernels = Vec::with_capacity(m as usize);
    for _ in 0..m {
        let density = r.f32()?;
        let p = r.f32_vec(3)?;
        let s = r.f32_vec(3)?;
        let q = r.f32_vec(4)?;
        kernels.push(KernelRecord {
            density,
            position: [p[0], p[1], p[2]],
            log_scales: [s[0], s[1], s[2]],
            rotation: [q[0], q[1], q[2], q[3]],
        });
    }
    r.expect_eof()?;
    Ok(kernels)
}

// ---------------------------------------------------------------------------
// training pairs

/// One (corrupted, clean) slice pair with enough metadata to regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub width: usize,
    pub height: usize,
    pub corrupted: Vec<f64>,
    pub clean: Vec<f64>,
    /// [`PAIR_KIND_VOXEL`] or [`PAIR_KIND_CLOUD`].
    pub kind: u16,
    pub n_views: u16,
    pub fit_fraction: f64,
    pub seed: u64,
}

pub fn write_pairs(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = FileWriter::create(path)?;
    w.bytes(PAIR_MAGIC)?;
    w.u32(dim_u32(path, records.len())?)?;
    for rec in records {
        let n = rec.width * rec.height;
        if rec.corrupted.len() != n || rec.clean.len() != n {
            return Err(Error::Shape(format!(
                "pair record slices ({}, {}) do not match {}x{}",
                rec.corrupted.len(),
                rec.clean.len(),
                rec.width,
                rec.height
            )));
        }
        w.u32(dim_u32(path, rec.width)?)?;
        w.u32(dim_u32(path, rec.height)?)?;
        w.f32_slice(&rec.corrupted)?;
        w.f32_slice(&rec.clean)?;
        w.u16(rec.kind)?;
        w.u16(rec.n_views)?;
        w.f32(rec.fit_fraction)?;
        w.u64(rec.seed)?;
    }
    w.finish()
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let mut r = FileReader::open(path)?;
    r.magic(PAIR_MAGIC)?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let width = r.u32()? as u64;
        let height = r.u32()? as u64;
        let n = r.checked_len(&[width, height])?;
        let corrupted = r.f32_vec(n)?;
        let clean = r.f32_vec(n)?;
        let kind = r.u16()?;
        let n_views = r.u16()?;
        let fit_fraction = r.f32()?;
        let seed = r.u64()?;
        records.push(PairRecord {
            width: width as usize,
            height: height as usize,
            corrupted,
            clean,
            kind,
            n_views,
            fit_fraction,
            seed,
        });
    }
    r.expect_eof()?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// PNG slice export

/// Writes `img` as 16-bit grayscale PNG, windowed to its own min/max, and
/// records the window in a `<path>.txt` sidecar so the scaling is invertible.
pub fn write_png16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let (min, max) = img.min_max();
    let span = max - min;
    let mut pixels = Vec::with_capacity(img.data.len());
    for &v in &img.data {
        let t = if span > 0.0 { (v - min) / span } else { 0.0 };
        pixels.push((t.clamp(0.0, 1.0) * 65535.0).round() as u16);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        img.width as u32,
        img.height as u32,
        pixels,
    )
    .ok_or_else(|| Error::format(path, "pixel buffer does not match image dims"))?;
    buf.save(path)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))?;
    let sidecar = sidecar_path(path);
    let mut f = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    writeln!(f, "min {min}\nmax {max}").map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

pub fn sidecar_path(png_path: &Path) -> std::path::PathBuf {
    let mut s = png_path.as_os_str().to_owned();
    s.push(".txt");
    std::path::PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// geometry config

/// Scanner description as stored in a TOML config. Angles are not part of
/// the file; view counts are a per-run choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub schema_version: u32,
    pub source: SourceConfig,
    pub detector: DetectorConfig,
    pub volume: VolumeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub dist_source_origin: f64,
    pub dist_source_detector: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub rows: usize,
    pub cols: usize,
    /// (row pitch, column pitch), mm.
    pub pixel_size: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

pub const GEOMETRY_SCHEMA_VERSION: u32 = 1;

impl GeometryConfig {
    pub fn from_geometry(geom: &ConeBeamGeometry) -> Self {
        Self {
            schema_version: GEOMETRY_SCHEMA_VERSION,
            source: SourceConfig {
                dist_source_origin: geom.dist_source_origin,
                dist_source_detector: geom.dist_source_detector,
            },
            detector: DetectorConfig {
                rows: geom.detector_rows,
                cols: geom.detector_cols,
                pixel_size: [geom.detector_pixel_size.0, geom.detector_pixel_size.1],
            },
            volume: VolumeConfig {
                dims: [geom.volume_dims.0, geom.volume_dims.1, geom.volume_dims.2],
                spacing: [geom.voxel_size.0, geom.voxel_size.1, geom.voxel_size.2],
            },
        }
    }

    pub fn to_geometry(&self, angles: Vec<f64>) -> Result<ConeBeamGeometry> {
        ConeBeamGeometry::new(
            self.source.dist_source_origin,
            self.source.dist_source_detector,
            self.detector.rows,
            self.detector.cols,
            (self.detector.pixel_size[0], self.detector.pixel_size[1]),
            (self.volume.dims[0], self.volume.dims[1], self.volume.dims[2]),
            (
                self.volume.spacing[0],
                self.volume.spacing[1],
                self.volume.spacing[2],
            ),
            angles,
        )
    }

    pub fn volume_dims(&self) -> (usize, usize, usize) {
        (self.volume.dims[0], self.volume.dims[1], self.volume.dims[2])
    }

    pub fn volume_spacing(&self) -> (f64, f64, f64) {
        (
            self.volume.spacing[0],
            self.volume.spacing[1],
            self.volume.spacing[2],
        )
    }
}

pub fn read_geometry_config(path: impl AsRef<Path>) -> Result<GeometryConfig> {
    let cfg: GeometryConfig = read_toml(path.as_ref())?;
    if cfg.schema_version != GEOMETRY_SCHEMA_VERSION {
        return Err(Error::format(
            path.as_ref(),
            format!(
                "unsupported schema_version {} (expected {GEOMETRY_SCHEMA_VERSION})",
                cfg.schema_version
            ),
        ));
    }
    Ok(cfg)
}

pub fn read_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_toml<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string_pretty(value)
        .map_err(|e| Error::format(path, format!("toml encode failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_angles;

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    fn sample_volume() -> Volume {
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.731).sin()).collect();
        Volume::new((3, 4, 5), (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn volume_roundtrip_bytes_identical() {
        let (_d, path) = tmp("v.tvol");
        let vol = sample_volume();
        write_volume(&path, &vol).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(first.len(), 32 + 60 * 4);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        write_volume(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn volume_header_layout() {
        let (_d, path) = tmp("v.tvol");
        write_volume(&path, &sample_volume()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..8], b"TOMOVOL1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(&bytes[24..32], &[0u8; 8]);
    }

    #[test]
    fn volume_bad_magic_rejected() {
        let (_d, path) = tmp("v.tvol");
        std::fs::write(&path, b"NOTAVOL!xxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn volume_truncation_rejected() {
        let (_d, path) = tmp("v.tvol");
        write_volume(&path, &sample_volume()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn volume_trailing_bytes_rejected() {
        let (_d, path) = tmp("v.tvol");
        write_volume(&path, &sample_volume()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn volume_unknown_dtype_rejected() {
        let (_d, path) = tmp("v.tvol");
        write_volume(&path, &sample_volume()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn projection_roundtrip_bytes_identical() {
        let (_d, path) = tmp("p.tprj");
        let angles = uniform_angles(5, std::f64::consts::TAU).unwrap();
        let data: Vec<f64> = (0..5 * 2 * 3).map(|i| i as f64 * 0.25).collect();
        let stack = ProjectionStack::new(2, 3, angles, data).unwrap();
        write_projections(&path, &stack).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_projections(&path).unwrap();
        assert_eq!((back.n_views(), back.rows, back.cols), (5, 2, 3));
        write_projections(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn cloud_roundtrip_bytes_identical() {
        let (_d, path) = tmp("c.tgsc");
        // values chosen exactly representable in f32 so the widened
        // read-back compares equal
        let kernels = vec![
            KernelRecord {
                density: 0.5,
                position: [1.0, -2.0, 3.0],
                log_scales: [0.125, 0.25, 0.375],
                rotation: [1.0, 0.0, 0.0, 0.0],
            },
            KernelRecord {
                density: 0.25,
                position: [0.0, 0.5, -0.5],
                log_scales: [-0.75, 0.0, 0.75],
                rotation: [0.5, 0.5, 0.5, 0.5],
            },
        ];
        write_cloud(&path, &kernels).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(first.len(), 12 + 2 * 11 * 4);
        let back = read_cloud(&path).unwrap();
        assert_eq!(back, kernels);
        write_cloud(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn pair_roundtrip_bytes_identical() {
        let (_d, path) = tmp("pairs.tpar");
        let records = vec![
            PairRecord {
                width: 2,
                height: 3,
                corrupted: vec![0.5; 6],
                clean: vec![0.25; 6],
                kind: PAIR_KIND_VOXEL,
                n_views: 12,
                fit_fraction: 0.25,
                seed: 7,
            },
            PairRecord {
                width: 4,
                height: 1,
                corrupted: vec![1.0, 2.0, 3.0, 4.0],
                clean: vec![4.0, 3.0, 2.0, 1.0],
                kind: PAIR_KIND_CLOUD,
                n_views: 36,
                fit_fraction: 1.0,
                seed: u64::MAX,
            },
        ];
        write_pairs(&path, &records).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_pairs(&path).unwrap();
        assert_eq!(back, records);
        write_pairs(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn png16_quantization_and_sidecar() {
        let (_d, path) = tmp("s.png");
        let img = Image::new(2, 2, vec![-1.0, 0.0, 1.0, 3.0]).unwrap();
        write_png16(&path, &img).unwrap();
        let loaded = image::open(&path).unwrap().into_luma16();
        // window [-1, 3]: -1 -> 0, 0 -> 16384, 1 -> 32768, 3 -> 65535
        assert_eq!(loaded.get_pixel(0, 0).0[0], 0);
        assert_eq!(loaded.get_pixel(1, 0).0[0], 16384);
        assert_eq!(loaded.get_pixel(0, 1).0[0], 32768);
        assert_eq!(loaded.get_pixel(1, 1).0[0], 65535);
        let sidecar = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(sidecar, "min -1\nmax 3\n");
    }

    #[test]
    fn png16_constant_image_is_black() {
        let (_d, path) = tmp("c.png");
        write_png16(&path, &Image::new(2, 1, vec![5.0, 5.0]).unwrap()).unwrap();
        let loaded = image::open(&path).unwrap().into_luma16();
        assert_eq!(loaded.get_pixel(0, 0).0[0], 0);
        assert_eq!(loaded.get_pixel(1, 0).0[0], 0);
    }

    #[test]
    fn geometry_config_roundtrip() {
        let (_d, path) = tmp("geom.toml");
        let geom = ConeBeamGeometry::standard((32, 32, 16), (1.0, 1.0, 2.0), vec![0.0]).unwrap();
        let cfg = GeometryConfig::from_geometry(&geom);
        write_toml(&path, &cfg).unwrap();
        let back = read_geometry_config(&path).unwrap();
        assert_eq!(back, cfg);
        let rebuilt = back.to_geometry(vec![0.0]).unwrap();
        assert_eq!(rebuilt.volume_dims, geom.volume_dims);
        assert_eq!(rebuilt.dist_source_origin, geom.dist_source_origin);
    }

    #[test]
    fn geometry_config_rejects_unknown_keys() {
        let (_d, path) = tmp("geom.toml");
        let geom = ConeBeamGeometry::standard((32, 32, 32), (1.0, 1.0, 1.0), vec![0.0]).unwrap();
        write_toml(&path, &GeometryConfig::from_geometry(&geom)).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("\nmystery_knob = 3\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_geometry_config(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn geometry_config_rejects_wrong_schema_version() {
        let (_d, path) = tmp("geom.toml");
        let geom = ConeBeamGeometry::standard((32, 32, 32), (1.0, 1.0, 1.0), vec![0.0]).unwrap();
        let mut cfg = GeometryConfig::from_geometry(&geom);
        cfg.schema_version = 99;
        write_toml(&path, &cfg).unwrap();
        assert!(matches!(
            read_geometry_config(&path),
            Err(Error::Format { .. })
        ));
    }
}
