//! Paired clean/corrupted slice datasets for training slice fixers.
//!
//! A corrupted slice is an axial cut of a deliberately underfit
//! reconstruction: a dense projection stack is synthesized from a ground
//! truth volume, a sparse (and possibly angularly clustered) subset of
//! views is sampled, and a representation is optimized for a fraction of
//! the usual iteration budget. The matching clean slice is an exact
//! extract of the ground truth, so the pair teaches exactly the artifact
//! pattern the optimizer leaves behind. Recipes balance voxel-field and
//! Gaussian-cloud sources one to one so neither family dominates.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffnr::{plain_nr_optimize, DiffNrConfig};
use crate::error::{Error, Result};
use crate::formats::{read_toml, PairRecord, PAIR_KIND_CLOUD, PAIR_KIND_VOXEL};
use crate::geometry::{uniform_angles, ConeBeamGeometry};
use crate::projector::{forward_project, MarchConfig};
use crate::representations::{
    default_kernel_count, init_cloud_from_volume, CloudLearningRates, TrainableCloud, VoxelField,
};
use crate::solvers::{sart_reconstruct, SartConfig};
use crate::volume::{extract_slice, ProjectionStack, SliceAxis, Volume};

/// Which representation family reconstructs a recipe entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationKind {
    VoxelField,
    GaussianCloud,
}

impl RepresentationKind {
    /// Tag stored in pair records.
    pub fn code(self) -> u16 {
        match self {
            RepresentationKind::VoxelField => PAIR_KIND_VOXEL,
            RepresentationKind::GaussianCloud => PAIR_KIND_CLOUD,
        }
    }
}

/// Angular distribution of the sampled view subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// Evenly strided indices across the dense orbit.
    Uniform,
    /// Views clustered around a random direction, drawn without
    /// replacement from a wrapped Gaussian.
    Nonuniform,
}

/// One reconstruction job inside a recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeEntry {
    pub kind: RepresentationKind,
    /// Views sampled from the dense stack.
    pub n_views: usize,
    pub view_mode: ViewMode,
    /// Fraction of the base iteration budget, in [0.25, 0.5] or exactly
    /// 1.0 (fully fit control entries).
    pub fit_fraction: f64,
    pub seed: u64,
}

pub const RECIPE_SCHEMA_VERSION: u32 = 1;

fn default_voxel_lr() -> f64 {
    0.01
}

/// Dataset recipe as stored in a TOML config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationRecipe {
    pub schema_version: u32,
    /// Views in the synthesized dense orbit every entry samples from.
    pub dense_views: usize,
    /// Iteration budget at fit fraction 1.0.
    pub base_iters: usize,
    /// Kernels per cloud entry; derived from the volume size when absent.
    #[serde(default)]
    pub cloud_kernels: Option<usize>,
    #[serde(default = "default_voxel_lr")]
    pub voxel_lr: f64,
    pub entries: Vec<RecipeEntry>,
}

impl CurationRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.dense_views == 0 {
            return Err(Error::Config("dense_views must be >= 1".into()));
        }
        if self.base_iters == 0 {
            return Err(Error::Config("base_iters must be >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::Config("recipe has no entries".into()));
        }
        if self.cloud_kernels == Some(0) {
            return Err(Error::Config("cloud_kernels must be >= 1".into()));
        }
        if !(self.voxel_lr.is_finite() && self.voxel_lr > 0.0) {
            return Err(Error::Config(format!(
                "voxel_lr must be finite and positive, got {}",
                self.voxel_lr
            )));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if e.n_views == 0 || e.n_views > self.dense_views {
                return Err(Error::Config(format!(
                    "entry {i}: n_views must be in 1..={}, got {}",
                    self.dense_views, e.n_views
                )));
            }
            if e.n_views > u16::MAX as usize {
                return Err(Error::Config(format!(
                    "entry {i}: n_views {} exceeds the pair-record limit {}",
                    e.n_views,
                    u16::MAX
                )));
            }
            let f = e.fit_fraction;
            if !((0.25..=0.5).contains(&f) || f == 1.0) {
                return Err(Error::Config(format!(
                    "entry {i}: fit_fraction must be in [0.25, 0.5] or 1.0, got {f}"
                )));
            }
        }
        let n_voxel = self
            .entries
            .iter()
            .filter(|e| e.kind == RepresentationKind::VoxelField)
            .count();
        let n_cloud = self.entries.len() - n_voxel;
        if n_voxel != n_cloud {
            return Err(Error::Config(format!(
                "recipe must balance representation kinds 1:1, got {n_voxel} voxel-field and {n_cloud} gaussian-cloud entries"
            )));
        }
        Ok(())
    }
}

/// Reads and validates a recipe TOML file.
pub fn read_recipe(path: impl AsRef<Path>) -> Result<CurationRecipe> {
    let recipe: CurationRecipe = read_toml(path.as_ref())?;
    if recipe.schema_version != RECIPE_SCHEMA_VERSION {
        return Err(Error::format(
            path.as_ref(),
            format!(
                "unsupported schema_version {} (expected {RECIPE_SCHEMA_VERSION})",
                recipe.schema_version
            ),
        ));
    }
    recipe.validate()?;
    Ok(recipe)
}

/// Projects `vol` over a full orbit of `k_views` uniformly spaced views.
pub fn synthesize_dense(
    vol: &Volume,
    geom_template: &ConeBeamGeometry,
    k_views: usize,
) -> Result<ProjectionStack> {
    let geom = geom_template.with_angles(uniform_angles(k_views, TAU)?)?;
    let march = MarchConfig::for_geometry(&geom);
    forward_project(vol, &geom, &march)
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Index of the unused angle closest to `theta` (ties go to the lower
/// index). `used` marks spent indices.
fn nearest_unused(angles: &[f64], used: &[bool], theta: f64) -> usize {
    let mut best = usize::MAX;
    let mut best_d = f64::INFINITY;
    for (i, &a) in angles.iter().enumerate() {
        if used[i] {
            continue;
        }
        let d = circular_distance(a, theta);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Draws `n` views from `stack` without replacement.
///
/// Uniform mode strides evenly through the orbit; nonuniform mode picks a
/// random cluster center, then repeatedly draws an angle from a wrapped
/// Gaussian around it (spread redrawn per sample from [0.2, 0.7] rad) and
/// takes the nearest view not already chosen. Both modes are deterministic
/// under `seed`, and the result keeps views in ascending index order.
pub fn sample_views(
    stack: &ProjectionStack,
    n: usize,
    mode: ViewMode,
    seed: u64,
) -> Result<ProjectionStack> {
    let k = stack.n_views();
    if n == 0 {
        return Err(Error::Config("cannot sample zero views".into()));
    }
    if n > k {
        return Err(Error::Config(format!(
            "cannot sample {n} views from a {k}-view stack"
        )));
    }
    let indices: Vec<usize> = match mode {
        ViewMode::Uniform => (0..n).map(|i| i * k / n).collect(),
        ViewMode::Nonuniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let center: f64 = rng.gen_range(0.0..TAU);
            let mut used = vec![false; k];
            let mut picked = Vec::with_capacity(n);
            for _ in 0..n {
                let sigma: f64 = rng.gen_range(0.2..0.7);
                let z: f64 = rng.sample(StandardNormal);
                let theta = (center + sigma * z).rem_euclid(TAU);
                let idx = nearest_unused(&stack.angles, &used, theta);
                used[idx] = true;
                picked.push(idx);
            }
            picked.sort_unstable();
            picked
        }
    };
    let n_pix = stack.rows * stack.cols;
    let mut angles = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * n_pix);
    for &i in &indices {
        angles.push(stack.angles[i]);
        data.extend_from_slice(stack.view(i));
    }
    ProjectionStack::new(stack.rows, stack.cols, angles, data)
}

fn reconstruct_entry(
    gt: &Volume,
    geom_template: &ConeBeamGeometry,
    dense: &ProjectionStack,
    recipe: &CurationRecipe,
    entry: &RecipeEntry,
) -> Result<Volume> {
    let dims = gt.dims();
    let spacing = gt.spacing();
    let sub = sample_views(dense, entry.n_views, entry.view_mode, entry.seed)?;
    let geom = geom_template.with_angles(sub.angles.clone())?;
    let iters = ((recipe.base_iters as f64 * entry.fit_fraction).round() as usize).max(1);
    match entry.kind {
        RepresentationKind::VoxelField => {
            let march = MarchConfig::for_geometry(&geom);
            let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, recipe.voxel_lr);
            let cfg = DiffNrConfig::for_voxel(iters, dims, spacing, entry.seed);
            Ok(plain_nr_optimize(&mut rep, &sub, &geom, &cfg, None)?.volume)
        }
        RepresentationKind::GaussianCloud => {
            let kernels = recipe
                .cloud_kernels
                .unwrap_or_else(|| default_kernel_count(dims));
            // a short classical pass seeds kernel placement so the cloud
            // does not spend its budget finding the support
            let coarse_cfg = SartConfig {
                n_iterations: 3,
                ..SartConfig::for_geometry(&geom)
            };
            let coarse = sart_reconstruct(&sub, &geom, &coarse_cfg)?;
            let cloud = init_cloud_from_volume(&coarse, kernels, entry.seed)?;
            let mut rep = TrainableCloud::new(cloud, CloudLearningRates::default())?;
            let cfg = DiffNrConfig::for_cloud(iters, dims, spacing, entry.seed);
            Ok(plain_nr_optimize(&mut rep, &sub, &geom, &cfg, None)?.volume)
        }
    }
}

/// Runs every recipe entry and emits one (corrupted, clean) pair per
/// axial slice, tagged with enough metadata to regenerate it. Entries are
/// independent and run in a worker pool; records keep recipe order.
pub fn generate_pairs(
    gt: &Volume,
    geom_template: &ConeBeamGeometry,
    recipe: &CurationRecipe,
) -> Result<Vec<PairRecord>> {
    recipe.validate()?;
    let dims = gt.dims();
    let dense = synthesize_dense(gt, geom_template, recipe.dense_views)?;

    let per_entry: Vec<Vec<PairRecord>> = recipe
        .entries
        .par_iter()
        .map(|entry| {
            let recon = reconstruct_entry(gt, geom_template, &dense, recipe, entry)?;
            let records = (0..dims.2)
                .map(|z| {
                    let corrupted = extract_slice(&recon, SliceAxis::Axial, z);
                    let clean = extract_slice(gt, SliceAxis::Axial, z);
                    PairRecord {
                        width: dims.0,
                        height: dims.1,
                        corrupted: corrupted.image.data,
                        clean: clean.image.data,
                        kind: entry.kind.code(),
                        n_views: entry.n_views as u16,
                        fit_fraction: entry.fit_fraction,
                        seed: entry.seed,
                    }
                })
                .collect();
            Ok(records)
        })
        .collect::<Result<_>>()?;

    Ok(per_entry.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::psnr;

    // off-center lumps of different sizes so a sparse orbit genuinely
    // underdetermines the volume
    fn blob(dims: (usize, usize, usize)) -> Volume {
        let mut vol = Volume::zeros(dims, (1.0, 1.0, 1.0));
        let half = (
            dims.0 as f64 / 2.0,
            dims.1 as f64 / 2.0,
            dims.2 as f64 / 2.0,
        );
        let lumps = [
            (-0.30, -0.20, 0.10, 0.55, 1.0),
            (0.35, 0.25, -0.15, 0.30, 0.7),
            (0.10, -0.35, 0.30, 0.15, 0.9),
        ];
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    let [cx, cy, cz] = vol.voxel_center(x, y, z);
                    let (nx, ny, nz) = (cx / half.0, cy / half.1, cz / half.2);
                    let mut v = 0.0;
                    for &(lx, ly, lz, r, amp) in &lumps {
                        let r2 = (nx - lx).powi(2) + (ny - ly).powi(2) + (nz - lz).powi(2);
                        v += amp * (-4.0 * r2 / (r * r)).exp();
                    }
                    vol.set(x, y, z, v);
                }
            }
        }
        for v in vol.data_mut() {
            *v = *v as f32 as f64;
        }
        vol
    }

    fn geometry(dims: (usize, usize, usize)) -> ConeBeamGeometry {
        ConeBeamGeometry::standard(dims, (1.0, 1.0, 1.0), vec![0.0]).unwrap()
    }

    fn entry(
        kind: RepresentationKind,
        n_views: usize,
        fit_fraction: f64,
        seed: u64,
    ) -> RecipeEntry {
        RecipeEntry {
            kind,
            n_views,
            view_mode: ViewMode::Uniform,
            fit_fraction,
            seed,
        }
    }

    fn volume_psnr_of(records: &[PairRecord]) -> f64 {
        let corrupted: Vec<f64> = records.iter().flat_map(|r| r.corrupted.clone()).collect();
        let clean: Vec<f64> = records.iter().flat_map(|r| r.clean.clone()).collect();
        psnr(&corrupted, &clean).unwrap()
    }

    #[test]
    fn dense_synthesis_matches_direct_projection() {
        let dims = (12, 12, 12);
        let vol = blob(dims);
        let geom = geometry(dims);
        let dense = synthesize_dense(&vol, &geom, 8).unwrap();
        assert_eq!(dense.n_views(), 8);
        for (i, &a) in dense.angles.iter().enumerate() {
            assert_eq!(a, i as f64 * TAU / 8.0);
        }

        let direct_geom = geom.with_angles(uniform_angles(8, TAU).unwrap()).unwrap();
        let march = MarchConfig::for_geometry(&direct_geom);
        let direct = forward_project(&vol, &direct_geom, &march).unwrap();
        assert_eq!(dense.data, direct.data);
    }

    #[test]
    fn sampled_views_are_bit_equal_to_dense_views() {
        let dims = (12, 12, 12);
        let dense = synthesize_dense(&blob(dims), &geometry(dims), 16).unwrap();

        let sub = sample_views(&dense, 4, ViewMode::Uniform, 0).unwrap();
        for (j, &i) in [0usize, 4, 8, 12].iter().enumerate() {
            assert_eq!(sub.angles[j], dense.angles[i]);
            assert_eq!(sub.view(j), dense.view(i));
        }

        let all = sample_views(&dense, 16, ViewMode::Uniform, 0).unwrap();
        assert_eq!(all.data, dense.data);
        assert_eq!(all.angles, dense.angles);

        let clustered = sample_views(&dense, 5, ViewMode::Nonuniform, 9).unwrap();
        for (j, &a) in clustered.angles.iter().enumerate() {
            let i = dense.angles.iter().position(|&b| b == a).unwrap();
            assert_eq!(clustered.view(j), dense.view(i));
        }
    }

    #[test]
    fn uniform_sampling_strides_evenly() {
        let angles = uniform_angles(36, TAU).unwrap();
        let stack = ProjectionStack::zeros(2, 2, angles);
        let sub = sample_views(&stack, 12, ViewMode::Uniform, 0).unwrap();
        let expected: Vec<f64> = (0..12).map(|i| (3 * i) as f64 * TAU / 36.0).collect();
        assert_eq!(sub.angles, expected);
    }

    #[test]
    fn nonuniform_sampling_is_deterministic_and_clustered() {
        let angles = uniform_angles(36, TAU).unwrap();
        let stack = ProjectionStack::zeros(2, 2, angles);

        // circular variance 1 - |mean unit vector|: lower means tighter
        let circ_var = |angles: &[f64]| {
            let (s, c) = angles
                .iter()
                .fold((0.0, 0.0), |(s, c), &a| (s + a.sin(), c + a.cos()));
            let n = angles.len() as f64;
            1.0 - ((s / n).powi(2) + (c / n).powi(2)).sqrt()
        };
        let uniform = sample_views(&stack, 8, ViewMode::Uniform, 0).unwrap();
        let uniform_var = circ_var(&uniform.angles);

        for seed in 0..100 {
            let a = sample_views(&stack, 8, ViewMode::Nonuniform, seed).unwrap();
            let b = sample_views(&stack, 8, ViewMode::Nonuniform, seed).unwrap();
            assert_eq!(a.angles, b.angles);
            assert_eq!(a.data, b.data);
            let mut seen = a.angles.clone();
            seen.dedup();
            assert_eq!(seen.len(), 8, "seed {seed} repeated a view");
            assert!(
                circ_var(&a.angles) < uniform_var,
                "seed {seed}: clustered spread {} not below uniform {uniform_var}",
                circ_var(&a.angles)
            );
        }
    }

    #[test]
    fn oversampling_and_empty_requests_rejected() {
        let stack = ProjectionStack::zeros(2, 2, uniform_angles(6, TAU).unwrap());
        assert!(matches!(
            sample_views(&stack, 7, ViewMode::Uniform, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_views(&stack, 0, ViewMode::Nonuniform, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn recipe_validation_rejects_bad_fields() {
        let base = CurationRecipe {
            schema_version: RECIPE_SCHEMA_VERSION,
            dense_views: 16,
            base_iters: 10,
            cloud_kernels: None,
            voxel_lr: 0.01,
            entries: vec![
                entry(RepresentationKind::VoxelField, 4, 0.25, 1),
                entry(RepresentationKind::GaussianCloud, 4, 0.25, 2),
            ],
        };
        assert!(base.validate().is_ok());

        let mut bad = base.clone();
        bad.entries[0].fit_fraction = 0.7;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = base.clone();
        bad.entries[1].kind = RepresentationKind::VoxelField;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = base.clone();
        bad.entries[0].n_views = 17;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = base.clone();
        bad.entries.clear();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));

        let mut bad = base;
        bad.voxel_lr = 0.0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn recipe_toml_roundtrip() {
        let recipe = CurationRecipe {
            schema_version: RECIPE_SCHEMA_VERSION,
            dense_views: 36,
            base_iters: 200,
            cloud_kernels: Some(500),
            voxel_lr: 0.01,
            entries: vec![
                entry(RepresentationKind::VoxelField, 12, 0.25, 1),
                RecipeEntry {
                    kind: RepresentationKind::GaussianCloud,
                    n_views: 12,
                    view_mode: ViewMode::Nonuniform,
                    fit_fraction: 1.0,
                    seed: 2,
                },
            ],
        };
        let text = toml::to_string_pretty(&recipe).unwrap();
        let back: CurationRecipe = toml::from_str(&text).unwrap();
        assert_eq!(back, recipe);

        let err = toml::from_str::<CurationRecipe>(&format!("{text}\nextra_key = 1"));
        assert!(err.is_err());
    }

    #[test]
    fn pairs_are_balanced_tagged_and_reproducible() {
        let dims = (12, 12, 12);
        let gt = blob(dims);
        let geom = geometry(dims);
        let recipe = CurationRecipe {
            schema_version: RECIPE_SCHEMA_VERSION,
            dense_views: 8,
            base_iters: 20,
            cloud_kernels: Some(200),
            voxel_lr: 0.01,
            entries: vec![
                entry(RepresentationKind::VoxelField, 4, 0.5, 11),
                entry(RepresentationKind::GaussianCloud, 4, 0.5, 12),
            ],
        };

        let records = generate_pairs(&gt, &geom, &recipe).unwrap();
        assert_eq!(records.len(), 2 * dims.2);

        let n_voxel = records.iter().filter(|r| r.kind == PAIR_KIND_VOXEL).count();
        assert_eq!(n_voxel * 2, records.len());

        for (i, r) in records.iter().enumerate() {
            assert_eq!((r.width, r.height), (dims.0, dims.1));
            assert_eq!(r.n_views, 4);
            assert_eq!(r.fit_fraction, 0.5);
            let entry = &recipe.entries[i / dims.2];
            assert_eq!(r.kind, entry.kind.code());
            assert_eq!(r.seed, entry.seed);
            let clean = extract_slice(&gt, SliceAxis::Axial, i % dims.2);
            assert_eq!(r.clean, clean.image.data);
        }

        let again = generate_pairs(&gt, &geom, &recipe).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn underfit_pairs_score_below_fully_fit_pairs() {
        let dims = (16, 16, 16);
        let gt = blob(dims);
        let geom = geometry(dims);
        let recipe = CurationRecipe {
            schema_version: RECIPE_SCHEMA_VERSION,
            dense_views: 24,
            base_iters: 480,
            cloud_kernels: Some(400),
            voxel_lr: 0.01,
            entries: vec![
                entry(RepresentationKind::VoxelField, 24, 1.0, 21),
                entry(RepresentationKind::VoxelField, 8, 0.25, 22),
                entry(RepresentationKind::GaussianCloud, 24, 1.0, 23),
                entry(RepresentationKind::GaussianCloud, 8, 0.25, 24),
            ],
        };

        let records = generate_pairs(&gt, &geom, &recipe).unwrap();
        let z = dims.2;
        let full_voxel = volume_psnr_of(&records[..z]);
        let under_voxel = volume_psnr_of(&records[z..2 * z]);
        let full_cloud = volume_psnr_of(&records[2 * z..3 * z]);
        let under_cloud = volume_psnr_of(&records[3 * z..]);

        assert!(
            under_voxel < full_voxel,
            "voxel: underfit {under_voxel:.2} dB not below fully fit {full_voxel:.2} dB"
        );
        assert!(
            under_cloud < full_cloud,
            "cloud: underfit {under_cloud:.2} dB not below fully fit {full_cloud:.2} dB"
        );
        assert!(
            full_voxel > 30.0,
            "fully fit voxel run only reached {full_voxel:.2} dB"
        );
    }
}
