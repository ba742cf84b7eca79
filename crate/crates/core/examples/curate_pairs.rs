//! Builds a small paired clean/corrupted slice dataset and inspects it.
//!
//! Each recipe entry reconstructs the phantom from a sparse view subset
//! with a deliberately limited iteration budget; its axial slices become
//! the corrupted half of the pairs, with exact ground-truth extracts as
//! the clean half. Run with `cargo run --example curate_pairs`.

use std::path::PathBuf;

use tomoforge::curation::{
    generate_pairs, CurationRecipe, RecipeEntry, RepresentationKind, ViewMode,
    RECIPE_SCHEMA_VERSION,
};
use tomoforge::formats::{read_pairs, write_pairs, PAIR_KIND_VOXEL};
use tomoforge::geometry::ConeBeamGeometry;
use tomoforge::phantom::random_ellipsoids;
use tomoforge::volume::psnr;
use tomoforge::Result;

fn run() -> Result<()> {
    let dir = PathBuf::from("target/example-output/curate_pairs");
    std::fs::create_dir_all(&dir).map_err(|e| tomoforge::Error::io(&dir, e))?;

    let dims = (24, 24, 24);
    let gt = random_ellipsoids(dims, (1.0, 1.0, 1.0), 3)?;
    let template = ConeBeamGeometry::standard(dims, (1.0, 1.0, 1.0), vec![0.0])?;

    let recipe = CurationRecipe {
        schema_version: RECIPE_SCHEMA_VERSION,
        dense_views: 24,
        base_iters: 300,
        cloud_kernels: Some(400),
        voxel_lr: 0.01,
        entries: vec![
            RecipeEntry {
                kind: RepresentationKind::VoxelField,
                n_views: 24,
                view_mode: ViewMode::Uniform,
                fit_fraction: 1.0,
                seed: 1,
            },
            RecipeEntry {
                kind: RepresentationKind::VoxelField,
                n_views: 8,
                view_mode: ViewMode::Nonuniform,
                fit_fraction: 0.25,
                seed: 2,
            },
            RecipeEntry {
                kind: RepresentationKind::GaussianCloud,
                n_views: 24,
                view_mode: ViewMode::Uniform,
                fit_fraction: 1.0,
                seed: 3,
            },
            RecipeEntry {
                kind: RepresentationKind::GaussianCloud,
                n_views: 8,
                view_mode: ViewMode::Nonuniform,
                fit_fraction: 0.25,
                seed: 4,
            },
        ],
    };

    let records = generate_pairs(&gt, &template, &recipe)?;
    println!("generated {} pairs from {} entries", records.len(), recipe.entries.len());

    let z = dims.2;
    for (i, entry) in recipe.entries.iter().enumerate() {
        let chunk = &records[i * z..(i + 1) * z];
        let corrupted: Vec<f64> = chunk.iter().flat_map(|r| r.corrupted.clone()).collect();
        let clean: Vec<f64> = chunk.iter().flat_map(|r| r.clean.clone()).collect();
        println!(
            "  {:?} {:?} views={:<2} fit={:<4} -> corrupted psnr {:.2} dB",
            entry.kind,
            entry.view_mode,
            entry.n_views,
            entry.fit_fraction,
            psnr(&corrupted, &clean)?
        );
    }

    let path = dir.join("pairs.bin");
    write_pairs(&path, &records)?;
    let loaded = read_pairs(&path)?;
    let n_voxel = loaded.iter().filter(|r| r.kind == PAIR_KIND_VOXEL).count();
    println!(
        "wrote {} ({} records: {} voxel-field, {} gaussian-cloud)",
        path.display(),
        loaded.len(),
        n_voxel,
        loaded.len() - n_voxel
    );
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
