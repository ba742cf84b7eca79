//! Fits a trainable voxel grid to sparse projections with image losses
//! and total-variation regularization (no fixer involved).
//!
//! Run with `cargo run --example voxel_field_reconstruction`.

use std::f64::consts::TAU;

use tomoforge::diffnr::{plain_nr_optimize, DiffNrConfig};
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{forward_project, MarchConfig};
use tomoforge::representations::VoxelField;
use tomoforge::volume::Volume;
use tomoforge::Result;

fn run() -> Result<()> {
    let dims = (32, 32, 32);
    let spacing = (1.0, 1.0, 1.0);
    let gt = shepp_logan(dims, spacing)?;
    let geom = ConeBeamGeometry::standard(dims, spacing, uniform_angles(10, TAU)?)?;
    let march = MarchConfig::for_geometry(&geom);
    let stack = forward_project(&gt, &geom, &march)?;

    let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, 0.01);
    let cfg = DiffNrConfig::for_voxel(400, dims, spacing, 0);
    let run = plain_nr_optimize(&mut rep, &stack, &geom, &cfg, Some(&gt))?;

    println!("10-view voxel grid, {} optimizer steps:", cfg.total_iters);
    println!("  iter   data loss   psnr");
    for row in &run.progress {
        println!(
            "  {:>4}   {:.6}    {:.2} dB",
            row.iter,
            row.data_loss,
            row.psnr_vs_gt.unwrap()
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
