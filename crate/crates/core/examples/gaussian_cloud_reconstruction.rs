//! Fits a 3D Gaussian kernel cloud to sparse projections. The cloud is
//! seeded from a quick coarse SART pass so kernels start near the support,
//! then all kernel parameters (density, position, scale, orientation) are
//! optimized against the measured views.
//!
//! Run with `cargo run --example gaussian_cloud_reconstruction`.

use std::f64::consts::TAU;

use tomoforge::diffnr::{plain_nr_optimize, DiffNrConfig};
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{forward_project, MarchConfig};
use tomoforge::representations::{
    init_cloud_from_volume, CloudLearningRates, Representation, TrainableCloud,
};
use tomoforge::solvers::{sart_reconstruct, SartConfig};
use tomoforge::volume::psnr_volumes;
use tomoforge::Result;

fn run() -> Result<()> {
    let dims = (32, 32, 32);
    let spacing = (1.0, 1.0, 1.0);
    let gt = shepp_logan(dims, spacing)?;
    let geom = ConeBeamGeometry::standard(dims, spacing, uniform_angles(10, TAU)?)?;
    let march = MarchConfig::for_geometry(&geom);
    let stack = forward_project(&gt, &geom, &march)?;

    let coarse_cfg = SartConfig {
        n_iterations: 3,
        ..SartConfig::for_geometry(&geom)
    };
    let coarse = sart_reconstruct(&stack, &geom, &coarse_cfg)?;
    println!(
        "coarse SART seed: {:.2} dB",
        psnr_volumes(&coarse, &gt)?
    );

    let cloud = init_cloud_from_volume(&coarse, 600, 0)?;
    let mut rep = TrainableCloud::new(cloud, CloudLearningRates::default())?;
    println!(
        "cloud: 600 kernels, {} trainable parameters",
        rep.n_params()
    );

    let cfg = DiffNrConfig::for_cloud(300, dims, spacing, 0);
    let run = plain_nr_optimize(&mut rep, &stack, &geom, &cfg, Some(&gt))?;
    for row in &run.progress {
        println!(
            "  iter {:>3}: data loss {:.6}, psnr {:.2} dB",
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
