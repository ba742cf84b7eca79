//! SART and ASD-POCS on dense versus sparse orbits.
//!
//! Run with `cargo run --example classical_baselines`. ASD-POCS interleaves
//! TV descent with the data sweeps, which is what keeps streak artifacts
//! down when only a dozen views exist.

use std::f64::consts::TAU;

use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::objectives::{ssim3d, SsimConfig};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{forward_project, MarchConfig};
use tomoforge::solvers::{asdpocs_reconstruct, sart_reconstruct, AsdPocsConfig, SartConfig};
use tomoforge::volume::{psnr_volumes, Volume};
use tomoforge::Result;

fn score(label: &str, recon: &Volume, gt: &Volume) -> Result<()> {
    let psnr = psnr_volumes(recon, gt)?;
    let ssim = ssim3d(recon, gt, &SsimConfig::default())?;
    println!("  {label:<10} psnr {psnr:6.2} dB   ssim3d {ssim:.4}");
    Ok(())
}

fn run() -> Result<()> {
    let dims = (48, 48, 48);
    let gt = shepp_logan(dims, (1.0, 1.0, 1.0))?;

    for n_views in [60, 12] {
        let geom =
            ConeBeamGeometry::standard(dims, (1.0, 1.0, 1.0), uniform_angles(n_views, TAU)?)?;
        let march = MarchConfig::for_geometry(&geom);
        let stack = forward_project(&gt, &geom, &march)?;
        println!("{n_views} views:");

        let sart = sart_reconstruct(&stack, &geom, &SartConfig::for_geometry(&geom))?;
        score("sart", &sart, &gt)?;

        let asdpocs = asdpocs_reconstruct(&stack, &geom, &AsdPocsConfig::for_geometry(&geom))?;
        score("asd-pocs", &asdpocs, &gt)?;
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
