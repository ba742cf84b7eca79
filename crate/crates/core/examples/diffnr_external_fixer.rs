//! Runs the fixer loop against a real subprocess speaking the framed
//! binary protocol, and shows how transport violations surface.
//!
//! The worker here is the `tomoforge fixer-echo` subcommand, which answers
//! every request with its own slice, so the run must match an in-process
//! identity fixer bit for bit. Build the binary first, then run:
//!
//! ```sh
//! cargo build --bin tomoforge
//! cargo run --example diffnr_external_fixer
//! ```

use std::f64::consts::TAU;
use std::path::PathBuf;

use tomoforge::diffnr::{diffnr_optimize, DiffNrConfig};
use tomoforge::fixer::{ExternalFixer, IdentityFixer};
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{forward_project, MarchConfig};
use tomoforge::representations::VoxelField;
use tomoforge::volume::Volume;
use tomoforge::Result;

/// The tomoforge binary that sits next to this example under target/.
fn sibling_binary() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let dir = exe.parent()?.parent()?;
    let cand = dir.join(format!("tomoforge{}", std::env::consts::EXE_SUFFIX));
    cand.exists().then_some(cand)
}

fn run(bin: &str) -> Result<()> {
    let dims = (24, 24, 24);
    let spacing = (1.0, 1.0, 1.0);
    let gt = shepp_logan(dims, spacing)?;
    let geom = ConeBeamGeometry::standard(dims, spacing, uniform_angles(6, TAU)?)?;
    let march = MarchConfig::for_geometry(&geom);
    let stack = forward_project(&gt, &geom, &march)?;
    let cfg = DiffNrConfig::for_voxel(60, dims, spacing, 0);

    let mut echo = ExternalFixer::spawn(bin, &["fixer-echo".into()])?;
    let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, 0.01);
    let subprocess = diffnr_optimize(&mut rep, &stack, &geom, &mut echo, &cfg, None)?;
    println!(
        "echo subprocess run: {} rebuilds, {} pulls",
        subprocess.rebuilds, subprocess.augmentations
    );

    let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, 0.01);
    let in_process = diffnr_optimize(&mut rep, &stack, &geom, &mut IdentityFixer, &cfg, None)?;
    println!(
        "subprocess vs in-process identity: volumes {}",
        if subprocess.volume.data() == in_process.volume.data() {
            "bit-identical"
        } else {
            "DIFFER"
        }
    );

    // a worker that truncates its response frame must abort the run with
    // a protocol error instead of handing back garbage
    let mut broken = ExternalFixer::spawn(
        bin,
        &["fixer-echo".into(), "--mode".into(), "truncate".into()],
    )?;
    let mut rep = VoxelField::new(Volume::zeros(dims, spacing), march, 0.01);
    match diffnr_optimize(&mut rep, &stack, &geom, &mut broken, &cfg, None) {
        Ok(_) => println!("truncating worker was NOT caught (bug)"),
        Err(e) => println!("truncating worker rejected as expected:\n  {e}"),
    }
    Ok(())
}

fn main() {
    let Some(bin) = sibling_binary() else {
        eprintln!("tomoforge binary not found; run `cargo build --bin tomoforge` first");
        std::process::exit(1);
    };
    if let Err(e) = run(bin.to_str().expect("target path should be UTF-8")) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
