//! Projects a phantom over a sparse orbit, with and without photon noise,
//! and round-trips the stack through the projection container format.
//!
//! Run with `cargo run --example simulate_projections`.

use std::f64::consts::TAU;
use std::path::PathBuf;

use tomoforge::formats::{read_projections, write_png16, write_projections};
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{add_photon_noise, forward_project, MarchConfig};
use tomoforge::Result;

fn run() -> Result<()> {
    let dir = PathBuf::from("target/example-output/simulate_projections");
    std::fs::create_dir_all(&dir).map_err(|e| tomoforge::Error::io(&dir, e))?;

    let dims = (48, 48, 48);
    let vol = shepp_logan(dims, (1.0, 1.0, 1.0))?;
    let geom = ConeBeamGeometry::standard(dims, (1.0, 1.0, 1.0), uniform_angles(24, TAU)?)?;
    let march = MarchConfig::for_geometry(&geom);

    let clean = forward_project(&vol, &geom, &march)?;
    println!(
        "projected {} views on a {} x {} detector",
        clean.n_views(),
        clean.rows,
        clean.cols
    );

    let noisy = add_photon_noise(&clean, 1e4, 42)?;
    let rms: f64 = (clean
        .data
        .iter()
        .zip(&noisy.data)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / clean.data.len() as f64)
        .sqrt();
    let peak = clean.data.iter().cloned().fold(0.0, f64::max);
    println!("photon noise at 1e4 counts: residual RMS {rms:.4} against peak {peak:.2}");

    for (name, stack) in [("clean", &clean), ("noisy", &noisy)] {
        let path = dir.join(format!("view0_{name}.png"));
        write_png16(&path, &stack.view_image(0))?;
        println!("  wrote {}", path.display());
    }

    // the container stores f32 samples, so the write -> read -> write
    // cycle is the level at which bytes must be identical
    let path = dir.join("projections.stack");
    write_projections(&path, &noisy)?;
    let loaded = read_projections(&path)?;
    let path2 = dir.join("projections_rewrite.stack");
    write_projections(&path2, &loaded)?;
    let original = std::fs::read(&path).map_err(|e| tomoforge::Error::io(&path, e))?;
    let rewritten = std::fs::read(&path2).map_err(|e| tomoforge::Error::io(&path2, e))?;
    println!(
        "container round trip: {} views, rewrite {}",
        loaded.n_views(),
        if original == rewritten {
            "byte-identical"
        } else {
            "DIFFERS"
        }
    );
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
