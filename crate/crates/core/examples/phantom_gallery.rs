//! Generates the built-in phantoms and exports central slices as PNGs.
//!
//! Run with `cargo run --example phantom_gallery`. Images land in
//! `target/example-output/phantom_gallery/` next to `.txt` sidecars that
//! record each slice's intensity window.

use std::path::PathBuf;

use tomoforge::formats::write_png16;
use tomoforge::phantom::{random_ellipsoids, shepp_logan};
use tomoforge::volume::{extract_slice, SliceAxis, Volume};
use tomoforge::Result;

fn describe(name: &str, vol: &Volume) {
    let data = vol.data();
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let occupied = data.iter().filter(|&&v| v > 0.0).count() as f64 / data.len() as f64;
    println!(
        "{name}: densities in [{min:.3}, {max:.3}], mean {mean:.4}, {:.1}% occupied",
        100.0 * occupied
    );
}

fn export(dir: &PathBuf, name: &str, vol: &Volume) -> Result<()> {
    let (x, y, z) = vol.dims();
    for (axis, label, mid) in [
        (SliceAxis::Axial, "axial", z / 2),
        (SliceAxis::Coronal, "coronal", y / 2),
        (SliceAxis::Sagittal, "sagittal", x / 2),
    ] {
        let slice = extract_slice(vol, axis, mid);
        let path = dir.join(format!("{name}_{label}.png"));
        write_png16(&path, &slice.image)?;
        println!("  wrote {}", path.display());
    }
    Ok(())
}

fn run() -> Result<()> {
    let dir = PathBuf::from("target/example-output/phantom_gallery");
    std::fs::create_dir_all(&dir).map_err(|e| tomoforge::Error::io(&dir, e))?;
    let dims = (64, 64, 64);
    let spacing = (1.0, 1.0, 1.0);

    let shepp = shepp_logan(dims, spacing)?;
    describe("shepp3d", &shepp);
    export(&dir, "shepp3d", &shepp)?;

    for seed in [7, 8] {
        let vol = random_ellipsoids(dims, spacing, seed)?;
        let name = format!("ellipsoids_seed{seed}");
        describe(&name, &vol);
        export(&dir, &name, &vol)?;
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
