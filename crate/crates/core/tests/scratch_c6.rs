use std::f64::consts::TAU;
use std::time::Instant;

use tomoforge::diffnr::{diffnr_optimize, plain_nr_optimize, DiffNrConfig};
use tomoforge::fixer::OracleFixer;
use tomoforge::geometry::{uniform_angles, ConeBeamGeometry};
use tomoforge::phantom::shepp_logan;
use tomoforge::projector::{forward_project, MarchConfig};
use tomoforge::representations::{init_cloud_from_volume, CloudLearningRates, TrainableCloud};
use tomoforge::solvers::{sart_reconstruct, SartConfig};
use tomoforge::volume::psnr_volumes;

#[test]
fn probe_criterion6() {
    let dims = (64, 64, 64);
    let spacing = (1.0, 1.0, 1.0);
    let gt = shepp_logan(dims, spacing).unwrap();
    let geom = ConeBeamGeometry::standard(dims, spacing, uniform_angles(12, TAU).unwrap()).unwrap();
    let march = MarchConfig::for_geometry(&geom);
    let stack = forward_project(&gt, &geom, &march).unwrap();

    let coarse_cfg = SartConfig {
        n_iterations: 3,
        ..SartConfig::for_geometry(&geom)
    };
    let coarse = sart_reconstruct(&stack, &geom, &coarse_cfg).unwrap();

    let range = {
        let d = gt.data();
        d.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - d.iter().cloned().fold(f64::INFINITY, f64::min)
    };

    let kernels = 1000;
    let j = 1000;
    let ell = 250;
    let tau = 1;
    let seed_cloud = init_cloud_from_volume(&coarse, kernels, 0).unwrap();
    let mut cfg = DiffNrConfig::for_cloud(j, dims, spacing, 0);
    cfg.ref_interval = ell;
    cfg.aug_period = tau;

    let t = Instant::now();
    let mut rep = TrainableCloud::new(seed_cloud.clone(), CloudLearningRates::default()).unwrap();
    let base = plain_nr_optimize(&mut rep, &stack, &geom, &cfg, None).unwrap();
    let base_psnr = psnr_volumes(&base.volume, &gt).unwrap();
    println!("base: {base_psnr:.2} dB ({:.0}s)", t.elapsed().as_secs_f64());

    for lambda in [0.3f64, 0.5, 0.7, 1.0, 1.5] {
        let mut cfg = cfg.clone();
        cfg.lambda_diff = lambda;
        let t = Instant::now();
        let mut fixer = OracleFixer::new(gt.clone(), 0.05 * range, 0).unwrap();
        let mut rep = TrainableCloud::new(seed_cloud.clone(), CloudLearningRates::default()).unwrap();
        let fixed = diffnr_optimize(&mut rep, &stack, &geom, &mut fixer, &cfg, Some(&gt)).unwrap();
        let fixed_psnr = psnr_volumes(&fixed.volume, &gt).unwrap();
        let tail: Vec<String> = fixed
            .progress
            .iter()
            .skip(fixed.progress.len().saturating_sub(5))
            .map(|r| format!("{}:{:.2}", r.iter, r.psnr_vs_gt.unwrap()))
            .collect();
        println!(
            "lambda {lambda}: {fixed_psnr:.2} dB ({:.0}s), gain {:+.2}, tail {}",
            t.elapsed().as_secs_f64(),
            fixed_psnr - base_psnr,
            tail.join(" ")
        );
    }
}
