//! The physical-priors estimation walk-through: from one hand-computed
//! point to a whole annotated scene.
//!
//! High-PRF ranging is ambiguous: with several pulses in the air, a return
//! at measured range `r` may belong to any interval `[k·r_max, (k+1)·r_max)`
//! where `r_max = c / (2·prf)`. Mis-assigned returns land near interval
//! transitions, so the offset within the interval — `prob = (r mod
//! r_max)/r_max` close to 0 or 1 — is a physical prior for "this point is
//! noise".
//!
//! Run with `cargo run --release --example physical_priors`.

use nsanet::point::{PointRecord, TrajectorySample};
use nsanet::priors::{annotate_cloud, compute_point_prior, PriorParams};
use nsanet::sim::{simulate_scene, SceneConfig};

fn main() -> nsanet::Result<()> {
    // --- Part 1: the algorithm on one point, numbers visible. -------------
    let params = PriorParams {
        prf: 5.0e6,
        ..PriorParams::default()
    };
    println!(
        "sensor: prf {:.1e} Hz, c {:.0} m/s -> r_max {:.4} m",
        params.prf,
        params.pulse_speed,
        params.r_max()
    );

    let sensor = TrajectorySample {
        gps_time: 10.0,
        x: 0.0,
        y: 0.0,
        z: 500.0,
    };
    let point = PointRecord {
        x: 30.0,
        y: 40.0,
        z: 20.0,
        gps_time: 10.0,
        intensity: 100.0,
        return_number: 1,
        num_returns: 1,
        label: 0,
        prior_prob: 0.0,
    };
    let prior = compute_point_prior(&point, &sensor, &params)?;
    println!("\none point, by hand:");
    println!("  range        = {:.4} m (sensor at 500 m over a 30/40/20 offset)", prior.range);
    println!("  pia zone     = {} (ceil(range / r_max))", prior.pia_zone);
    println!("  r_obs        = {:.4} m (range mod r_max)", prior.r_obs);
    println!("  prior prob   = {:.6}", prior.prob);
    // The decomposition reconstructs the range exactly: the prior and the
    // zone together carry all of it.
    let rebuilt = prior.prob * params.r_max() + (prior.pia_zone as f64 - 1.0) * params.r_max();
    println!(
        "  reconstruction: prob·r_max + (zone-1)·r_max = {:.4} m (relative error {:.1e})",
        rebuilt,
        ((rebuilt - prior.range) / prior.range).abs()
    );

    // --- Part 2: a whole scene. -------------------------------------------
    let cfg = SceneConfig {
        extent: 64.0,
        ground_density: 4.0,
        object_density: 2.0,
        noise_fraction: 0.03,
        seed: 7,
        ..SceneConfig::default()
    };
    let (cloud, traj) = simulate_scene(&cfg)?;
    let n = cloud.len();
    let scene_params = PriorParams {
        prf: cfg.prf,
        pulse_speed: cfg.pulse_speed,
        ..PriorParams::default()
    };
    let (annotated, unmatched) = annotate_cloud(cloud, &traj, &scene_params)?;
    println!(
        "\nannotated a {}-point scene; {} points had no trajectory match",
        n, unmatched
    );

    // Histogram of the prior by true class. Systematic noise piles up at
    // the edges (prob near 0 or 1); clean returns spread over the middle.
    let mut hist = [[0usize; 10]; 2];
    for p in annotated.points() {
        let bin = ((p.prior_prob as f64) * 10.0).min(9.0) as usize;
        hist[p.label as usize][bin] += 1;
    }
    println!("\nprior-probability histogram (rows normalized per class):");
    println!("  {:>12} | {}", "bin", "clean                     noise");
    for bin in 0..10 {
        let total: [usize; 2] = [
            hist[0].iter().sum::<usize>().max(1),
            hist[1].iter().sum::<usize>().max(1),
        ];
        let bars: Vec<String> = (0..2)
            .map(|c| "#".repeat(hist[c][bin] * 24 / total[c]))
            .collect();
        println!(
            "  [{:.1}, {:.1}) | {:<24.24} {}",
            bin as f64 / 10.0,
            (bin + 1) as f64 / 10.0,
            bars[0],
            bars[1]
        );
    }

    // The consistency property the pipeline leans on: injected systematic
    // noise keeps its prior within band/r_max of the 0/1 wraparound.
    let margin = cfg.band / cfg.r_max();
    let near_wrap = |p: f32| {
        let p = p as f64;
        p <= margin || p >= 1.0 - margin
    };
    let noise: Vec<_> = annotated.points().iter().filter(|p| p.label == 1).collect();
    let wrapped = noise.iter().filter(|p| near_wrap(p.prior_prob)).count();
    println!(
        "\n{:.1}% of labeled noise sits within band/r_max = {:.3} of the wraparound",
        100.0 * wrapped as f64 / noise.len() as f64,
        margin
    );
    println!("(sparse and complex noise fall anywhere; the systematic family is what clusters there)");
    Ok(())
}
