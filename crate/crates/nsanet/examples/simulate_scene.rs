//! Generate one synthetic labeled MPIA scene and look at its anatomy.
//!
//! The simulator replaces flight data: it lays out terrain and objects,
//! flies a straight trajectory overhead, and injects the three noise
//! families (sparse outliers, systematic pulse-interval bands, complex
//! clusters) with ground-truth labels. Everything derives from one seed.
//!
//! Run with `cargo run --release --example simulate_scene`.

use std::path::PathBuf;

use nsanet::point::{split_by_gps_time, write_cloud, write_trajectory, CloudFormat};
use nsanet::sim::{simulate_scene, SceneConfig};

fn main() -> nsanet::Result<()> {
    let cfg = SceneConfig {
        extent: 64.0,
        ground_density: 4.0,
        object_density: 2.0,
        noise_fraction: 0.03,
        seed: 42,
        ..SceneConfig::default()
    };
    cfg.validate()?;

    println!("simulating a {}x{} m scene (seed {})", cfg.extent, cfg.extent, cfg.seed);
    println!(
        "sensor: prf {:.2e} Hz -> unambiguous range r_max = {:.3} m",
        cfg.prf,
        cfg.r_max()
    );
    println!(
        "systematic noise bands sit within {:.1} m of each multiple of r_max\n",
        cfg.band
    );

    let (cloud, traj) = simulate_scene(&cfg)?;

    let noise = cloud.noise_count();
    let b = cloud.bounds();
    println!("cloud: {} points, {} labeled noise ({:.2}% vs {:.2}% requested)",
        cloud.len(),
        noise,
        100.0 * noise as f64 / cloud.len() as f64,
        100.0 * cfg.noise_fraction
    );
    println!(
        "bounds: x [{:.1}, {:.1}]  y [{:.1}, {:.1}]  z [{:.1}, {:.1}] m",
        b.min[0], b.max[0], b.min[1], b.max[1], b.min[2], b.max[2]
    );
    let [t0, t1] = cloud.gps_range();
    println!(
        "gps time: [{:.2}, {:.2}] s over {} trajectory samples at {:.0} m/s\n",
        t0,
        t1,
        traj.len(),
        cfg.flight_speed
    );

    // A simple elevation profile of the noise: how far above the terrain
    // datum the injected points sit, in 5 m bins.
    let mut bins = [0usize; 8];
    for p in cloud.points().iter().filter(|p| p.label == 1) {
        let bin = ((p.z / 5.0) as usize).min(bins.len() - 1);
        bins[bin] += 1;
    }
    println!("noise elevation profile (5 m bins):");
    for (i, count) in bins.iter().enumerate() {
        let bar = "#".repeat(count * 50 / noise.max(1));
        println!("  {:>2}-{:>2} m | {:<50} {}", i * 5, (i + 1) * 5, bar, count);
    }

    // Scenes are carved into sub-scenes by GPS time, mirroring how flight
    // lines are split for training and evaluation.
    let subs = split_by_gps_time(&cloud, 4)?;
    println!("\nsplit by gps time into {} sub-scenes:", subs.len());
    for (i, sub) in subs.iter().enumerate() {
        println!(
            "  sub-scene {}: {} points, {} noise",
            i,
            sub.len(),
            sub.noise_count()
        );
    }

    let out = PathBuf::from("target/examples/simulate_scene");
    std::fs::create_dir_all(&out).map_err(nsanet::Error::from)?;
    let cloud_path = out.join("scene.npc");
    let traj_path = out.join("trajectory.csv");
    write_cloud(&cloud, &cloud_path, CloudFormat::NpcBinary)?;
    write_trajectory(&traj, &traj_path)?;
    println!("\nwrote {}", cloud_path.display());
    println!("wrote {}", traj_path.display());
    println!("(the CLI equivalent: nsanet simulate --seed 42 --out-cloud ... --out-traj ...)");
    Ok(())
}
