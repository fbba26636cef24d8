//! Train the denoiser on two synthetic scenes, in process and at desk scale.
//!
//! The full loop: simulate labeled clouds, attach physical priors, voxelize
//! into training tiles, train with weighted cross-entropy, evaluate at the
//! voxel and point level with and without voxel post-processing, and prove
//! the checkpoint round-trips bit for bit.
//!
//! Run with `cargo run --release --example train_denoiser`.

use std::path::PathBuf;

use nsanet::model::{Model, Variant};
use nsanet::priors::{annotate_cloud, PriorParams};
use nsanet::sim::{simulate_scene, SceneConfig};
use nsanet::train::{
    derive_class_weights, evaluate, train, write_loss_curve, Dataset, MetricLevel, TrainConfig,
};
use nsanet::PointCloud;

fn make_scene(seed: u64) -> nsanet::Result<PointCloud> {
    let cfg = SceneConfig {
        extent: 64.0,
        ground_density: 3.0,
        object_density: 1.5,
        noise_fraction: 0.05,
        seed,
        ..SceneConfig::default()
    };
    let (cloud, traj) = simulate_scene(&cfg)?;
    let params = PriorParams {
        prf: cfg.prf,
        pulse_speed: cfg.pulse_speed,
        ..PriorParams::default()
    };
    let (cloud, _) = annotate_cloud(cloud, &traj, &params)?;
    Ok(cloud)
}

fn main() -> nsanet::Result<()> {
    let clouds: Vec<PointCloud> = [101u64, 102].iter().map(|&s| make_scene(s)).collect::<nsanet::Result<_>>()?;
    println!(
        "training clouds: {} points / {} points",
        clouds[0].len(),
        clouds[1].len()
    );

    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 4,
        seed: 3,
        variant: Variant::Aet,
        grid_edge: 16,
        voxel_size: 2.0,
        eval_every: 2,
        depth: 2,
        base_channels: 6,
        ..TrainConfig::default()
    };
    let data = Dataset::from_clouds(&clouds, &cfg)?;
    let (clean, noise) = data.label_counts();
    let (w0, w1) = derive_class_weights(&data)?;
    println!(
        "dataset: {} tiles of {}^3 voxels; {} clean / {} noise voxels",
        data.len(),
        cfg.grid_edge,
        clean,
        noise
    );
    println!(
        "auto class weights (inverse frequency): w0 = {:.1}, w1 = {:.2}\n",
        w0, w1
    );

    let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed)?;
    println!(
        "model: variant {}, depth {}, {} parameters; training {} epochs...",
        cfg.variant,
        cfg.depth,
        model.n_params(),
        cfg.epochs
    );
    let log = train(&mut model, &data, &cfg)?;
    println!("epoch | wce loss | voxel f1");
    for r in &log.records {
        match &r.eval {
            Some(e) => println!("  {:3} | {:8.4} | {:.4}", r.epoch, r.loss, e.f1),
            None => println!("  {:3} | {:8.4} |", r.epoch, r.loss),
        }
    }

    // Metrics on the training tiles, with and without the post-processing
    // relabel step, at both granularities.
    let mut reports = Vec::new();
    for level in [MetricLevel::Voxel, MetricLevel::Point] {
        for vpp in [false, true] {
            reports.push(evaluate(&model, &data, vpp, level)?);
        }
    }
    println!("\n{}", nsanet::train::format_metrics_table(&reports));

    // Persist everything and verify the checkpoint reproduces the model
    // exactly: same architecture, bitwise-equal parameters.
    let out = PathBuf::from("target/examples/train_denoiser");
    std::fs::create_dir_all(&out).map_err(nsanet::Error::from)?;
    let ckpt = out.join("model.nsw");
    model.save(&ckpt)?;
    write_loss_curve(&out.join("loss_curve.csv"), &log)?;

    let reloaded = Model::<f32>::load(&ckpt)?;
    assert_eq!(reloaded.config(), model.config());
    let identical = model
        .params()
        .iter()
        .zip(reloaded.params())
        .all(|(a, b)| {
            a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    assert!(identical);
    println!(
        "saved {} (+ {} sidecar) and loss_curve.csv; reload is bitwise identical",
        ckpt.display(),
        Model::<f32>::cfg_path(&ckpt)
            .file_name()
            .unwrap()
            .to_string_lossy()
    );
    Ok(())
}
