//! The whole pipeline in one process: simulate, attach priors, train on two
//! scenes, then denoise a scene the model never saw.
//!
//! This mirrors the CLI stage chain (`simulate` → `priors` → `train` →
//! `infer` → `eval`) through the library API, ending with a filtered point
//! cloud and a metrics file under `target/examples/end_to_end/`.
//!
//! Run with `cargo run --release --example end_to_end`.

use std::path::PathBuf;

use nsanet::model::{Model, Variant};
use nsanet::point::{write_cloud, CloudFormat};
use nsanet::priors::{annotate_cloud, PriorParams};
use nsanet::sim::{simulate_scene, SceneConfig};
use nsanet::train::{
    evaluate, format_metrics_table, predict_item, train, write_metrics_jsonl, Dataset,
    MetricLevel, TrainConfig,
};
use nsanet::voxel::project_labels_tiles;
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
    let out = PathBuf::from("target/examples/end_to_end");
    std::fs::create_dir_all(&out).map_err(nsanet::Error::from)?;

    // Stage 1+2: two training scenes and one held-out scene, with physical
    // priors attached from each scene's own trajectory.
    let train_clouds: Vec<PointCloud> = [201u64, 202]
        .iter()
        .map(|&s| make_scene(s))
        .collect::<nsanet::Result<_>>()?;
    let test_cloud = make_scene(300)?;
    println!(
        "scenes: train {} + {} points, held-out {} points ({} true noise)",
        train_clouds[0].len(),
        train_clouds[1].len(),
        test_cloud.len(),
        test_cloud.noise_count()
    );

    // Stage 3+4: voxelize and train.
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 4,
        seed: 9,
        variant: Variant::Aet,
        grid_edge: 16,
        voxel_size: 2.0,
        eval_every: 4,
        depth: 2,
        base_channels: 6,
        ..TrainConfig::default()
    };
    let data = Dataset::from_clouds(&train_clouds, &cfg)?;
    let mut model = Model::<f32>::new(cfg.model_config(), cfg.seed)?;
    println!(
        "training variant {} on {} tiles for {} epochs...",
        cfg.variant,
        data.len(),
        cfg.epochs
    );
    let log = train(&mut model, &data, &cfg)?;
    let last = log.records.last().unwrap();
    println!("final epoch loss {:.4}", last.loss);
    let ckpt = out.join("model.nsw");
    model.save(&ckpt)?;

    // Stage 5: inference on the held-out scene. Per-tile voxel predictions
    // (with VPP smoothing) project back onto the points through each tile's
    // stored projection; the tiles partition the cloud, so the merge is a
    // plain union.
    let test_data = Dataset::from_clouds(&[test_cloud.clone()], &cfg)?;
    let preds: Vec<Vec<u8>> = test_data
        .items
        .iter()
        .map(|item| predict_item(&model, item, true))
        .collect::<nsanet::Result<_>>()?;
    let grids: Vec<_> = test_data.items.iter().map(|i| i.grid.clone()).collect();
    let point_pred = project_labels_tiles(&grids, &preds)?;

    let predicted_noise = point_pred.iter().filter(|&&l| l == 1).count();
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (p, truth) in point_pred.iter().zip(test_cloud.points()) {
        match (truth.label, *p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            _ => {}
        }
    }
    println!(
        "\nheld-out scene: flagged {} of {} points as noise \
         ({} hits, {} false alarms, {} missed)",
        predicted_noise,
        test_cloud.len(),
        tp,
        fp,
        fn_
    );
    let kept = test_cloud.len() - predicted_noise;
    println!(
        "filtered cloud keeps {} points ({:.1}%)",
        kept,
        100.0 * kept as f64 / test_cloud.len() as f64
    );

    // Stage 6: the scored evaluation, with and without VPP, both levels.
    let mut reports = Vec::new();
    for level in [MetricLevel::Voxel, MetricLevel::Point] {
        for vpp in [false, true] {
            reports.push(evaluate(&model, &test_data, vpp, level)?);
        }
    }
    println!("\nheld-out metrics:\n{}", format_metrics_table(&reports));

    // Artifacts: the labeled prediction cloud and the metrics records.
    let pred_cloud = test_cloud.with_labels(&point_pred)?;
    let pred_path = out.join("test_pred.npc");
    write_cloud(&pred_path, &pred_cloud, CloudFormat::Npc)?;
    let metrics_path = out.join("metrics.jsonl");
    write_metrics_jsonl(&metrics_path, &reports)?;
    println!("wrote {}", ckpt.display());
    println!("wrote {}", pred_path.display());
    println!("wrote {}", metrics_path.display());
    println!(
        "\n(the CLI equivalent: nsanet simulate / priors / train / infer / eval \
         with the same seeds and geometry)"
    );
    Ok(())
}
