//! Sweep the attention-theory variants and compare against the published
//! full-scale reference table.
//!
//! The `attention` preset trains AET, FIT V-1, and FIT V-2 on identical
//! tiles with an identical seed, then re-evaluates the trained AET with
//! voxel post-processing — four rows, exactly the shape of the reference
//! ablation. Desk-scale runs on tiny synthetic scenes reproduce orderings,
//! not magnitudes, so the comparison prints both side by side.
//!
//! Run with `cargo run --release --example attention_variants`.

use nsanet::priors::{annotate_cloud, PriorParams};
use nsanet::sim::{simulate_scene, SceneConfig};
use nsanet::train::{
    f1_score, format_ablation_table, run_ablation, AblationPreset, TrainConfig,
    REFERENCE_ATTENTION, REFERENCE_F1_OUTLIERS,
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
    let clouds: Vec<PointCloud> = [21u64, 22]
        .iter()
        .map(|&s| make_scene(s))
        .collect::<nsanet::Result<_>>()?;
    let base = TrainConfig {
        epochs: 6,
        batch_size: 4,
        seed: 3,
        grid_edge: 16,
        voxel_size: 2.0,
        eval_every: 0,
        depth: 2,
        base_channels: 6,
        ..TrainConfig::default()
    };
    println!(
        "training 3 variants + VPP re-evaluation on {} tiles ({} epochs each)...\n",
        2 * 4,
        base.epochs
    );
    let rows = run_ablation(&clouds, &base, AblationPreset::Attention)?;
    println!("{}", format_ablation_table(&rows));

    // Desk-scale voxel metrics next to the published full-scale numbers.
    let reference_name = |name: &str| match name {
        "aet" => "AET",
        "fit-v1" => "FIT V-1",
        "fit-v2" => "FIT V-2",
        "aet+vpp" => "AET+VPP",
        other => panic!("no reference row for {other}"),
    };
    println!("desk-scale run vs published reference (voxel level, noise class):");
    println!("  variant  |  desk P/R/F1        |  published P/R/F1");
    for row in &rows {
        let reference = REFERENCE_ATTENTION
            .iter()
            .find(|r| r.method == reference_name(&row.name))
            .expect("reference table covers all four rows");
        println!(
            "  {:<7}  |  {:.3} {:.3} {:.3}  |  {:.3} {:.3} {:.3}",
            row.name,
            row.voxel.precision,
            row.voxel.recall,
            row.voxel.f1,
            reference.precision,
            reference.recall,
            reference.f1
        );
    }

    // Orderings the reference table asserts, checked on the desk run.
    let by_name = |n: &str| rows.iter().find(|r| r.name == n).unwrap();
    let (aet, vpp) = (by_name("aet"), by_name("aet+vpp"));
    let best_recall = rows
        .iter()
        .filter(|r| !r.vpp)
        .max_by(|a, b| a.voxel.recall.total_cmp(&b.voxel.recall))
        .unwrap();
    let best_f1 = rows
        .iter()
        .max_by(|a, b| a.voxel.f1.total_cmp(&b.voxel.f1))
        .unwrap();
    println!();
    let agrees = |matches: bool| if matches { "agrees" } else { "differs at desk scale" };
    println!(
        "highest plain recall: {} ({:.4}); the reference ranks fit-v2 first ({})",
        best_recall.name,
        best_recall.voxel.recall,
        agrees(best_recall.name == "fit-v2")
    );
    println!(
        "best overall F1: {} ({:.4}); the reference ranks aet+vpp first ({})",
        best_f1.name,
        best_f1.voxel.f1,
        agrees(best_f1.name == "aet+vpp")
    );
    println!(
        "VPP on AET: precision {:+.4}, recall {:+.4}, f1 {:+.4}",
        vpp.voxel.precision - aet.voxel.precision,
        vpp.voxel.recall - aet.voxel.recall,
        vpp.voxel.f1 - aet.voxel.f1
    );

    // The published table is not fully self-consistent: recomputing F1 from
    // each row's own precision/recall disagrees past +-0.001 for one row
    // here (and the recomputed value is lower).
    println!("\nreference-table F1 arithmetic:");
    for r in REFERENCE_ATTENTION {
        let recomputed = f1_score(r.precision, r.recall);
        let consistent = (recomputed - r.f1).abs() <= 1e-3;
        println!(
            "  {:<8} published {:.3}, recomputed {:.4} -> {}",
            r.method,
            r.f1,
            recomputed,
            if consistent {
                "consistent"
            } else {
                assert!(REFERENCE_F1_OUTLIERS.contains(&r.method));
                "known outlier (recomputed lower)"
            }
        );
    }
    Ok(())
}
