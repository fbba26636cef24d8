//! Noise-class evaluation: confusion counts over voxels or projected
//! points, with optional voxel post-processing before counting. Noise is
//! the positive class throughout.

use super::{Dataset, TrainItem};
use crate::error::{Error, Result};
use crate::model::{predict_labels, Model};
use crate::tensor::Scalar;
use crate::voxel::{vpp_refine, VOID_LABEL};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Confidence threshold of the voxel post-processing relabel step.
pub const VPP_TAU: f64 = 0.5;

/// Whether metrics count voxels directly or the points they project to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MetricLevel {
    #[serde(rename = "voxel")]
    Voxel,
    #[serde(rename = "point")]
    Point,
}

impl FromStr for MetricLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(MetricLevel::Voxel),
            "point" => Ok(MetricLevel::Point),
            other => Err(Error::validation(format!(
                "unknown metric level {other:?}; expected voxel or point"
            ))),
        }
    }
}

impl fmt::Display for MetricLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricLevel::Voxel => "voxel",
            MetricLevel::Point => "point",
        })
    }
}

/// Noise-class confusion counts and the ratios derived from them. A ratio
/// whose denominator is zero reports 0 with its degenerate flag set, so a
/// hard 0 score and an undefined one stay distinguishable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_degenerate: bool,
    pub recall_degenerate: bool,
    pub level: MetricLevel,
    pub vpp_applied: bool,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

impl EvalReport {
    /// Derive precision, recall, and F1 from raw confusion counts.
    pub fn from_counts(
        tp: u64,
        fp: u64,
        fn_: u64,
        tn: u64,
        level: MetricLevel,
        vpp_applied: bool,
    ) -> EvalReport {
        let (precision, precision_degenerate) = ratio(tp, tp + fp);
        let (recall, recall_degenerate) = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            precision_degenerate,
            recall_degenerate,
            level,
            vpp_applied,
        }
    }

    /// Total entities counted.
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Per-voxel predicted labels for one tile under eval-mode weights;
/// optionally smoothed by voxel post-processing first.
pub fn predict_item<T: Scalar>(model: &Model<T>, item: &TrainItem, vpp: bool) -> Result<Vec<u8>> {
    let input = item.grid.features.cast::<T>();
    let pyramids = model
        .config()
        .needs_prior()
        .then(|| std::slice::from_ref(&item.pyramid));
    let probs = model.forward_eval(std::slice::from_ref(&input), pyramids)?;
    if vpp {
        let scores = probs[0].cast::<f32>();
        vpp_refine(&scores, &item.grid.occupancy_counts(), VPP_TAU)
    } else {
        predict_labels(&probs[0])
    }
}

#[derive(Default)]
struct Confusion {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

impl Confusion {
    fn tally(&mut self, truth: u8, pred: u8) -> Result<()> {
        match (truth, pred) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (1, 0) => self.fn_ += 1,
            (0, 0) => self.tn += 1,
            _ => {
                return Err(Error::validation(format!(
                    "confusion labels must be 0 or 1, got truth {} / prediction {}",
                    truth, pred
                )))
            }
        }
        Ok(())
    }
}

/// Evaluate a model over a dataset. Predictions run per tile in parallel;
/// the confusion recount is a straight serial pass over every non-void
/// voxel (or every projected point), so the reported counts are exactly
/// what a brute-force recount of the predictions gives.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    vpp: bool,
    level: MetricLevel,
) -> Result<EvalReport> {
    if data.items.is_empty() {
        return Err(Error::validation("evaluation dataset is empty"));
    }
    for (i, item) in data.items.iter().enumerate() {
        if item.point_truth.len() != item.grid.n_source_points {
            return Err(Error::shape(format!(
                "item {}: {} truth labels for {} source points",
                i,
                item.point_truth.len(),
                item.grid.n_source_points
            )));
        }
    }
    let preds: Vec<Vec<u8>> = data
        .items
        .par_iter()
        .map(|item| predict_item(model, item, vpp))
        .collect::<Result<_>>()?;

    let mut c = Confusion::default();
    for (item, pred) in data.items.iter().zip(&preds) {
        match level {
            MetricLevel::Voxel => {
                for (&t, &p) in item.grid.labels.iter().zip(pred) {
                    if t != VOID_LABEL {
                        c.tally(t, p)?;
                    }
                }
            }
            MetricLevel::Point => {
                for (ci, idxs) in item.grid.projection.iter().enumerate() {
                    for &pi in idxs {
                        c.tally(item.point_truth[pi as usize], pred[ci])?;
                    }
                }
            }
        }
    }
    Ok(EvalReport::from_counts(
        c.tp, c.fp, c.fn_, c.tn, level, vpp,
    ))
}

/// Write reports as one JSON object per line.
pub fn write_metrics_jsonl(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::new();
    for r in reports {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::validation(format!("metrics encoding: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fixed-width human-readable metrics table.
pub fn format_metrics_table(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "level  vpp        tp        fp        fn        tn  precision  recall      f1\n",
    );
    for r in reports {
        out.push_str(&format!(
            "{:<5}  {:<3}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9.4}  {:>6.4}  {:>6.4}{}\n",
            r.level.to_string(),
            if r.vpp_applied { "yes" } else { "no" },
            r.tp,
            r.fp,
            r.fn_,
            r.tn,
            r.precision,
            r.recall,
            r.f1,
            if r.precision_degenerate || r.recall_degenerate {
                "  (degenerate)"
            } else {
                ""
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::testutil::hand_item;
    use super::super::Dataset;
    use super::*;
    use crate::model::{Model, ModelConfig, Variant};

    fn tiny_model_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            depth: 2,
            base_channels: 2,
            in_channels: 2,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ratios_follow_the_counts() {
        // precision = recall = 0.8 → f1 is exactly 0.8.
        let r = EvalReport::from_counts(8, 2, 2, 88, MetricLevel::Voxel, false);
        assert_eq!(r.precision, 0.8);
        assert_eq!(r.recall, 0.8);
        assert!((r.f1 - 0.8).abs() < 1e-12);
        assert!(!r.precision_degenerate && !r.recall_degenerate);
        assert_eq!(r.total(), 100);
    }

    #[test]
    fn degenerate_ratios_report_zero_with_flags() {
        // No positive predictions at all, but true noise exists.
        let r = EvalReport::from_counts(0, 0, 5, 95, MetricLevel::Point, false);
        assert_eq!(r.precision, 0.0);
        assert!(r.precision_degenerate);
        assert_eq!(r.recall, 0.0);
        assert!(!r.recall_degenerate); // 0/5 is defined
        assert_eq!(r.f1, 0.0);

        // Nothing positive anywhere: both ratios undefined.
        let r = EvalReport::from_counts(0, 0, 0, 10, MetricLevel::Voxel, true);
        assert!(r.precision_degenerate && r.recall_degenerate);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn zero_model_predicts_noise_everywhere() {
        // All-zero weights give exactly (0.5, 0.5) scores, and the argmax
        // tie goes to noise — so every labeled voxel is predicted 1.
        let item = hand_item(4, |x, _, z| if x == 0 { VOID_LABEL } else { u8::from(z < 2) });
        let (n0, n1) = {
            let mut n = (0u64, 0u64);
            for &l in &item.grid.labels {
                match l {
                    0 => n.0 += 1,
                    1 => n.1 += 1,
                    _ => {}
                }
            }
            n
        };
        let data = Dataset { items: vec![item] };
        let model = Model::<f32>::zeros(tiny_model_cfg(Variant::None)).unwrap();
        let r = evaluate(&model, &data, false, MetricLevel::Voxel).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (n1, n0, 0, 0));
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.precision, n1 as f64 / (n0 + n1) as f64);
        assert_eq!(r.level, MetricLevel::Voxel);
        assert!(!r.vpp_applied);

        // Each labeled cell projects to exactly one point, so point-level
        // counts coincide here.
        let p = evaluate(&model, &data, false, MetricLevel::Point).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_, p.tn), (r.tp, r.fp, r.fn_, r.tn));
        assert_eq!(p.level, MetricLevel::Point);
    }

    #[test]
    fn vpp_on_uniform_scores_hits_the_degenerate_example() {
        // Uniform (0.5, 0.5) scores smooth to exactly 0.5, which does not
        // exceed τ — every occupied voxel flips to clean. All predictions
        // non-noise with true noise present: precision degenerate 0,
        // recall 0, f1 0.
        let item = hand_item(4, |_, _, z| u8::from(z == 0));
        let data = Dataset { items: vec![item] };
        let model = Model::<f32>::zeros(tiny_model_cfg(Variant::None)).unwrap();
        let r = evaluate(&model, &data, true, MetricLevel::Voxel).unwrap();
        assert_eq!(r.tp, 0);
        assert_eq!(r.fp, 0);
        assert!(r.fn_ > 0);
        assert!(r.precision_degenerate);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
        assert!(r.vpp_applied);
    }

    #[test]
    fn report_matches_brute_force_recount() {
        // Random weights, mixed labels, all four (level, vpp) combinations:
        // the report must equal an independent recount of predict_item's
        // output.
        let items = vec![
            hand_item(4, |x, y, z| u8::from((x + 2 * y + z) % 5 == 0)),
            hand_item(4, |x, y, z| {
                if z == 1 && x == y {
                    VOID_LABEL
                } else {
                    u8::from(x + y + z > 6)
                }
            }),
        ];
        let data = Dataset { items };
        let model = Model::<f32>::new(tiny_model_cfg(Variant::Aet), 3).unwrap();
        for vpp in [false, true] {
            for level in [MetricLevel::Voxel, MetricLevel::Point] {
                let r = evaluate(&model, &data, vpp, level).unwrap();
                let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
                for item in &data.items {
                    let pred = predict_item(&model, item, vpp).unwrap();
                    let pairs: Vec<(u8, u8)> = match level {
                        MetricLevel::Voxel => item
                            .grid
                            .labels
                            .iter()
                            .zip(&pred)
                            .filter(|(&t, _)| t != VOID_LABEL)
                            .map(|(&t, &p)| (t, p))
                            .collect(),
                        MetricLevel::Point => {
                            let projected: Vec<u8> =
                                crate::voxel::project_labels(&item.grid, &pred).unwrap();
                            item.point_truth
                                .iter()
                                .zip(&projected)
                                .map(|(&t, &p)| (t, p))
                                .collect()
                        }
                    };
                    for (t, p) in pairs {
                        match (t, p) {
                            (1, 1) => tp += 1,
                            (0, 1) => fp += 1,
                            (1, 0) => fn_ += 1,
                            (0, 0) => tn += 1,
                            other => panic!("unexpected pair {other:?}"),
                        }
                    }
                }
                assert_eq!((r.tp, r.fp, r.fn_, r.tn), (tp, fp, fn_, tn), "{level} vpp={vpp}");
                let expect = EvalReport::from_counts(tp, fp, fn_, tn, level, vpp);
                assert_eq!(r, expect);
            }
        }
    }

    #[test]
    fn vpp_path_agrees_with_direct_refinement() {
        let item = hand_item(4, |x, y, z| u8::from((x * y + z) % 3 == 0));
        let model = Model::<f32>::new(tiny_model_cfg(Variant::FitV1), 8).unwrap();
        let input = item.grid.features.cast::<f32>();
        let probs = model
            .forward_eval(std::slice::from_ref(&input), None)
            .unwrap();
        let scores = probs[0].cast::<f32>();
        let direct =
            crate::voxel::vpp_refine(&scores, &item.grid.occupancy_counts(), VPP_TAU).unwrap();
        assert_eq!(predict_item(&model, &item, true).unwrap(), direct);
    }

    #[test]
    fn truth_length_mismatch_is_rejected() {
        let mut item = hand_item(4, |_, _, _| 0);
        item.point_truth.pop();
        let data = Dataset { items: vec![item] };
        let model = Model::<f32>::zeros(tiny_model_cfg(Variant::None)).unwrap();
        let err = evaluate(&model, &data, false, MetricLevel::Point).unwrap_err();
        assert!(err.to_string().contains("truth labels"), "{err}");
    }

    #[test]
    fn metric_level_strings_roundtrip() {
        for s in ["voxel", "point"] {
            let l: MetricLevel = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert!("cell".parse::<MetricLevel>().is_err());
    }

    #[test]
    fn jsonl_and_table_artifacts() {
        let a = EvalReport::from_counts(8, 2, 2, 88, MetricLevel::Voxel, false);
        let b = EvalReport::from_counts(0, 0, 5, 95, MetricLevel::Point, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        write_metrics_jsonl(&path, &[a.clone(), b.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let parsed: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed["tp"], 8);
        assert_eq!(parsed["fn"], 2);
        assert_eq!(parsed["level"], "voxel");
        assert_eq!(parsed["vpp_applied"], false);
        let parsed: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(parsed["precision_degenerate"], true);
        assert_eq!(parsed["level"], "point");

        let table = format_metrics_table(&[a, b]);
        let mut rows = table.lines();
        assert!(rows.next().unwrap().starts_with("level"));
        let first = rows.next().unwrap();
        assert!(first.starts_with("voxel"));
        assert!(first.contains("0.8000"));
        let second = rows.next().unwrap();
        assert!(second.starts_with("point"));
        assert!(second.ends_with("(degenerate)"));
    }
}
