//! Training loop, class weighting, and run artifacts.
//!
//! The trainer consumes a [`Dataset`] of voxelized tiles, resolves the loss
//! (deriving inverse-frequency class weights on request), and runs an Adam
//! loop over shuffled mini-batches. Determinism contract: the shuffle is
//! seeded, every kernel reduces in a fixed order, and the batch loss
//! normalizes over all non-void voxels of the batch in item order — so the
//! same seed produces bitwise-identical checkpoints at any worker count.
//!
//! Evaluation ([`eval`]) and the ablation presets ([`ablation`]) live in
//! submodules.

pub mod ablation;
pub mod eval;

pub use ablation::{
    f1_score, format_ablation_table, run_ablation, write_ablation_jsonl, AblationPreset,
    AblationRow, ReferenceRow, REFERENCE_ATTENTION, REFERENCE_COMPARISON, REFERENCE_F1_OUTLIERS,
};
pub use eval::{
    evaluate, format_metrics_table, predict_item, write_metrics_jsonl, EvalReport, MetricLevel,
    VPP_TAU,
};

use crate::config::KvView;
use crate::error::{Error, Result};
use crate::model::{GateCombine, Model, ModelConfig, PriorGating, Variant};
use crate::point::PointCloud;
use crate::priors::PriorPyramid;
use crate::tensor::{loss_terms, Adam, LossKind, Scalar, Tensor4};
use crate::voxel::{tile_cloud, ChannelSet, FeatureGrid, VoxelOptions};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Loss family; WCE weights resolve separately via [`ClassWeights`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    /// Plain cross-entropy.
    Ce,
    /// Focal loss with the default γ = 2, α = 1.
    Fl,
    /// Weighted cross-entropy.
    Wce,
}

impl FromStr for LossChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossChoice::Ce),
            "fl" => Ok(LossChoice::Fl),
            "wce" => Ok(LossChoice::Wce),
            other => Err(Error::validation(format!(
                "unknown loss {other:?}; expected ce, fl, or wce"
            ))),
        }
    }
}

impl fmt::Display for LossChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossChoice::Ce => "ce",
            LossChoice::Fl => "fl",
            LossChoice::Wce => "wce",
        })
    }
}

/// WCE class weights: derived from the dataset's label frequencies, or
/// pinned explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassWeights {
    Auto,
    Fixed { w0: f64, w1: f64 },
}

impl FromStr for ClassWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("auto") {
            return Ok(ClassWeights::Auto);
        }
        let bad = || {
            Error::validation(format!(
                "class weights must be `auto` or `w0,w1`, got {s:?}"
            ))
        };
        let (a, b) = t.split_once(',').ok_or_else(bad)?;
        let w0 = a.trim().parse::<f64>().map_err(|_| bad())?;
        let w1 = b.trim().parse::<f64>().map_err(|_| bad())?;
        Ok(ClassWeights::Fixed { w0, w1 })
    }
}

impl fmt::Display for ClassWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassWeights::Auto => f.write_str("auto"),
            ClassWeights::Fixed { w0, w1 } => write!(f, "{w0},{w1}"),
        }
    }
}

/// Training hyperparameters plus the experiment axes (features, loss,
/// attention variant) the ablations sweep. Also carries the grid geometry
/// so a dataset can be voxelized straight from clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Grids per optimization step.
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossChoice,
    /// Only consulted when `loss` is WCE.
    pub class_weights: ClassWeights,
    /// Seeds the epoch shuffle and, by convention, model initialization.
    pub seed: u64,
    pub variant: Variant,
    pub channel_set: ChannelSet,
    /// Tile edge in voxels; must be divisible by `2^(depth−1)`.
    pub grid_edge: usize,
    pub voxel_size: f64,
    /// Evaluate on the training tiles every this many epochs; 0 disables
    /// per-epoch evaluation.
    pub eval_every: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub gate_combine: GateCombine,
    pub prior_gating: PriorGating,
    pub mz_absolute: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            loss: LossChoice::Wce,
            class_weights: ClassWeights::Auto,
            seed: 0,
            variant: Variant::Aet,
            channel_set: ChannelSet::occ_mz(),
            grid_edge: 32,
            voxel_size: 1.0,
            eval_every: 1,
            depth: 3,
            base_channels: 16,
            gate_combine: GateCombine::Multiplicative,
            prior_gating: PriorGating::Affine,
            mz_absolute: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::validation(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if let ClassWeights::Fixed { w0, w1 } = self.class_weights {
            if !(w0 > 0.0) || !(w1 > 0.0) {
                return Err(Error::validation(format!(
                    "class weights must be > 0, got ({w0}, {w1})"
                )));
            }
        }
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(Error::validation("voxel_size must be finite and > 0"));
        }
        self.model_config().validate()?;
        let div = 1usize << (self.depth - 1);
        if self.grid_edge == 0 || self.grid_edge % div != 0 {
            return Err(Error::validation(format!(
                "grid_edge {} must be a positive multiple of {} for depth {}",
                self.grid_edge, div, self.depth
            )));
        }
        Ok(())
    }

    /// The architecture this config trains.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: self.channel_set.count(),
            out_classes: 2,
            variant: self.variant,
            gate_combine: self.gate_combine,
            prior_gating: self.prior_gating,
            use_prior: true,
        }
    }

    /// Concrete loss for a dataset: WCE resolves `auto` weights from the
    /// dataset's voxel label frequencies.
    pub fn resolved_loss(&self, data: &Dataset) -> Result<LossKind> {
        Ok(match self.loss {
            LossChoice::Ce => LossKind::Ce,
            LossChoice::Fl => LossKind::focal_default(),
            LossChoice::Wce => {
                let (w0, w1) = match self.class_weights {
                    ClassWeights::Fixed { w0, w1 } => (w0, w1),
                    ClassWeights::Auto => derive_class_weights(data)?,
                };
                LossKind::wce(w0, w1)
            }
        })
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("loss".into(), self.loss.to_string()),
            ("class_weights".into(), self.class_weights.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("channels".into(), self.channel_set.to_string()),
            ("grid_edge".into(), self.grid_edge.to_string()),
            ("voxel_size".into(), self.voxel_size.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("gate_combine".into(), self.gate_combine.to_string()),
            ("prior_gating".into(), self.prior_gating.to_string()),
            ("mz_absolute".into(), self.mz_absolute.to_string()),
        ]
    }

    pub fn from_kv(view: &KvView) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: view.parse_or("epochs", d.epochs)?,
            batch_size: view.parse_or("batch_size", d.batch_size)?,
            lr: view.parse_or("lr", d.lr)?,
            loss: view.parse_or("loss", d.loss)?,
            class_weights: view.parse_or("class_weights", d.class_weights)?,
            seed: view.parse_or("seed", d.seed)?,
            variant: view.parse_or("variant", d.variant)?,
            channel_set: view.parse_or("channels", d.channel_set)?,
            grid_edge: view.parse_or("grid_edge", d.grid_edge)?,
            voxel_size: view.parse_or("voxel_size", d.voxel_size)?,
            eval_every: view.parse_or("eval_every", d.eval_every)?,
            depth: view.parse_or("depth", d.depth)?,
            base_channels: view.parse_or("base_channels", d.base_channels)?,
            gate_combine: view.parse_or("gate_combine", d.gate_combine)?,
            prior_gating: view.parse_or("prior_gating", d.prior_gating)?,
            mz_absolute: view.parse_or("mz_absolute", d.mz_absolute)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training tile: its feature grid, the matching prior pyramid, and the
/// truth labels of the tile's source cloud (indexed by the grid's
/// projection) for point-level evaluation.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub grid: FeatureGrid,
    pub pyramid: PriorPyramid,
    pub point_truth: Vec<u8>,
}

/// A collection of training tiles with consistent geometry.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<TrainItem>,
}

impl Dataset {
    /// Tile and voxelize labeled clouds into training items. Pyramids get
    /// one level per model depth; empty tiles are dropped by the tiler.
    pub fn from_clouds(clouds: &[PointCloud], cfg: &TrainConfig) -> Result<Dataset> {
        cfg.validate()?;
        let opts = VoxelOptions {
            channels: cfg.channel_set,
            mz_absolute: cfg.mz_absolute,
        };
        let mut items = Vec::new();
        for cloud in clouds {
            let truth: Vec<u8> = cloud.points().iter().map(|p| p.label).collect();
            for grid in tile_cloud(cloud, cfg.grid_edge, cfg.voxel_size, opts)? {
                let pyramid = PriorPyramid::from_grid(&grid, cfg.depth)?;
                items.push(TrainItem {
                    grid,
                    pyramid,
                    point_truth: truth.clone(),
                });
            }
        }
        Ok(Dataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Non-void voxel label counts `(clean, noise)` over all items.
    pub fn label_counts(&self) -> (u64, u64) {
        let mut n0 = 0u64;
        let mut n1 = 0u64;
        for item in &self.items {
            for &l in &item.grid.labels {
                match l {
                    0 => n0 += 1,
                    1 => n1 += 1,
                    _ => {}
                }
            }
        }
        (n0, n1)
    }

    /// The common grid edge of all items; errors on an empty or
    /// mixed-geometry dataset.
    pub fn common_edge(&self) -> Result<usize> {
        let first = self
            .items
            .first()
            .ok_or_else(|| Error::validation("dataset is empty"))?;
        let edge = first.grid.spec.edge_voxels;
        for (i, item) in self.items.iter().enumerate() {
            if item.grid.spec.edge_voxels != edge {
                return Err(Error::validation(format!(
                    "item {} has grid edge {}, expected {}",
                    i, item.grid.spec.edge_voxels, edge
                )));
            }
        }
        Ok(edge)
    }
}

/// Inverse-frequency class weights over the dataset's non-void voxels,
/// normalized so the clean class gets weight 1: `(1, n_clean/n_noise)`.
/// A dataset where either class is absent cannot be weighted.
pub fn derive_class_weights(data: &Dataset) -> Result<(f64, f64)> {
    let (n0, n1) = data.label_counts();
    if n0 == 0 || n1 == 0 {
        return Err(Error::validation(format!(
            "cannot derive class weights from a single-class dataset ({} clean, {} noise voxels)",
            n0, n1
        )));
    }
    Ok((1.0, n0 as f64 / n1 as f64))
}

/// Batch-level loss: the mean over every non-void voxel in the batch, and
/// the count that mean ran over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    pub voxels: usize,
}

/// Mean loss over all non-void voxels of a batch of probability grids,
/// accumulating `d(mean)/d(probs)` into each grid's gradient buffer. This
/// is the normalization the trainer uses: per-item sums combine before the
/// division, so items with more occupied voxels weigh proportionally more.
pub fn batch_loss<T: Scalar>(
    probs: &mut [Tensor4<T>],
    targets: &[&[u8]],
    kind: LossKind,
) -> Result<BatchLoss> {
    if probs.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    if probs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} probability grids for {} targets",
            probs.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (p, t) in probs.iter().zip(targets) {
        terms.push(loss_terms(p, t, kind)?);
    }
    let voxels: usize = terms.iter().map(|t| t.count).sum();
    let n = voxels as f64;
    let mut sum = 0.0f64;
    for t in &terms {
        sum += t.sum;
    }
    for (p, t) in probs.iter_mut().zip(&terms) {
        let g = p.grad_mut();
        for (gv, d) in g.iter_mut().zip(&t.dsum) {
            *gv = T::from_f64(gv.to_f64() + d / n);
        }
    }
    Ok(BatchLoss {
        mean: sum / n,
        voxels,
    })
}

/// One epoch of the training record: mean train loss over the epoch's
/// voxels, plus a voxel-level evaluation when the cadence asked for one.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub eval: Option<EvalReport>,
}

/// The full training record, one entry per epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Largest absolute parameter gradient; NaN if any gradient is NaN.
fn max_abs_grad<T: Scalar>(model: &Model<T>) -> f64 {
    let mut max = 0.0f64;
    for p in model.params() {
        for g in &p.grad {
            let a = g.to_f64().abs();
            if a.is_nan() {
                return f64::NAN;
            }
            if a > max {
                max = a;
            }
        }
    }
    max
}

/// Run the Adam loop: for each epoch, shuffle the items with the seeded
/// RNG, then for each mini-batch run forward, batch loss, backward, and one
/// optimizer step. Aborts with a diagnostic if the loss or any gradient
/// goes non-finite. The model is updated in place; saving a checkpoint is
/// the caller's choice.
pub fn train<T: Scalar>(model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    data.common_edge()?;
    for (i, item) in data.items.iter().enumerate() {
        if item.grid.features.c() != model.config().in_channels {
            return Err(Error::shape(format!(
                "item {} has {} feature channels, model expects {}",
                i,
                item.grid.features.c(),
                model.config().in_channels
            )));
        }
    }
    let kind = cfg.resolved_loss(data)?;
    let needs_prior = model.config().needs_prior();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut indices: Vec<usize> = (0..data.items.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut voxels = 0usize;
        for (batch, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Tensor4<T>> = chunk
                .iter()
                .map(|&i| data.items[i].grid.features.cast())
                .collect();
            let pyramids: Option<Vec<PriorPyramid>> = needs_prior
                .then(|| chunk.iter().map(|&i| data.items[i].pyramid.clone()).collect());
            let targets: Vec<&[u8]> = chunk
                .iter()
                .map(|&i| data.items[i].grid.labels.as_slice())
                .collect();

            model.zero_grads();
            let mut tape = model.forward_train(inputs, pyramids.as_deref())?;
            let bl = batch_loss(&mut tape.probs, &targets, kind)?;
            model.backward(&mut tape)?;
            let max_grad = max_abs_grad(model);
            if !bl.mean.is_finite() || !max_grad.is_finite() {
                return Err(Error::numeric(format!(
                    "training aborted: non-finite loss {} at epoch {}, batch {} (max |grad| = {})",
                    bl.mean,
                    epoch,
                    batch + 1,
                    max_grad
                )));
            }
            adam.step(&mut model.params_mut());
            sum += bl.mean * bl.voxels as f64;
            voxels += bl.voxels;
        }

        let loss = sum / voxels as f64;
        let eval = if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            Some(evaluate(model, data, false, MetricLevel::Voxel)?)
        } else {
            None
        };
        records.push(EpochRecord { epoch, loss, eval });
    }
    Ok(TrainLog { records })
}

/// Write the training record as `epoch,loss,precision,recall,f1` CSV.
/// Epochs without an evaluation leave the metric columns empty.
pub fn write_loss_curve(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = String::from("epoch,loss,precision,recall,f1\n");
    for r in &log.records {
        match &r.eval {
            Some(e) => out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, e.precision, e.recall, e.f1
            )),
            None => out.push_str(&format!("{},{},,,\n", r.epoch, r.loss)),
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::voxel::{GridSpec, VOID_LABEL};

    /// Hand-built training tile over a unit-voxel grid: constant occupancy
    /// in channel 0, a normalized elevation ramp in channel 1, labels from
    /// the closure (return [`VOID_LABEL`] for empty cells). Every labeled
    /// cell gets exactly one synthetic point, so point-level paths see a
    /// consistent projection.
    pub fn hand_item(edge: usize, label_of: impl Fn(usize, usize, usize) -> u8) -> TrainItem {
        let spec = GridSpec::new([0.0; 3], edge, 1.0).unwrap();
        let n = spec.n_cells();
        let mut labels = vec![VOID_LABEL; n];
        let mut projection = vec![Vec::new(); n];
        let mut point_truth = Vec::new();
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    let ci = (z * edge + y) * edge + x;
                    let l = label_of(x, y, z);
                    labels[ci] = l;
                    if l != VOID_LABEL {
                        projection[ci].push(point_truth.len() as u32);
                        point_truth.push(l);
                    }
                }
            }
        }
        let features = Tensor4::from_fn([2, edge, edge, edge], |c, z, _y, _x| {
            if c == 0 {
                1.0
            } else {
                z as f64 / (edge - 1).max(1) as f64
            }
        });
        let grid = FeatureGrid {
            spec,
            channels: ChannelSet::occ_mz(),
            features,
            projection,
            labels,
            priors: vec![0.0; n],
            n_source_points: point_truth.len(),
            out_of_bounds: 0,
        };
        let levels = edge.trailing_zeros() as usize + 1;
        let pyramid = PriorPyramid::from_grid(&grid, levels).unwrap();
        TrainItem {
            grid,
            pyramid,
            point_truth,
        }
    }

    /// A small config matching [`hand_item`] tiles: edge 4, depth 2.
    pub fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            grid_edge: 4,
            eval_every: 0,
            depth: 2,
            base_channels: 2,
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{hand_item, tiny_cfg};
    use super::*;
    use crate::tensor::ce_loss;
    use crate::voxel::VOID_LABEL;

    fn params_bits<T: Scalar>(model: &Model<T>) -> Vec<u64> {
        model
            .params()
            .iter()
            .flat_map(|p| p.value.iter().map(|v| v.to_f64().to_bits()))
            .collect()
    }

    fn two_item_set() -> Dataset {
        // Item A: noise on the top layer; item B: noise in one corner column.
        let a = hand_item(4, |_, _, z| u8::from(z == 3));
        let b = hand_item(4, |x, y, _| u8::from(x == 0 && y == 0));
        Dataset {
            items: vec![a, b],
        }
    }

    #[test]
    fn class_weights_balanced_split_is_unit() {
        // 4³ = 64 cells, half noise by z.
        let item = hand_item(4, |_, _, z| u8::from(z >= 2));
        let data = Dataset { items: vec![item] };
        assert_eq!(derive_class_weights(&data).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn class_weights_are_inverse_frequency() {
        // 98 clean / 2 noise across 100 labeled cells of a 8³ grid; the
        // remaining cells stay void and must not count.
        let item = hand_item(8, |x, y, z| {
            let ci = (z * 8 + y) * 8 + x;
            if ci >= 100 {
                VOID_LABEL
            } else {
                u8::from(ci < 2)
            }
        });
        let data = Dataset { items: vec![item] };
        let (n0, n1) = data.label_counts();
        assert_eq!((n0, n1), (98, 2));
        assert_eq!(derive_class_weights(&data).unwrap(), (1.0, 49.0));
    }

    #[test]
    fn class_weights_reject_single_class() {
        let item = hand_item(4, |_, _, _| 0);
        let data = Dataset { items: vec![item] };
        let err = derive_class_weights(&data).unwrap_err();
        assert!(err.to_string().contains("single-class"));
    }

    fn rand_probs(seed: u64, sp: usize) -> Tensor4<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor4::zeros([2, 1, 1, sp]);
        for s in 0..sp {
            let p1: f64 = rng.gen_range(0.05..0.95);
            t.values_mut()[s] = 1.0 - p1;
            t.values_mut()[sp + s] = p1;
        }
        t
    }

    #[test]
    fn batch_loss_normalizes_over_all_batch_voxels() {
        let mut a = rand_probs(1, 8);
        let mut b = rand_probs(2, 8);
        let ta = [0u8, 1, VOID_LABEL, 0, 1, 1, 0, VOID_LABEL];
        let tb = [1u8, 1, 0, 0, 0, 0, 0, 0];
        let la = loss_terms(&a, &ta, LossKind::Ce).unwrap();
        let lb = loss_terms(&b, &tb, LossKind::Ce).unwrap();
        let total = (la.count + lb.count) as f64;

        let got = batch_loss(&mut [a.clone(), b.clone()], &[&ta, &tb], LossKind::Ce).unwrap();
        assert_eq!(got.voxels, la.count + lb.count);
        assert_eq!(got.mean, (la.sum + lb.sum) / total);

        let mut batch = [a.clone(), b.clone()];
        batch_loss(&mut batch, &[&ta, &tb], LossKind::Ce).unwrap();
        for (t, terms) in batch.iter().zip([&la, &lb]) {
            let g = t.grad().unwrap();
            for (gv, d) in g.iter().zip(&terms.dsum) {
                assert_eq!(*gv, d / total);
            }
        }

        // A single-grid batch reduces to the per-grid loss.
        let single = batch_loss(&mut [a.clone()], &[&ta], LossKind::Ce).unwrap();
        let mut reference = a.clone();
        let expected = ce_loss(&mut reference, &ta).unwrap();
        assert_eq!(single.mean, expected);
        assert_eq!(a.grad(), None); // input clone untouched
        let _ = b;
    }

    #[test]
    fn batch_wce_unit_weights_is_bitwise_ce() {
        let a = rand_probs(3, 16);
        let b = rand_probs(4, 16);
        let ta: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let tb: Vec<u8> = (0..16).map(|i| u8::from(i % 5 == 0)).collect();

        let mut ce = [a.clone(), b.clone()];
        let mut wce = [a, b];
        let lce = batch_loss(&mut ce, &[&ta, &tb], LossKind::Ce).unwrap();
        let lwce = batch_loss(&mut wce, &[&ta, &tb], LossKind::wce(1.0, 1.0)).unwrap();
        assert_eq!(lce.mean.to_bits(), lwce.mean.to_bits());
        for (c, w) in ce.iter().zip(&wce) {
            let gc = c.grad().unwrap();
            let gw = w.grad().unwrap();
            for (x, y) in gc.iter().zip(gw) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn batch_loss_rejects_mismatched_lengths() {
        let a = rand_probs(5, 8);
        let t = [0u8; 8];
        assert!(batch_loss::<f64>(&mut [], &[], LossKind::Ce).is_err());
        assert!(batch_loss(&mut [a], &[&t, &t], LossKind::Ce).is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = two_item_set();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 1,
            lr: 0.0,
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 7).unwrap();
        let before = params_bits(&model);
        let log = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(params_bits(&model), before);
        assert_eq!(log.records.len(), 4);
        for r in &log.records {
            assert_eq!(r.loss.to_bits(), log.records[0].loss.to_bits());
        }
    }

    #[test]
    fn overfitting_one_tile_drives_loss_down() {
        // One separable tile: noise exactly on the top elevation layer,
        // which channel 1 encodes directly.
        let item = hand_item(4, |_, _, z| u8::from(z == 3));
        let data = Dataset { items: vec![item] };
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            lr: 1e-2,
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 5).unwrap();
        let log = train(&mut model, &data, &cfg).unwrap();
        let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        for e in 5..losses.len() {
            assert!(
                losses[e] < losses[e - 1] + 1e-12,
                "loss rose at epoch {}: {} -> {}",
                e + 1,
                losses[e - 1],
                losses[e]
            );
        }
        assert!(
            losses[losses.len() - 1] <= 0.05,
            "final loss {} above 0.05",
            losses[losses.len() - 1]
        );
    }

    #[test]
    fn same_seed_trains_to_identical_checkpoints() {
        let data = two_item_set();
        let cfg = TrainConfig {
            epochs: 2,
            eval_every: 1,
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        let mut logs = Vec::new();
        for run in 0..2 {
            let mut model = Model::<f32>::new(cfg.model_config(), 11).unwrap();
            let log = train(&mut model, &data, &cfg).unwrap();
            let path = dir.path().join(format!("run{run}.nsw"));
            model.save(&path).unwrap();
            paths.push(path);
            logs.push(log);
        }
        let a = std::fs::read(&paths[0]).unwrap();
        let b = std::fs::read(&paths[1]).unwrap();
        assert_eq!(a, b);
        for (ra, rb) in logs[0].records.iter().zip(&logs[1].records) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.eval, rb.eval);
        }
    }

    #[test]
    fn wce_with_unit_weights_matches_ce_trajectory_bitwise() {
        let data = two_item_set();
        let base = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let ce_cfg = TrainConfig {
            loss: LossChoice::Ce,
            ..base
        };
        let wce_cfg = TrainConfig {
            loss: LossChoice::Wce,
            class_weights: ClassWeights::Fixed { w0: 1.0, w1: 1.0 },
            ..base
        };
        let mut ce_model = Model::<f32>::new(ce_cfg.model_config(), 13).unwrap();
        let mut wce_model = Model::<f32>::new(wce_cfg.model_config(), 13).unwrap();
        let ce_log = train(&mut ce_model, &data, &ce_cfg).unwrap();
        let wce_log = train(&mut wce_model, &data, &wce_cfg).unwrap();
        for (a, b) in ce_log.records.iter().zip(&wce_log.records) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        assert_eq!(params_bits(&ce_model), params_bits(&wce_model));
    }

    #[test]
    fn non_finite_training_aborts_with_diagnostic() {
        let mut item = hand_item(4, |_, _, z| u8::from(z == 3));
        // Poison one input feature; the gradients of the first step go NaN.
        item.grid.features.values_mut()[0] = f32::NAN;
        let data = Dataset { items: vec![item] };
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 1).unwrap();
        let err = train(&mut model, &data, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let msg = err.to_string();
        assert!(msg.contains("epoch 1"), "{msg}");
        assert!(msg.contains("batch 1"), "{msg}");
        assert!(msg.contains("max |grad|"), "{msg}");
    }

    #[test]
    fn eval_cadence_follows_eval_every() {
        let data = two_item_set();
        let cfg = TrainConfig {
            epochs: 5,
            eval_every: 2,
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 3).unwrap();
        let log = train(&mut model, &data, &cfg).unwrap();
        let have: Vec<bool> = log.records.iter().map(|r| r.eval.is_some()).collect();
        assert_eq!(have, [false, true, false, true, false]);
        assert_eq!(
            log.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            [1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_cfg();
        let mut model = Model::<f32>::new(cfg.model_config(), 0).unwrap();
        let err = train(&mut model, &Dataset::default(), &cfg).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let data = two_item_set(); // 2-channel features
        let cfg = TrainConfig {
            channel_set: ChannelSet::parse("occ").unwrap(),
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 0).unwrap();
        let err = train(&mut model, &data, &cfg).unwrap_err();
        assert!(err.to_string().contains("feature channels"), "{err}");
    }

    #[test]
    fn loss_curve_csv_layout() {
        let data = two_item_set();
        let cfg = TrainConfig {
            epochs: 2,
            eval_every: 2,
            ..tiny_cfg()
        };
        let mut model = Model::<f32>::new(cfg.model_config(), 2).unwrap();
        let log = train(&mut model, &data, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_loss_curve(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss,precision,recall,f1");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[1].ends_with(",,,"), "epoch 1 has no eval: {}", lines[1]);
        let fields: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(fields.len(), 5);
        assert_eq!(fields[0], "2");
        assert!(fields.iter().all(|f| !f.is_empty()));
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 3,
            lr: 0.5,
            loss: LossChoice::Fl,
            class_weights: ClassWeights::Fixed { w0: 1.0, w1: 49.0 },
            seed: 99,
            variant: Variant::FitV2,
            channel_set: ChannelSet::all(),
            grid_edge: 16,
            voxel_size: 2.0,
            eval_every: 4,
            depth: 3,
            base_channels: 4,
            gate_combine: GateCombine::Additive,
            prior_gating: PriorGating::Raw,
            mz_absolute: true,
        };
        let kv = cfg.to_kv();
        let text = crate::config::format_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let map = crate::config::parse_kv(&text, Path::new("train.cfg")).unwrap();
        let view = KvView::new(&map, "train.cfg");
        assert_eq!(TrainConfig::from_kv(&view).unwrap(), cfg);

        let empty = std::collections::BTreeMap::new();
        let view = KvView::new(&empty, "empty");
        assert_eq!(TrainConfig::from_kv(&view).unwrap(), TrainConfig::default());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let ok = tiny_cfg();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..ok }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..ok }.validate().is_err());
        assert!(TrainConfig { grid_edge: 6, depth: 3, ..ok }.validate().is_err());
        assert!(TrainConfig {
            class_weights: ClassWeights::Fixed { w0: 0.0, w1: 1.0 },
            ..ok
        }
        .validate()
        .is_err());
        assert!(TrainConfig { voxel_size: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn class_weight_strings_roundtrip() {
        for s in ["auto", "1,49", "1.5,2.5"] {
            let w: ClassWeights = s.parse().unwrap();
            let back: ClassWeights = w.to_string().parse().unwrap();
            assert_eq!(w, back);
        }
        assert!("1;2".parse::<ClassWeights>().is_err());
        assert!("one,two".parse::<ClassWeights>().is_err());
        for s in ["ce", "fl", "wce"] {
            let l: LossChoice = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        assert!("hinge".parse::<LossChoice>().is_err());
    }

    #[test]
    fn dataset_from_clouds_builds_consistent_items() {
        use crate::sim::{simulate_scene, SceneConfig};
        let scene = SceneConfig {
            extent: 16.0,
            ground_density: 2.0,
            object_density: 1.0,
            seed: 4,
            ..SceneConfig::default()
        };
        let (cloud, _) = simulate_scene(&scene).unwrap();
        let cfg = TrainConfig {
            grid_edge: 8,
            voxel_size: 2.0,
            depth: 2,
            ..TrainConfig::default()
        };
        let data = Dataset::from_clouds(&[cloud.clone()], &cfg).unwrap();
        assert!(!data.is_empty());
        assert_eq!(data.common_edge().unwrap(), 8);
        for item in &data.items {
            assert_eq!(item.grid.features.c(), 2);
            assert!(item.pyramid.levels.len() >= cfg.depth);
            assert_eq!(item.point_truth.len(), cloud.len());
            assert_eq!(item.grid.labels.len(), 512);
        }
        // Every in-bounds point of the cloud lands in exactly one tile.
        let covered: usize = data.items.iter().map(|i| i.grid.in_bounds_points()).sum();
        assert_eq!(covered, cloud.len());
    }
}
