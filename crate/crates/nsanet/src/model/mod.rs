//! Dual-attention 3-D encoder–decoder for voxel noise segmentation.
//!
//! The network is a U-shaped encoder–decoder over cubic feature grids. Two
//! attention mechanisms can be enabled independently per [`Variant`]:
//!
//! * **Local** attention gates, `α = σ(ψ(relu(W_x·x + W_g·g)))`, learned
//!   per stage. In the decoder they gate the skip connection with the
//!   upsampled deeper features as gating signal; in the encoder they gate a
//!   stage's output with the stage's input as gating signal.
//! * **Global** prior weighting: features are scaled voxel-wise by a factor
//!   derived from the physical-prior pyramid at the matching resolution —
//!   `1 + P` (affine, default) or `P` (raw).
//!
//! Channel widths double per level (`base · 2^ℓ`), downsampling is 2× max
//! pooling, upsampling is trilinear, skip fusion is channel concatenation,
//! and the head is a pointwise convolution + two-class softmax.
//!
//! Training runs through [`Model::forward_train`], which returns a
//! [`ForwardTape`] of every intermediate tensor; filling the gradient of
//! `tape.probs` and calling [`Model::backward`] propagates gradients into
//! every parameter and down to the input tensors. All reductions follow the
//! fixed-order `f64` accumulation contract of the tensor kernels, so runs
//! are bitwise reproducible at any worker count.

pub mod blocks;

pub use blocks::GateCombine;
use blocks::{accumulate_grad, scale_backward, scale_forward};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{format_kv, read_kv_file, KvView};
use crate::error::{Error, Result};
use crate::priors::PriorPyramid;
use crate::tensor::{
    batch_dims, maxpool2_backward, maxpool2_forward, read_checkpoint, softmax2_backward,
    softmax2_forward, upsample2_backward, upsample2_forward, write_checkpoint, BatchNorm, Conv1,
    NamedTensor, Param, Scalar, Tensor4,
};

use blocks::{BlockTape, ConvBlock, Gate, GateTape};

/// Which attention paths are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Attention-enhanced decoder: local gates and global prior weighting on
    /// the decoder path only. This is the reference configuration.
    Aet,
    /// Local gates on both encoder and decoder, no global weighting.
    FitV1,
    /// Both attentions on both paths.
    FitV2,
    /// Plain encoder–decoder; no gates, no prior weighting.
    None,
}

impl Variant {
    /// Local gates on encoder stages (all but the stem).
    pub fn enc_local_gate(self) -> bool {
        matches!(self, Variant::FitV1 | Variant::FitV2)
    }

    /// Global prior weighting on encoder stage outputs.
    pub fn enc_global(self) -> bool {
        matches!(self, Variant::FitV2)
    }

    /// Local gates on decoder skip connections.
    pub fn dec_local_gate(self) -> bool {
        matches!(self, Variant::Aet | Variant::FitV1 | Variant::FitV2)
    }

    /// Global prior weighting on the fused decoder features.
    pub fn dec_global(self) -> bool {
        matches!(self, Variant::Aet | Variant::FitV2)
    }

    pub const ALL: [Variant; 4] = [Variant::Aet, Variant::FitV1, Variant::FitV2, Variant::None];
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aet" => Ok(Variant::Aet),
            "fit-v1" => Ok(Variant::FitV1),
            "fit-v2" => Ok(Variant::FitV2),
            "none" => Ok(Variant::None),
            other => Err(Error::validation(format!(
                "unknown variant {other:?}; expected aet, fit-v1, fit-v2, or none"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Aet => "aet",
            Variant::FitV1 => "fit-v1",
            Variant::FitV2 => "fit-v2",
            Variant::None => "none",
        })
    }
}

/// How prior probabilities become multiplicative factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorGating {
    /// `factor = 1 + P`: priors amplify, never suppress; `P ≡ 0` is the
    /// exact identity.
    Affine,
    /// `factor = P`: raw weighting, zeroes out cells with zero prior.
    Raw,
}

impl std::str::FromStr for PriorGating {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(PriorGating::Affine),
            "raw" => Ok(PriorGating::Raw),
            other => Err(Error::validation(format!(
                "unknown prior gating {other:?}; expected affine or raw"
            ))),
        }
    }
}

impl std::fmt::Display for PriorGating {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorGating::Affine => "affine",
            PriorGating::Raw => "raw",
        })
    }
}

/// Architecture hyperparameters. Serialized as a `key = value` sidecar next
/// to checkpoints so a saved model can be rebuilt without external context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Number of resolution levels (encoder stages). The grid edge must be
    /// divisible by `2^(depth−1)`.
    pub depth: usize,
    /// Channels at full resolution; level ℓ has `base_channels · 2^ℓ`.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Fixed at 2 (clean vs noise); kept explicit for the checkpoint sidecar.
    pub out_classes: usize,
    pub variant: Variant,
    pub gate_combine: GateCombine,
    pub prior_gating: PriorGating,
    /// Master switch for the global prior path; lets any variant run
    /// prior-free for ablations without changing its gate wiring.
    pub use_prior: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 32,
            in_channels: 2,
            out_classes: 2,
            variant: Variant::Aet,
            gate_combine: GateCombine::Multiplicative,
            prior_gating: PriorGating::Affine,
            use_prior: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 8 {
            return Err(Error::validation(format!(
                "depth must be in 2..=8, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::validation("base_channels must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::validation("in_channels must be positive"));
        }
        if self.out_classes != 2 {
            return Err(Error::validation(format!(
                "out_classes must be 2 (clean vs noise), got {}",
                self.out_classes
            )));
        }
        Ok(())
    }

    /// Channel width at level `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the grid edge.
    pub fn edge_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Whether forward passes need a prior pyramid per batch item.
    pub fn needs_prior(&self) -> bool {
        self.use_prior && (self.variant.enc_global() || self.variant.dec_global())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("depth".into(), self.depth.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("out_classes".into(), self.out_classes.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("gate_combine".into(), self.gate_combine.to_string()),
            ("prior_gating".into(), self.prior_gating.to_string()),
            ("use_prior".into(), self.use_prior.to_string()),
        ]
    }

    pub fn from_kv(view: &KvView) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            depth: view.parse_or("depth", d.depth)?,
            base_channels: view.parse_or("base_channels", d.base_channels)?,
            in_channels: view.parse_or("in_channels", d.in_channels)?,
            out_classes: view.parse_or("out_classes", d.out_classes)?,
            variant: view.parse_or("variant", d.variant)?,
            gate_combine: view.parse_or("gate_combine", d.gate_combine)?,
            prior_gating: view.parse_or("prior_gating", d.prior_gating)?,
            use_prior: view.parse_or("use_prior", d.use_prior)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct EncStage<T: Scalar> {
    block: ConvBlock<T>,
    gate: Option<Gate<T>>,
}

#[derive(Debug)]
struct DecStage<T: Scalar> {
    block: ConvBlock<T>,
    gate: Option<Gate<T>>,
}

/// The segmentation network. Generic over the storage scalar: `f32` for
/// training, `f64` for gradient checks and parity oracles.
#[derive(Debug)]
pub struct Model<T: Scalar> {
    cfg: ModelConfig,
    /// Stages by level, 0 (full resolution) .. depth−1 (bridge).
    enc: Vec<EncStage<T>>,
    /// Stages by level, 0 .. depth−2. Constructed (and enumerated for
    /// initialization/checkpoints) deepest level first.
    dec: Vec<DecStage<T>>,
    head: Conv1<T>,
}

/// Intermediates of one encoder stage, in data-flow order.
#[derive(Debug)]
struct EncTape<T: Scalar> {
    block: BlockTape<T>,
    gate: Option<GateTape<T>>,
    /// Gate output if the stage is gated, block output otherwise.
    pre_scale: Vec<Tensor4<T>>,
    /// Per-item global weighting factors, if active at this stage.
    factor: Option<Vec<Vec<f64>>>,
    /// Stage output: `pre_scale` scaled by `factor` (copy when inactive).
    out: Vec<Tensor4<T>>,
    /// Routing of the max-pool that produced this stage's *input*
    /// (levels ≥ 1 only).
    pool_argmax: Option<Vec<Vec<u32>>>,
}

/// Intermediates of one decoder stage.
#[derive(Debug)]
struct DecTape<T: Scalar> {
    /// Upsampled deeper features.
    up: Vec<Tensor4<T>>,
    gate: Option<GateTape<T>>,
    /// Skip features entering the concat: gate output when gated, a copy of
    /// the encoder output otherwise.
    skip_feats: Vec<Tensor4<T>>,
    /// `concat(up, skip_feats)`.
    cat: Vec<Tensor4<T>>,
    factor: Option<Vec<Vec<f64>>>,
    block: BlockTape<T>,
    out: Vec<Tensor4<T>>,
}

fn factor_slice(factor: &Option<Vec<Vec<f64>>>, i: usize) -> Option<&[f64]> {
    factor.as_ref().map(|f| f[i].as_slice())
}

/// Everything a train-mode forward produces: per-stage intermediates plus
/// the final class probabilities. Fill `probs[i].grad_mut()` with the loss
/// gradient and hand the tape to [`Model::backward`].
#[derive(Debug)]
pub struct ForwardTape<T: Scalar> {
    enc: Vec<EncTape<T>>,
    dec: Vec<DecTape<T>>,
    logits: Vec<Tensor4<T>>,
    /// Softmax class scores per item, dims `[2, e, e, e]`.
    pub probs: Vec<Tensor4<T>>,
}

impl<T: Scalar> ForwardTape<T> {
    pub fn batch_len(&self) -> usize {
        self.probs.len()
    }

    /// Gradient with respect to the model input of batch item `i`;
    /// available after [`Model::backward`].
    pub fn input_grad(&self, i: usize) -> Result<&[T]> {
        self.enc[0].block.x[i].grad_required()
    }
}

impl<T: Scalar> Model<T> {
    /// Build a model with all-zero convolution weights (batch-norm scale 1).
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut enc = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let c_in = if level == 0 {
                cfg.in_channels
            } else {
                cfg.channels(level - 1)
            };
            let c_out = cfg.channels(level);
            let name = format!("enc{level}");
            let gate = (level > 0 && cfg.variant.enc_local_gate())
                .then(|| Gate::zeros(&format!("{name}.gate"), c_out, c_in));
            enc.push(EncStage {
                block: ConvBlock::zeros(&name, c_in, c_out),
                gate,
            });
        }
        let mut dec = Vec::with_capacity(cfg.depth - 1);
        for level in 0..cfg.depth - 1 {
            let c_skip = cfg.channels(level);
            let c_deep = cfg.channels(level + 1);
            let name = format!("dec{level}");
            let gate = cfg
                .variant
                .dec_local_gate()
                .then(|| Gate::zeros(&format!("{name}.gate"), c_skip, c_deep));
            dec.push(DecStage {
                block: ConvBlock::zeros(&name, c_deep + c_skip, c_skip),
                gate,
            });
        }
        let head = Conv1::zeros("head", cfg.base_channels, cfg.out_classes);
        Ok(Model { cfg, enc, dec, head })
    }

    /// Build and initialize: convolution weights drawn from N(0, √(2/fan_in))
    /// with a seeded generator, biases zero, batch-norm scale 1 / shift 0.
    /// The same seed and config always produce bitwise-identical parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            if !p.name.ends_with(".w") {
                continue;
            }
            // Conv3 weights are [c_out, c_in, 3, 3, 3]; pointwise are
            // [c_out, c_in].
            let fan_in = match p.dims.len() {
                5 => p.dims[1] * 27,
                2 => p.dims[1],
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .expect("std is finite and positive");
            for v in p.value.iter_mut() {
                *v = T::from_f64(normal.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Parameters in the fixed enumeration order used everywhere (init,
    /// optimizer, checkpoints): encoder stages by ascending level, decoder
    /// stages deepest first, head last; within a stage the block parameters
    /// precede the gate's.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for stage in &self.enc {
            out.extend(stage.block.params());
            if let Some(g) = &stage.gate {
                out.extend(g.params());
            }
        }
        for stage in self.dec.iter().rev() {
            out.extend(stage.block.params());
            if let Some(g) = &stage.gate {
                out.extend(g.params());
            }
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for stage in &mut self.enc {
            out.extend(stage.block.params_mut());
            if let Some(g) = &mut stage.gate {
                out.extend(g.params_mut());
            }
        }
        for stage in self.dec.iter_mut().rev() {
            out.extend(stage.block.params_mut());
            if let Some(g) = &mut stage.gate {
                out.extend(g.params_mut());
            }
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Total number of scalar parameters.
    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Batch norms in the same stage order as [`Model::params`].
    fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = Vec::new();
        for stage in &self.enc {
            out.push(&stage.block.bn1);
            out.push(&stage.block.bn2);
        }
        for stage in self.dec.iter().rev() {
            out.push(&stage.block.bn1);
            out.push(&stage.block.bn2);
        }
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        for stage in &mut self.enc {
            out.push(&mut stage.block.bn1);
            out.push(&mut stage.block.bn2);
        }
        for stage in self.dec.iter_mut().rev() {
            out.push(&mut stage.block.bn1);
            out.push(&mut stage.block.bn2);
        }
        out
    }

    /// Copy to another storage scalar (values and running statistics; grads
    /// reset). Used to rerun an `f32` model's forward in `f64`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.cfg).expect("config was validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            debug_assert_eq!(dst.name, src.name);
            *dst = src.cast();
        }
        for (dst, src) in out
            .batch_norms_mut()
            .into_iter()
            .zip(self.batch_norms())
        {
            dst.running_mean = src.running_mean.clone();
            dst.running_var = src.running_var.clone();
        }
        out
    }

    /// Validate batch dims and return the (cubic) grid edge.
    fn check_input_dims(&self, inputs: &[Tensor4<T>]) -> Result<usize> {
        let [c, d, h, w] = batch_dims(inputs)?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.cfg.in_channels, c
            )));
        }
        if d != h || h != w {
            return Err(Error::shape(format!(
                "model expects cubic grids, got {d}×{h}×{w}"
            )));
        }
        let div = self.cfg.edge_divisor();
        if d == 0 || d % div != 0 {
            return Err(Error::shape(format!(
                "grid edge {d} must be a positive multiple of {div} for depth {}",
                self.cfg.depth
            )));
        }
        Ok(d)
    }

    /// Validate prior pyramids against the batch. Returns `None` when the
    /// configuration does not use priors (any supplied pyramids are ignored).
    fn check_pyramids<'a>(
        &self,
        pyramids: Option<&'a [PriorPyramid]>,
        n: usize,
        edge: usize,
    ) -> Result<Option<&'a [PriorPyramid]>> {
        if !self.cfg.needs_prior() {
            return Ok(None);
        }
        let pyr = pyramids.ok_or_else(|| {
            Error::validation(format!(
                "variant {} with prior weighting enabled requires one prior pyramid per batch item",
                self.cfg.variant
            ))
        })?;
        if pyr.len() != n {
            return Err(Error::shape(format!(
                "got {} prior pyramids for a batch of {n}",
                pyr.len()
            )));
        }
        for (i, p) in pyr.iter().enumerate() {
            if p.levels.len() < self.cfg.depth {
                return Err(Error::shape(format!(
                    "pyramid {i} has {} levels, need at least {}",
                    p.levels.len(),
                    self.cfg.depth
                )));
            }
            for level in 0..self.cfg.depth {
                let e = edge >> level;
                if p.levels[level].dims != [e, e, e] {
                    return Err(Error::shape(format!(
                        "pyramid {i} level {level} dims {:?} do not match the grid ({e}³)",
                        p.levels[level].dims
                    )));
                }
            }
        }
        Ok(Some(pyr))
    }

    /// Per-item weighting factors for `level`, or `None` when inactive.
    fn prior_factors(
        &self,
        pyr: Option<&[PriorPyramid]>,
        level: usize,
        active: bool,
    ) -> Option<Vec<Vec<f64>>> {
        if !active {
            return None;
        }
        let pyr = pyr?;
        Some(
            pyr.iter()
                .map(|p| {
                    p.levels[level]
                        .probs
                        .iter()
                        .map(|&v| match self.cfg.prior_gating {
                            PriorGating::Affine => 1.0 + v,
                            PriorGating::Raw => v,
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Train-mode forward pass. Takes ownership of the input batch (its
    /// gradients are produced in the tape by [`Model::backward`]).
    /// `pyramids` must hold one pyramid per item when the configuration uses
    /// priors; pass `None` otherwise.
    pub fn forward_train(
        &mut self,
        inputs: Vec<Tensor4<T>>,
        pyramids: Option<&[PriorPyramid]>,
    ) -> Result<ForwardTape<T>> {
        let edge = self.check_input_dims(&inputs)?;
        let n = inputs.len();
        let pyr = self.check_pyramids(pyramids, n, edge)?;
        let depth = self.cfg.depth;
        let combine = self.cfg.gate_combine;
        let enc_global = self.cfg.use_prior && self.cfg.variant.enc_global();
        let dec_global = self.cfg.use_prior && self.cfg.variant.dec_global();

        // Encoder: block → [gate] → [global] → pool.
        let mut enc_tapes: Vec<EncTape<T>> = Vec::with_capacity(depth);
        let mut carry = inputs;
        let mut carry_argmax: Option<Vec<Vec<u32>>> = None;
        for level in 0..depth {
            let g_src = self.enc[level].gate.is_some().then(|| carry.clone());
            let (block_tape, block_out) = self.enc[level].block.forward_train(carry)?;
            let (gate_tape, pre_scale) = match g_src {
                Some(g) => {
                    let gate = self.enc[level].gate.as_ref().expect("gated stage");
                    let (gt, out) = gate.forward(block_out, g, combine)?;
                    (Some(gt), out)
                }
                None => (None, block_out),
            };
            let factor = self.prior_factors(pyr, level, enc_global);
            let mut out = Vec::with_capacity(n);
            for (i, t) in pre_scale.iter().enumerate() {
                out.push(scale_forward(t, factor_slice(&factor, i))?);
            }
            let (next, next_argmax) = if level + 1 < depth {
                let mut pooled = Vec::with_capacity(n);
                let mut am = Vec::with_capacity(n);
                for t in &out {
                    let (p, a) = maxpool2_forward(t)?;
                    pooled.push(p);
                    am.push(a);
                }
                (pooled, Some(am))
            } else {
                (Vec::new(), None)
            };
            enc_tapes.push(EncTape {
                block: block_tape,
                gate: gate_tape,
                pre_scale,
                factor,
                out,
                pool_argmax: carry_argmax.take(),
            });
            carry = next;
            carry_argmax = next_argmax;
        }

        // Decoder: upsample → gated skip → concat → [global] → block.
        let mut dec_tapes: Vec<DecTape<T>> = Vec::with_capacity(depth - 1);
        for level in (0..depth - 1).rev() {
            let deeper_out = if level + 1 == depth - 1 {
                &enc_tapes[depth - 1].out
            } else {
                &dec_tapes.last().expect("deeper stage processed first").out
            };
            let up: Vec<Tensor4<T>> = deeper_out.iter().map(upsample2_forward).collect();
            let skip = &enc_tapes[level].out;
            let (gate_tape, skip_feats) = match self.dec[level].gate.as_ref() {
                Some(gate) => {
                    let (gt, out) = gate.forward(skip.clone(), up.clone(), combine)?;
                    (Some(gt), out)
                }
                None => (None, skip.clone()),
            };
            let cat: Vec<Tensor4<T>> = up
                .iter()
                .zip(&skip_feats)
                .map(|(u, s)| Tensor4::concat_channels(u, s))
                .collect::<Result<_>>()?;
            let factor = self.prior_factors(pyr, level, dec_global);
            let mut scaled = Vec::with_capacity(n);
            for (i, t) in cat.iter().enumerate() {
                scaled.push(scale_forward(t, factor_slice(&factor, i))?);
            }
            let (block_tape, out) = self.dec[level].block.forward_train(scaled)?;
            dec_tapes.push(DecTape {
                up,
                gate: gate_tape,
                skip_feats,
                cat,
                factor,
                block: block_tape,
                out,
            });
        }
        dec_tapes.reverse(); // index by level, ascending

        let logits: Vec<Tensor4<T>> = dec_tapes[0]
            .out
            .iter()
            .map(|t| self.head.forward(t))
            .collect::<Result<_>>()?;
        let probs: Vec<Tensor4<T>> = logits
            .iter()
            .map(softmax2_forward)
            .collect::<Result<_>>()?;
        Ok(ForwardTape {
            enc: enc_tapes,
            dec: dec_tapes,
            logits,
            probs,
        })
    }

    /// Eval-mode forward: running batch-norm statistics, no tape, no state
    /// change. Each item is processed independently, so results do not
    /// depend on batch composition or order.
    pub fn forward_eval(
        &self,
        inputs: &[Tensor4<T>],
        pyramids: Option<&[PriorPyramid]>,
    ) -> Result<Vec<Tensor4<T>>> {
        let edge = self.check_input_dims(inputs)?;
        let n = inputs.len();
        let pyr = self.check_pyramids(pyramids, n, edge)?;
        let depth = self.cfg.depth;
        let combine = self.cfg.gate_combine;
        let enc_global = self.cfg.use_prior && self.cfg.variant.enc_global();
        let dec_global = self.cfg.use_prior && self.cfg.variant.dec_global();

        let mut stage_outs: Vec<Vec<Tensor4<T>>> = Vec::with_capacity(depth);
        let mut carry: Vec<Tensor4<T>> = inputs.to_vec();
        for level in 0..depth {
            let block_out = self.enc[level].block.forward_eval(&carry)?;
            let pre_scale = match self.enc[level].gate.as_ref() {
                Some(gate) => gate.forward(block_out, carry.clone(), combine)?.1,
                None => block_out,
            };
            let factor = self.prior_factors(pyr, level, enc_global);
            let mut out = Vec::with_capacity(n);
            for (i, t) in pre_scale.iter().enumerate() {
                out.push(scale_forward(t, factor_slice(&factor, i))?);
            }
            carry = if level + 1 < depth {
                out.iter()
                    .map(|t| maxpool2_forward(t).map(|(p, _)| p))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            stage_outs.push(out);
        }

        let mut current = stage_outs[depth - 1].clone();
        for level in (0..depth - 1).rev() {
            let up: Vec<Tensor4<T>> = current.iter().map(upsample2_forward).collect();
            let skip = &stage_outs[level];
            let skip_feats = match self.dec[level].gate.as_ref() {
                Some(gate) => gate.forward(skip.clone(), up.clone(), combine)?.1,
                None => skip.clone(),
            };
            let cat: Vec<Tensor4<T>> = up
                .iter()
                .zip(&skip_feats)
                .map(|(u, s)| Tensor4::concat_channels(u, s))
                .collect::<Result<_>>()?;
            let factor = self.prior_factors(pyr, level, dec_global);
            let mut scaled = Vec::with_capacity(n);
            for (i, t) in cat.iter().enumerate() {
                scaled.push(scale_forward(t, factor_slice(&factor, i))?);
            }
            current = self.dec[level].block.forward_eval(&scaled)?;
        }

        current
            .iter()
            .map(|t| self.head.forward(t).and_then(|l| softmax2_forward(&l)))
            .collect()
    }

    /// Backward pass. Expects the loss gradient in `tape.probs[i].grad`;
    /// accumulates parameter gradients and input gradients
    /// ([`ForwardTape::input_grad`]). Call [`Model::zero_grads`] first when
    /// starting a fresh step.
    pub fn backward(&mut self, tape: &mut ForwardTape<T>) -> Result<()> {
        let depth = self.cfg.depth;
        let n = tape.probs.len();
        let combine = self.cfg.gate_combine;

        for i in 0..n {
            softmax2_backward(&mut tape.logits[i], &tape.probs[i])?;
        }
        for i in 0..n {
            self.head.backward(&mut tape.dec[0].out[i], &tape.logits[i])?;
        }

        // Decoder stages, shallowest first (reverse of the forward order).
        for level in 0..depth - 1 {
            let (shallower, deeper) = tape.dec.split_at_mut(level + 1);
            let dt = &mut shallower[level];
            let stage = &mut self.dec[level];
            stage.block.backward(&mut dt.block, &dt.out)?;
            for i in 0..n {
                scale_backward(&mut dt.cat[i], &dt.block.x[i], factor_slice(&dt.factor, i))?;
            }
            for i in 0..n {
                Tensor4::split_grad_into(&dt.cat[i], &mut dt.up[i], &mut dt.skip_feats[i])?;
            }
            match (stage.gate.as_mut(), dt.gate.as_mut()) {
                (Some(gate), Some(gt)) => {
                    gate.backward(gt, &dt.skip_feats, combine)?;
                    for i in 0..n {
                        accumulate_grad(&mut tape.enc[level].out[i], &gt.x[i])?;
                        accumulate_grad(&mut dt.up[i], &gt.g[i])?;
                    }
                }
                (None, None) => {
                    for i in 0..n {
                        accumulate_grad(&mut tape.enc[level].out[i], &dt.skip_feats[i])?;
                    }
                }
                _ => {
                    return Err(Error::shape(
                        "decoder tape does not match the model's gate wiring",
                    ))
                }
            }
            let deeper_out = if level + 1 == depth - 1 {
                &mut tape.enc[depth - 1].out
            } else {
                &mut deeper[0].out
            };
            for i in 0..n {
                upsample2_backward(&mut deeper_out[i], &dt.up[i])?;
            }
        }

        // Encoder stages, deepest first.
        for level in (0..depth).rev() {
            let (shallower, this) = tape.enc.split_at_mut(level);
            let et = &mut this[0];
            let stage = &mut self.enc[level];
            for i in 0..n {
                scale_backward(&mut et.pre_scale[i], &et.out[i], factor_slice(&et.factor, i))?;
            }
            match (stage.gate.as_mut(), et.gate.as_mut()) {
                (Some(gate), Some(gt)) => {
                    gate.backward(gt, &et.pre_scale, combine)?;
                    stage.block.backward(&mut et.block, &gt.x)?;
                    for i in 0..n {
                        accumulate_grad(&mut et.block.x[i], &gt.g[i])?;
                    }
                }
                (None, None) => {
                    stage.block.backward(&mut et.block, &et.pre_scale)?;
                }
                _ => {
                    return Err(Error::shape(
                        "encoder tape does not match the model's gate wiring",
                    ))
                }
            }
            if level > 0 {
                let prev = &mut shallower[level - 1];
                let argmax = et.pool_argmax.as_ref().expect("pooled stage input");
                for i in 0..n {
                    maxpool2_backward(&mut prev.out[i], &et.block.x[i], &argmax[i])?;
                }
            }
        }
        Ok(())
    }

    /// Write parameters plus batch-norm running statistics to `path`, and
    /// the architecture config to `path + ".cfg"`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        for p in self.params() {
            tensors.push(NamedTensor::new(
                p.name.clone(),
                p.dims.clone(),
                p.value.iter().map(|v| v.to_f64() as f32).collect(),
            )?);
        }
        for bn in self.batch_norms() {
            let base = bn
                .gamma
                .name
                .strip_suffix(".gamma")
                .expect("batch-norm scale is named <base>.gamma");
            for (suffix, stats) in [
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                tensors.push(NamedTensor::new(
                    format!("{base}.{suffix}"),
                    vec![stats.len()],
                    stats.iter().map(|&v| v as f32).collect(),
                )?);
            }
        }
        write_checkpoint(path, &tensors)?;
        std::fs::write(Self::cfg_path(path), format_kv_owned(&self.cfg.to_kv()))
            .map_err(|e| Error::io(Self::cfg_path(path), e))?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint and its config sidecar. Every
    /// parameter and running statistic must be present with matching dims,
    /// and the checkpoint must not contain unknown tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = Self::cfg_path(path);
        let map = read_kv_file(&cfg_path)?;
        let view = KvView::new(&map, cfg_path.display().to_string());
        let cfg = ModelConfig::from_kv(&view)?;
        let mut model = Self::zeros(cfg)?;

        let mut by_name: std::collections::BTreeMap<String, NamedTensor> = read_checkpoint(path)?
            .into_iter()
            .map(|t| (t.name.clone(), t))
            .collect();
        for p in model.params_mut() {
            let t = by_name.remove(&p.name).ok_or_else(|| {
                Error::format(path, 0, format!("checkpoint is missing tensor {:?}", p.name))
            })?;
            if t.dims != p.dims {
                return Err(Error::format(
                    path,
                    0,
                    format!(
                        "tensor {:?} has dims {:?}, expected {:?}",
                        p.name, t.dims, p.dims
                    ),
                ));
            }
            for (dst, src) in p.value.iter_mut().zip(&t.data) {
                *dst = T::from_f64(*src as f64);
            }
        }
        for bn in model.batch_norms_mut() {
            let base = bn
                .gamma
                .name
                .strip_suffix(".gamma")
                .expect("batch-norm scale is named <base>.gamma")
                .to_string();
            for (suffix, stats) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{base}.{suffix}");
                let t = by_name.remove(&name).ok_or_else(|| {
                    Error::format(path, 0, format!("checkpoint is missing tensor {name:?}"))
                })?;
                if t.data.len() != stats.len() {
                    return Err(Error::format(
                        path,
                        0,
                        format!(
                            "tensor {name:?} has {} entries, expected {}",
                            t.data.len(),
                            stats.len()
                        ),
                    ));
                }
                for (dst, src) in stats.iter_mut().zip(&t.data) {
                    *dst = *src as f64;
                }
            }
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::format(
                path,
                0,
                format!("checkpoint contains unknown tensor {name:?} for this architecture"),
            ));
        }
        Ok(model)
    }

    /// Path of the config sidecar for a checkpoint at `path`.
    pub fn cfg_path(path: &Path) -> PathBuf {
        let mut os = path.as_os_str().to_os_string();
        os.push(".cfg");
        PathBuf::from(os)
    }
}

fn format_kv_owned(pairs: &[(String, String)]) -> String {
    format_kv(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

/// Hard labels from class scores: noise (1) wherever its score is at least
/// the clean score, so exact ties resolve to noise.
pub fn predict_labels<T: Scalar>(probs: &Tensor4<T>) -> Result<Vec<u8>> {
    if probs.c() != 2 {
        return Err(Error::shape(format!(
            "predict expects 2 class channels, got {}",
            probs.c()
        )));
    }
    let sp = probs.spatial();
    let v = probs.values();
    Ok((0..sp)
        .map(|i| u8::from(v[sp + i].to_f64() >= v[i].to_f64()))
        .collect())
}
