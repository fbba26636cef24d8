//! Classification losses on two-class probability maps.
//!
//! All losses consume softmaxed probabilities `[2][D][H][W]` and a per-voxel
//! target in `{0, 1, void}`; void voxels are excluded everywhere. Each loss
//! is the mean over non-void voxels of a per-voxel term:
//!
//! * cross-entropy: `−ln p_t`
//! * weighted cross-entropy: `−w_t · ln p_t`
//! * focal: `−α · (1 − p_t)^γ · ln p_t`
//!
//! where `p_t` is the probability of the target class. Cross-entropy is a
//! deliberately separate code path (not weighted CE with unit weights), so
//! the bitwise `WCE(1,1) == CE` equivalence is a real statement about the
//! shared accumulation order. Gradients are accumulated into `probs.grad`
//! in `f64`; `p_t` is floored at 1e-12 against log-of-zero.

use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Void voxels carry no label and are excluded from losses and metrics.
pub const VOID: u8 = 255;

const P_FLOOR: f64 = 1e-12;

/// Which loss to train with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Ce,
    Wce { w0: f64, w1: f64 },
    Focal { gamma: f64, alpha: f64 },
}

impl LossKind {
    pub fn wce(w0: f64, w1: f64) -> LossKind {
        LossKind::Wce { w0, w1 }
    }

    pub fn focal_default() -> LossKind {
        LossKind::Focal {
            gamma: 2.0,
            alpha: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Ce => Ok(()),
            LossKind::Wce { w0, w1 } => {
                if w0 > 0.0 && w1 > 0.0 {
                    Ok(())
                } else {
                    Err(Error::validation("class weights must be > 0"))
                }
            }
            LossKind::Focal { gamma, alpha } => {
                if gamma >= 0.0 && alpha > 0.0 {
                    Ok(())
                } else {
                    Err(Error::validation("focal needs gamma >= 0 and alpha > 0"))
                }
            }
        }
    }
}

/// Un-normalized loss pieces for one grid: the summed per-voxel terms, the
/// non-void count, and `d(sum)/d(probs)` as a flat buffer. Batch-level
/// losses combine several grids' terms before normalizing, so that the mean
/// runs over every non-void voxel in the batch.
pub struct LossTerms {
    pub sum: f64,
    pub count: usize,
    pub dsum: Vec<f64>,
}

pub fn loss_terms<T: Scalar>(
    probs: &Tensor4<T>,
    target: &[u8],
    kind: LossKind,
) -> Result<LossTerms> {
    if probs.c() != 2 {
        return Err(Error::shape(format!(
            "loss expects 2 channels, got {}",
            probs.c()
        )));
    }
    let sp = probs.spatial();
    if target.len() != sp {
        return Err(Error::shape(format!(
            "target has {} voxels, probs {}",
            target.len(),
            sp
        )));
    }
    kind.validate()?;

    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut dsum = vec![0.0f64; probs.len()];
    for s in 0..sp {
        let t = target[s];
        if t == VOID {
            continue;
        }
        if t > 1 {
            return Err(Error::validation(format!(
                "target label {} is not 0, 1, or void",
                t
            )));
        }
        count += 1;
        let ti = t as usize * sp + s;
        let pt = probs.values()[ti].to_f64().max(P_FLOOR);
        match kind {
            LossKind::Ce => {
                sum += -pt.ln();
                dsum[ti] += -1.0 / pt;
            }
            LossKind::Wce { w0, w1 } => {
                let w = if t == 0 { w0 } else { w1 };
                sum += -(w * pt.ln());
                dsum[ti] += -(w / pt);
            }
            LossKind::Focal { gamma, alpha } => {
                let q = 1.0 - pt;
                sum += -(alpha * q.powf(gamma) * pt.ln());
                // d/dp [−α(1−p)^γ ln p] = αγ(1−p)^(γ−1) ln p − α(1−p)^γ / p
                let t1 = if gamma > 0.0 {
                    alpha * gamma * q.powf(gamma - 1.0) * pt.ln()
                } else {
                    0.0
                };
                dsum[ti] += t1 - alpha * q.powf(gamma) / pt;
            }
        }
    }
    if count == 0 {
        return Err(Error::validation("loss target is entirely void"));
    }
    Ok(LossTerms { sum, count, dsum })
}

fn apply<T: Scalar>(probs: &mut Tensor4<T>, terms: LossTerms) -> f64 {
    let n = terms.count as f64;
    let g = probs.grad_mut();
    for (gv, d) in g.iter_mut().zip(&terms.dsum) {
        *gv = T::from_f64(gv.to_f64() + d / n);
    }
    terms.sum / n
}

/// Unweighted cross-entropy; accumulates `d(loss)/d(probs)` into
/// `probs.grad` and returns the scalar loss.
pub fn ce_loss<T: Scalar>(probs: &mut Tensor4<T>, target: &[u8]) -> Result<f64> {
    let terms = loss_terms(probs, target, LossKind::Ce)?;
    Ok(apply(probs, terms))
}

/// Weighted cross-entropy with per-class weights `(w0, w1)`.
pub fn wce_loss<T: Scalar>(probs: &mut Tensor4<T>, target: &[u8], w0: f64, w1: f64) -> Result<f64> {
    let terms = loss_terms(probs, target, LossKind::Wce { w0, w1 })?;
    Ok(apply(probs, terms))
}

/// Focal loss with focusing parameter `gamma` (default 2) and scale
/// `alpha`.
pub fn focal_loss<T: Scalar>(
    probs: &mut Tensor4<T>,
    target: &[u8],
    gamma: f64,
    alpha: f64,
) -> Result<f64> {
    let terms = loss_terms(probs, target, LossKind::Focal { gamma, alpha })?;
    Ok(apply(probs, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::activ::{softmax2_backward, softmax2_forward};
    use crate::tensor::gradcheck::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_voxel(p0: f64) -> Tensor4<f64> {
        Tensor4::from_values([2, 1, 1, 1], vec![p0, 1.0 - p0]).unwrap()
    }

    #[test]
    fn wce_hand_example_ten_ln_two() {
        let mut p = single_voxel(0.5);
        let loss = wce_loss(&mut p, &[1], 1.0, 10.0).unwrap();
        assert!((loss - 10.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((loss - 6.9315).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_loss_approaches_zero() {
        let mut last = f64::INFINITY;
        for &p in &[0.9, 0.99, 0.999999] {
            let mut t = single_voxel(1.0 - p); // p_target=1 equals p
            let loss = wce_loss(&mut t, &[1], 1.0, 10.0).unwrap();
            assert!(loss > 0.0 && loss < last);
            last = loss;
        }
        assert!(last < 1e-4);
        let mut t = single_voxel(0.0);
        let exact = wce_loss(&mut t, &[1], 1.0, 10.0).unwrap();
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn wce_unit_weights_is_bitwise_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let logits = Tensor4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-2.0..2.0));
        let probs = softmax2_forward(&logits).unwrap();
        let target: Vec<u8> = (0..8).map(|i| [0u8, 1, 255][i % 3]).collect();

        let mut pa = probs.clone();
        let mut pb = probs.clone();
        let la = ce_loss(&mut pa, &target).unwrap();
        let lb = wce_loss(&mut pb, &target, 1.0, 1.0).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        for (a, b) in pa.grad().unwrap().iter().zip(pb.grad().unwrap()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn focal_gamma_zero_alpha_one_is_bitwise_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let logits = Tensor4::<f64>::from_fn([2, 1, 2, 2], |_, _, _, _| rng.gen_range(-2.0..2.0));
        let probs = softmax2_forward(&logits).unwrap();
        let target = vec![0u8, 1, 1, 0];

        let mut pa = probs.clone();
        let mut pb = probs.clone();
        let la = ce_loss(&mut pa, &target).unwrap();
        let lb = focal_loss(&mut pb, &target, 0.0, 1.0).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        for (a, b) in pa.grad().unwrap().iter().zip(pb.grad().unwrap()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn focal_downweights_easy_examples_by_q_gamma() {
        // p_t = 0.9: the focal term is (0.1)² times the CE term.
        let mut pa = single_voxel(0.1);
        let mut pb = single_voxel(0.1);
        let ce = ce_loss(&mut pa, &[1]).unwrap();
        let fl = focal_loss(&mut pb, &[1], 2.0, 1.0).unwrap();
        let ratio = fl / ce;
        assert!((ratio - 0.01).abs() < 1e-12, "ratio {}", ratio);
    }

    #[test]
    fn all_void_target_is_error() {
        let mut p = single_voxel(0.5);
        assert!(ce_loss(&mut p, &[VOID]).is_err());
    }

    #[test]
    fn bad_label_is_error() {
        let mut p = single_voxel(0.5);
        assert!(ce_loss(&mut p, &[7]).is_err());
    }

    #[test]
    fn composite_softmax_wce_gradient_matches_shortcut() {
        // Chained gradient (loss → probs → logits) vs the analytic
        // shortcut dL/dlogit_c = w_t·(p_c − [c = t]) / M.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (w0, w1) = (1.0, 7.0);
        let mut logits =
            Tensor4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-3.0..3.0));
        let target: Vec<u8> = (0..8).map(|i| [0u8, 1, 1, 255][i % 4]).collect();
        let m = target.iter().filter(|&&t| t != VOID).count() as f64;

        let mut probs = softmax2_forward(&logits).unwrap();
        wce_loss(&mut probs, &target, w0, w1).unwrap();
        softmax2_backward(&mut logits, &probs).unwrap();
        let chained = logits.grad().unwrap();

        let sp = 8;
        for s in 0..sp {
            let t = target[s];
            if t == VOID {
                assert_eq!(chained[s], 0.0);
                assert_eq!(chained[sp + s], 0.0);
                continue;
            }
            let w = if t == 0 { w0 } else { w1 };
            for c in 0..2usize {
                let p = probs.values()[c * sp + s];
                let y = if c == t as usize { 1.0 } else { 0.0 };
                let want = w * (p - y) / m;
                assert!(
                    (chained[c * sp + s] - want).abs() < 1e-10,
                    "voxel {} channel {}: {} vs {}",
                    s,
                    c,
                    chained[c * sp + s],
                    want
                );
            }
        }
    }

    #[test]
    fn losses_gradcheck_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let logits0 =
            Tensor4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-2.0..2.0));
        let target: Vec<u8> = (0..8).map(|i| [1u8, 0, 1, 255, 0, 1, 0, 1][i]).collect();

        for kind in [
            LossKind::Ce,
            LossKind::Wce { w0: 1.0, w1: 9.0 },
            LossKind::Focal {
                gamma: 2.0,
                alpha: 0.5,
            },
        ] {
            let eval = |logits: &Tensor4<f64>| -> f64 {
                let probs = softmax2_forward(logits).unwrap();
                let terms = loss_terms(&probs, &target, kind).unwrap();
                terms.sum / terms.count as f64
            };

            let mut logits = logits0.clone();
            let mut probs = softmax2_forward(&logits).unwrap();
            let terms = loss_terms(&probs, &target, kind).unwrap();
            let n = terms.count as f64;
            let g = probs.grad_mut();
            for (gv, d) in g.iter_mut().zip(&terms.dsum) {
                *gv = d / n;
            }
            softmax2_backward(&mut logits, &probs).unwrap();
            let analytic = logits.grad().unwrap().to_vec();

            let mut lm = logits0.clone();
            let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
                let old = lm.values()[i];
                lm.values_mut()[i] = old + dv;
                let l = eval(&lm);
                lm.values_mut()[i] = old;
                l
            });
            assert!(
                max_rel_error(&analytic, &numeric) < 1e-6,
                "gradcheck failed for {:?}",
                kind
            );
        }
    }
}
