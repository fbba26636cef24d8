//! Elementwise activations and the two-class channel softmax.

use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// `max(x, 0)` elementwise.
pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.drop_grad();
    for v in y.values_mut() {
        if v.to_f64() < 0.0 {
            *v = T::ZERO;
        }
    }
    y
}

/// Reads `y.grad`, accumulates `dy · [x > 0]` into `x.grad`. `x` must be the
/// forward input.
pub fn relu_backward<T: Scalar>(x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape("relu backward shape mismatch"));
    }
    let gy = y.grad_required()?.to_vec();
    let mask: Vec<bool> = x.values().iter().map(|v| v.to_f64() > 0.0).collect();
    let gx = x.grad_mut();
    for i in 0..gx.len() {
        if mask[i] {
            gx[i] = T::from_f64(gx[i].to_f64() + gy[i].to_f64());
        }
    }
    Ok(())
}

/// Logistic function elementwise.
pub fn sigmoid_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    y.drop_grad();
    for v in y.values_mut() {
        *v = T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp()));
    }
    y
}

/// Reads `y.grad`, accumulates `dy · s·(1−s)` into `x.grad`, where `s` is
/// the forward output `y`.
pub fn sigmoid_backward<T: Scalar>(x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape("sigmoid backward shape mismatch"));
    }
    let gy = y.grad_required()?.to_vec();
    let s: Vec<f64> = y.values().iter().map(|v| v.to_f64()).collect();
    let gx = x.grad_mut();
    for i in 0..gx.len() {
        let d = gy[i].to_f64() * s[i] * (1.0 - s[i]);
        gx[i] = T::from_f64(gx[i].to_f64() + d);
    }
    Ok(())
}

/// Softmax across a 2-channel axis, numerically stabilized by subtracting
/// the per-voxel max. Output channels sum to 1 at every voxel.
pub fn softmax2_forward<T: Scalar>(logits: &Tensor4<T>) -> Result<Tensor4<T>> {
    if logits.c() != 2 {
        return Err(Error::shape(format!(
            "softmax2 expects 2 channels, got {}",
            logits.c()
        )));
    }
    let sp = logits.spatial();
    let mut y = Tensor4::zeros(logits.dims());
    for s in 0..sp {
        let a = logits.values()[s].to_f64();
        let b = logits.values()[sp + s].to_f64();
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let sum = ea + eb;
        y.values_mut()[s] = T::from_f64(ea / sum);
        y.values_mut()[sp + s] = T::from_f64(eb / sum);
    }
    Ok(y)
}

/// Reads `probs.grad` (gradient w.r.t. the softmax output), accumulates the
/// gradient w.r.t. the logits into `logits.grad` using
/// `dlogit_c = p_c·(dy_c − Σ_k p_k·dy_k)`.
pub fn softmax2_backward<T: Scalar>(logits: &mut Tensor4<T>, probs: &Tensor4<T>) -> Result<()> {
    if logits.dims() != probs.dims() {
        return Err(Error::shape("softmax2 backward shape mismatch"));
    }
    let gy = probs.grad_required()?.to_vec();
    let sp = logits.spatial();
    let pv: Vec<f64> = probs.values().iter().map(|v| v.to_f64()).collect();
    let gx = logits.grad_mut();
    for s in 0..sp {
        let (p0, p1) = (pv[s], pv[sp + s]);
        let (g0, g1) = (gy[s].to_f64(), gy[sp + s].to_f64());
        let dot = p0 * g0 + p1 * g1;
        gx[s] = T::from_f64(gx[s].to_f64() + p0 * (g0 - dot));
        gx[sp + s] = T::from_f64(gx[sp + s].to_f64() + p1 * (g1 - dot));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let x = Tensor4::<f64>::from_values([1, 1, 1, 4], vec![-3.0, -0.0, 0.5, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.values(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let x = Tensor4::<f64>::from_values([1, 1, 1, 3], vec![0.0, 3.0, -3.0]).unwrap();
        let y = sigmoid_forward(&x);
        assert_eq!(y.values()[0], 0.5);
        assert!((y.values()[1] + y.values()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax2_sums_to_one_and_orders_by_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = rand_tensor(&mut rng, [2, 2, 2, 2]);
        let p = softmax2_forward(&logits).unwrap();
        let sp = p.spatial();
        for s in 0..sp {
            let sum = p.values()[s] + p.values()[sp + s];
            assert!((sum - 1.0).abs() < 1e-12);
            let bigger_logit = logits.values()[sp + s] > logits.values()[s];
            let bigger_prob = p.values()[sp + s] > p.values()[s];
            assert_eq!(bigger_logit, bigger_prob);
        }
    }

    #[test]
    fn softmax2_rejects_non_two_channel() {
        let x: Tensor4<f64> = Tensor4::zeros([3, 1, 1, 1]);
        assert!(softmax2_forward(&x).is_err());
    }

    fn probe_loss(vals: &[f64], probe: &[f64]) -> f64 {
        vals.iter().zip(probe).map(|(v, p)| v * p).sum()
    }

    #[test]
    fn relu_gradcheck_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // keep all inputs safely away from 0 so central differences see a
        // locally linear function
        let x0 = Tensor4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| {
            let v: f64 = rng.gen_range(0.2..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let probe: Vec<f64> = (0..x0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = x0.clone();
        let mut y = relu_forward(&x);
        y.grad_mut().iter_mut().zip(&probe).for_each(|(g, &p)| *g = p);
        relu_backward(&mut x, &y).unwrap();

        let mut xm = x0.clone();
        let analytic = x.grad().unwrap().to_vec();
        let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
            let old = xm.values()[i];
            xm.values_mut()[i] = old + dv;
            let l = probe_loss(relu_forward(&xm).values(), &probe);
            xm.values_mut()[i] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn sigmoid_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_tensor(&mut rng, [1, 2, 2, 2]);
        let probe: Vec<f64> = (0..x0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = x0.clone();
        let mut y = sigmoid_forward(&x);
        y.grad_mut().iter_mut().zip(&probe).for_each(|(g, &p)| *g = p);
        sigmoid_backward(&mut x, &y).unwrap();

        let mut xm = x0.clone();
        let analytic = x.grad().unwrap().to_vec();
        let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
            let old = xm.values()[i];
            xm.values_mut()[i] = old + dv;
            let l = probe_loss(sigmoid_forward(&xm).values(), &probe);
            xm.values_mut()[i] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn softmax2_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = rand_tensor(&mut rng, [2, 2, 2, 2]);
        let probe: Vec<f64> = (0..x0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = x0.clone();
        let mut p = softmax2_forward(&x).unwrap();
        p.grad_mut().iter_mut().zip(&probe).for_each(|(g, &v)| *g = v);
        softmax2_backward(&mut x, &p).unwrap();

        let mut xm = x0.clone();
        let analytic = x.grad().unwrap().to_vec();
        let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
            let old = xm.values()[i];
            xm.values_mut()[i] = old + dv;
            let l = probe_loss(softmax2_forward(&xm).unwrap().values(), &probe);
            xm.values_mut()[i] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }
}
