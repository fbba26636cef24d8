//! Batch normalization over `(item, z, y, x)` per channel.
//!
//! Train mode normalizes with the batch's biased moments and updates the
//! running statistics as `running = momentum·running + (1−momentum)·batch`.
//! Eval mode normalizes with the running statistics. Moments and all
//! reductions are accumulated in `f64`, sequentially over items in batch
//! order and voxels in index order, so results do not depend on the worker
//! count.

use super::{batch_dims, Param, Scalar, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Batch moments captured by the last train-mode forward, needed by
    /// backward.
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    n: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(
                format!("{name}.gamma"),
                vec![channels],
                vec![T::ONE; channels],
            )
            .expect("dims match"),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Train-mode forward over a batch: normalize with batch moments,
    /// update running stats, cache moments for backward.
    pub fn forward_train(&mut self, xs: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        let dims = batch_dims(xs)?;
        let c = self.check_channels(dims)?;
        let sp = dims[1] * dims[2] * dims[3];
        let n = xs.len() * sp;
        if n < 2 {
            return Err(Error::validation(
                "batch normalization needs at least 2 values per channel",
            ));
        }

        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for x in xs {
                let base = ch * sp;
                for s in 0..sp {
                    sum += x.values()[base + s].to_f64();
                }
            }
            let m = sum / n as f64;
            let mut sq = 0.0f64;
            for x in xs {
                let base = ch * sp;
                for s in 0..sp {
                    let d = x.values()[base + s].to_f64() - m;
                    sq += d * d;
                }
            }
            mean[ch] = m;
            var[ch] = sq / n as f64; // biased
        }

        for ch in 0..c {
            self.running_mean[ch] = self.momentum * self.running_mean[ch]
                + (1.0 - self.momentum) * mean[ch];
            self.running_var[ch] =
                self.momentum * self.running_var[ch] + (1.0 - self.momentum) * var[ch];
        }

        let ys = self.normalize(xs, &mean, &var, sp, c);
        self.cache = Some(BnCache { mean, var, n });
        Ok(ys)
    }

    /// Eval-mode forward: normalize with running statistics; no state
    /// changes.
    pub fn forward_eval(&self, xs: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        let dims = batch_dims(xs)?;
        let c = self.check_channels(dims)?;
        let sp = dims[1] * dims[2] * dims[3];
        Ok(self.normalize(xs, &self.running_mean, &self.running_var, sp, c))
    }

    fn check_channels(&self, dims: [usize; 4]) -> Result<usize> {
        if dims[0] != self.channels() {
            return Err(Error::shape(format!(
                "batchnorm has {} channels, input has {}",
                self.channels(),
                dims[0]
            )));
        }
        Ok(dims[0])
    }

    fn normalize(
        &self,
        xs: &[Tensor4<T>],
        mean: &[f64],
        var: &[f64],
        sp: usize,
        c: usize,
    ) -> Vec<Tensor4<T>> {
        xs.iter()
            .map(|x| {
                let mut y = Tensor4::zeros(x.dims());
                for ch in 0..c {
                    let g = self.gamma.value[ch].to_f64();
                    let b = self.beta.value[ch].to_f64();
                    let inv = 1.0 / (var[ch] + self.eps).sqrt();
                    let base = ch * sp;
                    for s in 0..sp {
                        let xh = (x.values()[base + s].to_f64() - mean[ch]) * inv;
                        y.values_mut()[base + s] = T::from_f64(g * xh + b);
                    }
                }
                y
            })
            .collect()
    }

    /// Train-mode backward: reads each `ys[i].grad`, accumulates input
    /// grads into `xs[i].grad` and parameter grads into gamma/beta. Uses
    /// the moments cached by the last `forward_train`.
    pub fn backward(&mut self, xs: &mut [Tensor4<T>], ys: &[Tensor4<T>]) -> Result<()> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::shape("batchnorm backward without a train-mode forward"))?
            .clone();
        if xs.len() != ys.len() {
            return Err(Error::shape("batchnorm backward batch length mismatch"));
        }
        let dims = batch_dims(ys)?;
        let c = self.check_channels(dims)?;
        let sp = dims[1] * dims[2] * dims[3];
        let n = cache.n as f64;

        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ch in 0..c {
            let m = cache.mean[ch];
            let inv = 1.0 / (cache.var[ch] + self.eps).sqrt();
            let g = self.gamma.value[ch].to_f64();
            let base = ch * sp;

            // Reductions over (item, voxel) in fixed order.
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (x, y) in xs.iter().zip(ys) {
                let gy = y.grad_required()?;
                for s in 0..sp {
                    let dy = gy[base + s].to_f64();
                    let xh = (x.values()[base + s].to_f64() - m) * inv;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xh;
                }
            }
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;

            // dx = (γ·inv/N) · (N·dy − Σdy − x̂·Σ(dy·x̂))
            for (x, y) in xs.iter_mut().zip(ys) {
                let gy = y.grad_required()?.to_vec();
                let xv: Vec<f64> = (0..sp)
                    .map(|s| x.values()[base + s].to_f64())
                    .collect();
                let gx = x.grad_mut();
                for s in 0..sp {
                    let dy = gy[s + base].to_f64();
                    let xh = (xv[s] - m) * inv;
                    let dx = g * inv / n * (n * dy - sum_dy - xh * sum_dy_xhat);
                    gx[base + s] = T::from_f64(gx[base + s].to_f64() + dx);
                }
            }
        }
        self.gamma.add_grad(&dgamma);
        self.beta.add_grad(&dbeta);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_batch(rng: &mut ChaCha8Rng, b: usize, dims: [usize; 4]) -> Vec<Tensor4<f64>> {
        (0..b)
            .map(|_| Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-2.0..2.0)))
            .collect()
    }

    #[test]
    fn normalized_input_passes_through() {
        // Construct a batch that already has per-channel mean 0, var 1:
        // half the entries +1, half −1.
        let dims = [1, 2, 2, 2];
        let a = Tensor4::<f64>::from_fn(dims, |_, _, _, x| if x == 0 { 1.0 } else { -1.0 });
        let batch = vec![a.clone(), a];
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        let ys = bn.forward_train(&batch).unwrap();
        for (x, y) in batch.iter().zip(&ys) {
            for (xv, yv) in x.values().iter().zip(y.values()) {
                assert!((xv - yv).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn train_output_has_zero_mean_unit_var() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = rand_batch(&mut rng, 3, [2, 2, 2, 2]);
        let mut bn = BatchNorm::<f64>::new("bn", 2);
        let ys = bn.forward_train(&batch).unwrap();
        let sp = 8;
        for ch in 0..2 {
            // oracle: recompute moments of the output directly
            let mut vals = Vec::new();
            for y in &ys {
                vals.extend(y.values()[ch * sp..(ch + 1) * sp].iter().copied());
            }
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts var slightly below 1
        }
    }

    #[test]
    fn running_stats_blend_toward_batch_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let batch = rand_batch(&mut rng, 2, [1, 2, 2, 2]);
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        // oracle moments
        let vals: Vec<f64> = batch.iter().flat_map(|t| t.values().to_vec()).collect();
        let n = vals.len() as f64;
        let mean: f64 = vals.iter().sum::<f64>() / n;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;

        bn.forward_train(&batch).unwrap();
        assert!((bn.running_mean[0] - 0.1 * mean).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * var)).abs() < 1e-12);

        bn.forward_train(&batch).unwrap();
        let rm2 = 0.9 * (0.1 * mean) + 0.1 * mean;
        assert!((bn.running_mean[0] - rm2).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_stateless() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let batch = rand_batch(&mut rng, 2, [1, 2, 2, 2]);
        let mut bn = BatchNorm::<f64>::new("bn", 1);
        bn.forward_train(&batch).unwrap();
        let rm = bn.running_mean.clone();
        let rv = bn.running_var.clone();
        let y1 = bn.forward_eval(&batch).unwrap();
        let y2 = bn.forward_eval(&batch).unwrap();
        assert_eq!(bn.running_mean, rm);
        assert_eq!(bn.running_var, rv);
        assert_eq!(y1, y2);
        // oracle: direct normalization with the running stats
        let inv = 1.0 / (rv[0] + 1e-5).sqrt();
        let want = (batch[0].values()[3] - rm[0]) * inv;
        assert!((y1[0].values()[3] - want).abs() < 1e-12);
    }

    #[test]
    fn gradcheck_through_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let batch0 = rand_batch(&mut rng, 2, [2, 2, 2, 2]);
        let total: usize = batch0.iter().map(|t| t.len()).sum();
        let probe: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |bn: &BatchNorm<f64>, batch: &[Tensor4<f64>]| -> f64 {
            let mut bn = bn.clone();
            let ys = bn.forward_train(batch).unwrap();
            let mut acc = 0.0;
            let mut k = 0;
            for y in &ys {
                for v in y.values() {
                    acc += v * probe[k];
                    k += 1;
                }
            }
            acc
        };

        let mut bn = BatchNorm::<f64>::new("bn", 2);
        bn.gamma.value.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        bn.beta.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));

        let mut batch = batch0.clone();
        let ys = bn.forward_train(&batch).unwrap();
        let mut ys = ys;
        let mut k = 0;
        for y in ys.iter_mut() {
            let g = y.grad_mut();
            for gv in g.iter_mut() {
                *gv = probe[k];
                k += 1;
            }
        }
        bn.backward(&mut batch, &ys).unwrap();

        // inputs
        let analytic: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.grad().unwrap().to_vec())
            .collect();
        let mut bm = batch0.clone();
        let item_len = bm[0].len();
        let numeric = numeric_gradient(total, 1e-5, |i, dv| {
            let (bi, vi) = (i / item_len, i % item_len);
            let old = bm[bi].values()[vi];
            bm[bi].values_mut()[vi] = old + dv;
            let l = loss(&bn, &bm);
            bm[bi].values_mut()[vi] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);

        // gamma and beta
        let mut bnm = bn.clone();
        let an_g = bn.gamma.grad.clone();
        let num_g = numeric_gradient(an_g.len(), 1e-5, |i, dv| {
            let old = bnm.gamma.value[i];
            bnm.gamma.value[i] = old + dv;
            let l = loss(&bnm, &batch0);
            bnm.gamma.value[i] = old;
            l
        });
        assert!(max_rel_error(&an_g, &num_g) < 1e-6);

        let an_b = bn.beta.grad.clone();
        let num_b = numeric_gradient(an_b.len(), 1e-5, |i, dv| {
            let old = bnm.beta.value[i];
            bnm.beta.value[i] = old + dv;
            let l = loss(&bnm, &batch0);
            bnm.beta.value[i] = old;
            l
        });
        assert!(max_rel_error(&an_b, &num_b) < 1e-6);
    }
}
