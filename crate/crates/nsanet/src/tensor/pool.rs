//! Spatial resampling: 2× max-pooling and 2× trilinear upsampling.

use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// 2×2×2 max-pool with stride 2. Spatial dims must be even. Returns the
/// pooled tensor and, per output element, the flat input index of the
/// maximum (ties go to the first element in `(dz, dy, dx)` scan order),
/// which routes the gradient in [`maxpool2_backward`].
pub fn maxpool2_forward<T: Scalar>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let [c, d, h, w] = x.dims();
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial dims, got {}x{}x{}",
            d, h, w
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor4::zeros([c, od, oh, ow]);
    let mut argmax = vec![0u32; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = x.idx(ch, 2 * z + dz, 2 * yy + dy, 2 * xx + dx);
                                let v = x.values()[i].to_f64();
                                if v > best {
                                    best = v;
                                    best_idx = i;
                                }
                            }
                        }
                    }
                    let o = y.idx(ch, z, yy, xx);
                    y.values_mut()[o] = T::from_f64(best);
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Reads `y.grad`, accumulates each element's gradient into the argmax
/// position of `x.grad`.
pub fn maxpool2_backward<T: Scalar>(
    x: &mut Tensor4<T>,
    y: &Tensor4<T>,
    argmax: &[u32],
) -> Result<()> {
    if argmax.len() != y.len() {
        return Err(Error::shape("maxpool2 argmax length mismatch"));
    }
    let gy = y.grad_required()?.to_vec();
    let gx = x.grad_mut();
    for (o, &src) in argmax.iter().enumerate() {
        let i = src as usize;
        gx[i] = T::from_f64(gx[i].to_f64() + gy[o].to_f64());
    }
    Ok(())
}

/// Per-axis source taps for one output coordinate under the 2× upsampling
/// convention: even outputs replicate their source sample,
/// `out[2i] = in[i]`; odd outputs are midpoints,
/// `out[2i+1] = (in[i] + in[i+1]) / 2` with `i+1` clamped at the end.
#[inline]
fn up_taps(o: usize, n_in: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    if o % 2 == 0 {
        [(i, 1.0), (i, 0.0)]
    } else {
        let j = (i + 1).min(n_in - 1);
        [(i, 0.5), (j, 0.5)]
    }
}

/// Trilinear 2× upsampling, separable per axis with [`up_taps`]. Output
/// dims are exactly double. Corner contributions accumulate in `f64` in
/// fixed `(z-tap, y-tap, x-tap)` order.
pub fn upsample2_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [c, d, h, w] = x.dims();
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut y = Tensor4::zeros([c, od, oh, ow]);
    for ch in 0..c {
        for oz in 0..od {
            let tz = up_taps(oz, d);
            for oy in 0..oh {
                let ty = up_taps(oy, h);
                for ox in 0..ow {
                    let tx = up_taps(ox, w);
                    let mut acc = 0.0f64;
                    for &(iz, wz) in &tz {
                        if wz == 0.0 {
                            continue;
                        }
                        for &(iy, wy) in &ty {
                            if wy == 0.0 {
                                continue;
                            }
                            for &(ix, wx) in &tx {
                                if wx == 0.0 {
                                    continue;
                                }
                                acc += wz * wy * wx * x.get(ch, iz, iy, ix).to_f64();
                            }
                        }
                    }
                    let o = y.idx(ch, oz, oy, ox);
                    y.values_mut()[o] = T::from_f64(acc);
                }
            }
        }
    }
    y
}

/// Transpose of the upsampling: reads `y.grad` and scatters each output
/// gradient to its source taps, sequentially in output index order.
pub fn upsample2_backward<T: Scalar>(x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
    let [c, d, h, w] = x.dims();
    if y.dims() != [c, 2 * d, 2 * h, 2 * w] {
        return Err(Error::shape("upsample2 backward shape mismatch"));
    }
    let gy = y.grad_required()?.to_vec();
    let mut acc = vec![0.0f64; x.len()];
    for ch in 0..c {
        for oz in 0..2 * d {
            let tz = up_taps(oz, d);
            for oy in 0..2 * h {
                let ty = up_taps(oy, h);
                for ox in 0..2 * w {
                    let tx = up_taps(ox, w);
                    let g = gy[y.idx(ch, oz, oy, ox)].to_f64();
                    for &(iz, wz) in &tz {
                        if wz == 0.0 {
                            continue;
                        }
                        for &(iy, wy) in &ty {
                            if wy == 0.0 {
                                continue;
                            }
                            for &(ix, wx) in &tx {
                                if wx == 0.0 {
                                    continue;
                                }
                                acc[x.idx(ch, iz, iy, ix)] += wz * wy * wx * g;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = x.grad_mut();
    for (g, a) in gx.iter_mut().zip(&acc) {
        *g = T::from_f64(g.to_f64() + a);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_constant_input_stays_constant() {
        let x = Tensor4::<f64>::from_fn([2, 4, 4, 4], |_, _, _, _| 3.5);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.dims(), [2, 2, 2, 2]);
        assert!(y.values().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor4::<f64>::zeros([1, 3, 4, 4]);
        assert!(maxpool2_forward(&x).is_err());
    }

    #[test]
    fn maxpool_argmax_routing_exhaustive_on_single_block() {
        // Put the max at each of the 8 positions in turn and verify the
        // gradient lands exactly there.
        for pos in 0..8 {
            let x0 = Tensor4::<f64>::from_fn([1, 2, 2, 2], |_, z, y, x| {
                let i = (z * 2 + y) * 2 + x;
                if i == pos {
                    5.0
                } else {
                    i as f64 * 0.1
                }
            });
            let mut x = x0.clone();
            let (mut y, argmax) = maxpool2_forward(&x).unwrap();
            assert_eq!(y.values(), &[5.0]);
            y.grad_mut()[0] = 2.0;
            maxpool2_backward(&mut x, &y, &argmax).unwrap();
            let gx = x.grad().unwrap();
            for (i, &g) in gx.iter().enumerate() {
                assert_eq!(g, if i == pos { 2.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first_in_scan_order() {
        let x = Tensor4::<f64>::from_fn([1, 2, 2, 2], |_, _, _, _| 1.0);
        let (_, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_gradcheck_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // distinct values with margins so ±ε can't reorder the max
        let mut vals: Vec<f64> = (0..2 * 64).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut rng);
        let x0 = Tensor4::<f64>::from_values([2, 4, 4, 4], vals).unwrap();
        let probe: Vec<f64> = (0..2 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = x0.clone();
        let (mut y, argmax) = maxpool2_forward(&x).unwrap();
        y.grad_mut().iter_mut().zip(&probe).for_each(|(g, &p)| *g = p);
        maxpool2_backward(&mut x, &y, &argmax).unwrap();

        let mut xm = x0.clone();
        let analytic = x.grad().unwrap().to_vec();
        let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
            let old = xm.values()[i];
            xm.values_mut()[i] = old + dv;
            let (y, _) = maxpool2_forward(&xm).unwrap();
            let l: f64 = y.values().iter().zip(&probe).map(|(v, p)| v * p).sum();
            xm.values_mut()[i] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor4::<f64>::from_fn([1, 2, 2, 2], |_, _, _, _| 0.75);
        let y = upsample2_forward(&x);
        assert_eq!(y.dims(), [1, 4, 4, 4]);
        assert!(y.values().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn upsample_preserves_linear_ramp_at_sample_points() {
        // 1-D ramp along x: in(i) = 1 + 2i. Even outputs must replicate
        // the inputs exactly; odd outputs are exact midpoints except the
        // final one, which clamps to the last sample.
        let n = 4;
        let x = Tensor4::<f64>::from_fn([1, 1, 1, n], |_, _, _, i| 1.0 + 2.0 * i as f64);
        let y = upsample2_forward(&x);
        for i in 0..n {
            assert_eq!(y.get(0, 0, 0, 2 * i), 1.0 + 2.0 * i as f64);
        }
        for i in 0..n - 1 {
            assert_eq!(y.get(0, 0, 0, 2 * i + 1), 1.0 + 2.0 * (i as f64 + 0.5));
        }
        assert_eq!(y.get(0, 0, 0, 2 * n - 1), 1.0 + 2.0 * (n - 1) as f64);
    }

    #[test]
    fn upsample_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x0 = Tensor4::<f64>::from_fn([2, 2, 2, 2], |_, _, _, _| rng.gen_range(-1.0..1.0));
        let probe: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut x = x0.clone();
        let mut y = upsample2_forward(&x);
        y.grad_mut().iter_mut().zip(&probe).for_each(|(g, &p)| *g = p);
        upsample2_backward(&mut x, &y).unwrap();

        let mut xm = x0.clone();
        let analytic = x.grad().unwrap().to_vec();
        let numeric = numeric_gradient(analytic.len(), 1e-5, |i, dv| {
            let old = xm.values()[i];
            xm.values_mut()[i] = old + dv;
            let y = upsample2_forward(&xm);
            let l: f64 = y.values().iter().zip(&probe).map(|(v, p)| v * p).sum();
            xm.values_mut()[i] = old;
            l
        });
        assert!(max_rel_error(&analytic, &numeric) < 1e-6);
    }
}
