//! 3-D convolutions: 3×3×3 stride-1 pad-1 (shape preserving) and 1×1×1
//! pointwise.
//!
//! Accumulation contract (part of the op's definition, relied on by parity
//! tests): every output element starts from its bias and adds weight·input
//! products in ascending `(c_in, kz, ky, kx)` order, in an `f64`
//! accumulator. Out-of-bounds taps contribute nothing. With `f64` storage
//! this makes the op bit-for-bit equal to any straightforward loop nest
//! that follows the same order.

use super::{Param, Scalar, Tensor4};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// 3×3×3 convolution parameters. Weight dims `[c_out, c_in, 3, 3, 3]`,
/// bias dims `[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
}

#[inline]
fn w3_idx(c_in: usize, co: usize, ci: usize, kz: usize, ky: usize, kx: usize) -> usize {
    (((co * c_in + ci) * 3 + kz) * 3 + ky) * 3 + kx
}

impl<T: Scalar> Conv3<T> {
    /// Zero-initialized parameters; callers seed real weights explicitly.
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        Conv3 {
            w: Param::zeros(format!("{name}.w"), vec![c_out, c_in, 3, 3, 3]),
            b: Param::zeros(format!("{name}.b"), vec![c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.dims[1]
    }

    pub fn c_out(&self) -> usize {
        self.w.dims[0]
    }

    /// Shape-preserving forward pass for one item.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        if x.c() != c_in {
            return Err(Error::shape(format!(
                "conv3 expects {} input channels, got {}",
                c_in,
                x.c()
            )));
        }
        let (d, h, w) = (x.d(), x.h(), x.w());
        let mut y = Tensor4::zeros([c_out, d, h, w]);
        // Parallel over output channels; each output element is accumulated
        // by exactly one task, so the result is independent of worker count.
        let planes: Vec<Vec<T>> = (0..c_out)
            .into_par_iter()
            .map(|co| {
                let mut plane = vec![T::ZERO; d * h * w];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut acc = self.b.value[co].to_f64();
                            for ci in 0..c_in {
                                for kz in 0..3 {
                                    let sz = z as isize + kz as isize - 1;
                                    if sz < 0 || sz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..3 {
                                        let sy = yy as isize + ky as isize - 1;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3 {
                                            let sx = xx as isize + kx as isize - 1;
                                            if sx < 0 || sx >= w as isize {
                                                continue;
                                            }
                                            let wv = self.w.value
                                                [w3_idx(c_in, co, ci, kz, ky, kx)]
                                            .to_f64();
                                            let xv = x
                                                .get(ci, sz as usize, sy as usize, sx as usize)
                                                .to_f64();
                                            acc += wv * xv;
                                        }
                                    }
                                }
                            }
                            plane[(z * h + yy) * w + xx] = T::from_f64(acc);
                        }
                    }
                }
                plane
            })
            .collect();
        for (co, plane) in planes.into_iter().enumerate() {
            let base = co * d * h * w;
            y.values_mut()[base..base + plane.len()].copy_from_slice(&plane);
        }
        Ok(y)
    }

    pub fn forward_batch(&self, xs: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Backward for one item: reads `y.grad`, accumulates into `x.grad` and
    /// the weight/bias grads. `x` must be the exact tensor passed to
    /// `forward`.
    pub fn backward(&mut self, x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
        let (dw, db) = self.backward_into(x, y)?;
        self.w.add_grad(&dw);
        self.b.add_grad(&db);
        Ok(())
    }

    /// Backward over a batch. Per-item input grads and parameter partials
    /// are computed in parallel; parameter partials are then reduced
    /// sequentially in item order so the sums are order-fixed.
    pub fn backward_batch(&mut self, xs: &mut [Tensor4<T>], ys: &[Tensor4<T>]) -> Result<()> {
        if xs.len() != ys.len() {
            return Err(Error::shape("conv3 backward_batch length mismatch"));
        }
        let this = &*self;
        let partials: Vec<Result<(Vec<f64>, Vec<f64>)>> = xs
            .par_iter_mut()
            .zip(ys.par_iter())
            .map(|(x, y)| this.backward_into(x, y))
            .collect();
        for p in partials {
            let (dw, db) = p?;
            self.w.add_grad(&dw);
            self.b.add_grad(&db);
        }
        Ok(())
    }

    /// Core of the backward pass: writes the input grad into `x.grad`
    /// (accumulating) and returns `(dW, dB)` partials for this item.
    fn backward_into(&self, x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<(Vec<f64>, Vec<f64>)> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        let (d, h, w) = (x.d(), x.h(), x.w());
        if y.dims() != [c_out, d, h, w] {
            return Err(Error::shape("conv3 backward shape mismatch"));
        }
        let gy: Vec<f64> = y.grad_required()?.iter().map(|v| v.to_f64()).collect();
        let yi = |co: usize, z: usize, yy: usize, xx: usize| ((co * d + z) * h + yy) * w + xx;

        // dX: gather form mirrors the forward — for each input element, sum
        // over (c_out, kz, ky, kx) in ascending order.
        let gx_planes: Vec<Vec<f64>> = (0..c_in)
            .into_par_iter()
            .map(|ci| {
                let mut plane = vec![0.0f64; d * h * w];
                for z in 0..d {
                    for yy in 0..h {
                        for xx in 0..w {
                            let mut acc = 0.0f64;
                            for co in 0..c_out {
                                for kz in 0..3 {
                                    let oz = z as isize - (kz as isize - 1);
                                    if oz < 0 || oz >= d as isize {
                                        continue;
                                    }
                                    for ky in 0..3 {
                                        let oy = yy as isize - (ky as isize - 1);
                                        if oy < 0 || oy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..3 {
                                            let ox = xx as isize - (kx as isize - 1);
                                            if ox < 0 || ox >= w as isize {
                                                continue;
                                            }
                                            let wv = self.w.value
                                                [w3_idx(c_in, co, ci, kz, ky, kx)]
                                            .to_f64();
                                            acc += wv
                                                * gy[yi(co, oz as usize, oy as usize, ox as usize)];
                                        }
                                    }
                                }
                            }
                            plane[(z * h + yy) * w + xx] = acc;
                        }
                    }
                }
                plane
            })
            .collect();
        {
            let gx = x.grad_mut();
            for (ci, plane) in gx_planes.iter().enumerate() {
                let base = ci * d * h * w;
                for (i, &v) in plane.iter().enumerate() {
                    gx[base + i] = T::from_f64(gx[base + i].to_f64() + v);
                }
            }
        }

        // dW and dB: sequential (z, y, x) scan per (co, ci, k...) tap.
        let mut dw = vec![0.0f64; self.w.len()];
        let mut db = vec![0.0f64; c_out];
        for co in 0..c_out {
            let mut bacc = 0.0f64;
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..w {
                        bacc += gy[yi(co, z, yy, xx)];
                    }
                }
            }
            db[co] = bacc;
            for ci in 0..c_in {
                for kz in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0f64;
                            for z in 0..d {
                                let sz = z as isize + kz as isize - 1;
                                if sz < 0 || sz >= d as isize {
                                    continue;
                                }
                                for yy in 0..h {
                                    let sy = yy as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..w {
                                        let sx = xx as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        acc += gy[yi(co, z, yy, xx)]
                                            * x.get(ci, sz as usize, sy as usize, sx as usize)
                                                .to_f64();
                                    }
                                }
                            }
                            dw[w3_idx(c_in, co, ci, kz, ky, kx)] = acc;
                        }
                    }
                }
            }
        }
        Ok((dw, db))
    }
}

/// 1×1×1 (pointwise) convolution. Weight dims `[c_out, c_in]`, bias
/// `[c_out]`. Same accumulation contract as [`Conv3`]: bias first, then
/// ascending `c_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1<T: Scalar> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Conv1<T> {
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        Conv1 {
            w: Param::zeros(format!("{name}.w"), vec![c_out, c_in]),
            b: Param::zeros(format!("{name}.b"), vec![c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.w.dims[1]
    }

    pub fn c_out(&self) -> usize {
        self.w.dims[0]
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        if x.c() != c_in {
            return Err(Error::shape(format!(
                "conv1 expects {} input channels, got {}",
                c_in,
                x.c()
            )));
        }
        let sp = x.spatial();
        let mut y = Tensor4::zeros([c_out, x.d(), x.h(), x.w()]);
        for co in 0..c_out {
            for s in 0..sp {
                let mut acc = self.b.value[co].to_f64();
                for ci in 0..c_in {
                    acc += self.w.value[co * c_in + ci].to_f64() * x.values()[ci * sp + s].to_f64();
                }
                y.values_mut()[co * sp + s] = T::from_f64(acc);
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &mut Tensor4<T>, y: &Tensor4<T>) -> Result<()> {
        let (c_in, c_out) = (self.c_in(), self.c_out());
        let sp = x.spatial();
        if y.c() != c_out || y.spatial() != sp {
            return Err(Error::shape("conv1 backward shape mismatch"));
        }
        let gy = y.grad_required()?.to_vec();
        let xv: Vec<f64> = x.values().iter().map(|v| v.to_f64()).collect();
        {
            let gx = x.grad_mut();
            for ci in 0..c_in {
                for s in 0..sp {
                    let mut acc = 0.0f64;
                    for co in 0..c_out {
                        acc += self.w.value[co * c_in + ci].to_f64() * gy[co * sp + s].to_f64();
                    }
                    let i = ci * sp + s;
                    gx[i] = T::from_f64(gx[i].to_f64() + acc);
                }
            }
        }
        let mut dw = vec![0.0f64; self.w.len()];
        let mut db = vec![0.0f64; c_out];
        for co in 0..c_out {
            let mut bacc = 0.0f64;
            for s in 0..sp {
                bacc += gy[co * sp + s].to_f64();
            }
            db[co] = bacc;
            for ci in 0..c_in {
                let mut acc = 0.0f64;
                for s in 0..sp {
                    acc += gy[co * sp + s].to_f64() * xv[ci * sp + s];
                }
                dw[co * c_in + ci] = acc;
            }
        }
        self.w.add_grad(&dw);
        self.b.add_grad(&db);
        Ok(())
    }
}
