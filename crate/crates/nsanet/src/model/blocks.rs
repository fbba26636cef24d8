//! Building blocks for the segmentation network: the double-convolution
//! block, the local attention gate, and the global prior weighting.
//!
//! Every block exposes an explicit forward/backward pair. Forward returns a
//! tape holding each intermediate tensor the backward pass needs; backward
//! consumes the tape in reverse, accumulating gradients into parameters and
//! into the block's input tensors. Keeping the tape as plain owned data (no
//! graph machinery) makes the gradient flow auditable op by op.

use crate::error::{Error, Result};
use crate::tensor::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, BatchNorm, Conv1, Conv3,
    Param, Scalar, Tensor4,
};

/// How the local attention coefficient is folded into the skip features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateCombine {
    /// `out = α ⊙ x` — the standard attention-gate formulation.
    Multiplicative,
    /// `out = x + α` (broadcast over channels) — residual-style variant.
    Additive,
}

impl std::str::FromStr for GateCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(GateCombine::Multiplicative),
            "additive" => Ok(GateCombine::Additive),
            other => Err(Error::validation(format!(
                "unknown gate combine mode {other:?}; expected multiplicative or additive"
            ))),
        }
    }
}

impl std::fmt::Display for GateCombine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateCombine::Multiplicative => "multiplicative",
            GateCombine::Additive => "additive",
        })
    }
}

/// Two `conv3 → batch-norm → relu` stages.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub conv1: Conv3<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv3<T>,
    pub bn2: BatchNorm<T>,
}

/// Intermediates of a [`ConvBlock`] train-mode forward, in data-flow order.
/// `x` is the block input; its gradient is populated by `backward`.
#[derive(Debug)]
pub struct BlockTape<T: Scalar> {
    pub x: Vec<Tensor4<T>>,
    c1: Vec<Tensor4<T>>,
    b1: Vec<Tensor4<T>>,
    r1: Vec<Tensor4<T>>,
    c2: Vec<Tensor4<T>>,
    b2: Vec<Tensor4<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn zeros(name: &str, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            conv1: Conv3::zeros(&format!("{name}.conv1"), c_in, c_out),
            bn1: BatchNorm::new(&format!("{name}.bn1"), c_out),
            conv2: Conv3::zeros(&format!("{name}.conv2"), c_out, c_out),
            bn2: BatchNorm::new(&format!("{name}.bn2"), c_out),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bn2.channels()
    }

    /// Train-mode forward; returns the tape plus the block output batch.
    pub fn forward_train(&mut self, x: Vec<Tensor4<T>>) -> Result<(BlockTape<T>, Vec<Tensor4<T>>)> {
        let c1 = self.conv1.forward_batch(&x)?;
        let b1 = self.bn1.forward_train(&c1)?;
        let r1: Vec<_> = b1.iter().map(relu_forward).collect();
        let c2 = self.conv2.forward_batch(&r1)?;
        let b2 = self.bn2.forward_train(&c2)?;
        let out: Vec<_> = b2.iter().map(relu_forward).collect();
        Ok((BlockTape { x, c1, b1, r1, c2, b2 }, out))
    }

    /// Eval-mode forward using running batch-norm statistics; stateless.
    pub fn forward_eval(&self, x: &[Tensor4<T>]) -> Result<Vec<Tensor4<T>>> {
        let c1 = self.conv1.forward_batch(x)?;
        let b1 = self.bn1.forward_eval(&c1)?;
        let r1: Vec<_> = b1.iter().map(relu_forward).collect();
        let c2 = self.conv2.forward_batch(&r1)?;
        let b2 = self.bn2.forward_eval(&c2)?;
        Ok(b2.iter().map(relu_forward).collect())
    }

    /// Backward from `out` gradients down to `tape.x` gradients, accumulating
    /// parameter gradients along the way.
    pub fn backward(&mut self, tape: &mut BlockTape<T>, out: &[Tensor4<T>]) -> Result<()> {
        for (b2, o) in tape.b2.iter_mut().zip(out) {
            relu_backward(b2, o)?;
        }
        self.bn2.backward(&mut tape.c2, &tape.b2)?;
        self.conv2.backward_batch(&mut tape.r1, &tape.c2)?;
        for (b1, r) in tape.b1.iter_mut().zip(&tape.r1) {
            relu_backward(b1, r)?;
        }
        self.bn1.backward(&mut tape.c1, &tape.b1)?;
        self.conv1.backward_batch(&mut tape.x, &tape.c1)?;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv2.w,
            &self.conv2.b,
            &self.bn2.gamma,
            &self.bn2.beta,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]
    }
}

/// Local attention gate: `α = σ(ψ(relu(W_x·x + W_g·g)))` where `x` are the
/// features to be gated (skip connection) and `g` is the gating signal from
/// the coarser path, both at the same spatial resolution.
#[derive(Debug, Clone)]
pub struct Gate<T: Scalar> {
    pub wx: Conv1<T>,
    pub wg: Conv1<T>,
    pub psi: Conv1<T>,
}

/// Intermediates of a [`Gate`] forward. `x` and `g` receive input gradients.
#[derive(Debug)]
pub struct GateTape<T: Scalar> {
    pub x: Vec<Tensor4<T>>,
    pub g: Vec<Tensor4<T>>,
    a: Vec<Tensor4<T>>,
    b: Vec<Tensor4<T>>,
    s: Vec<Tensor4<T>>,
    t: Vec<Tensor4<T>>,
    u: Vec<Tensor4<T>>,
    pub alpha: Vec<Tensor4<T>>,
}

impl<T: Scalar> Gate<T> {
    /// Gate for `c_x`-channel features with a `c_g`-channel gating signal.
    /// The intermediate width defaults to `max(c_x / 2, 1)`.
    pub fn zeros(name: &str, c_x: usize, c_g: usize) -> Self {
        let inter = (c_x / 2).max(1);
        Gate {
            wx: Conv1::zeros(&format!("{name}.wx"), c_x, inter),
            wg: Conv1::zeros(&format!("{name}.wg"), c_g, inter),
            psi: Conv1::zeros(&format!("{name}.psi"), inter, 1),
        }
    }

    /// Compute the attention map alone (no gating applied). Exposed for
    /// inspection; `forward` uses the same computation internally.
    pub fn attention(&self, x: &Tensor4<T>, g: &Tensor4<T>) -> Result<Tensor4<T>> {
        let a = self.wx.forward(x)?;
        let b = self.wg.forward(g)?;
        let s = add_elementwise(&a, &b)?;
        let t = relu_forward(&s);
        let u = self.psi.forward(&t)?;
        Ok(sigmoid_forward(&u))
    }

    /// Forward over a batch. Takes ownership of `x` and `g` so their
    /// gradients survive in the tape for the backward pass.
    pub fn forward(
        &self,
        x: Vec<Tensor4<T>>,
        g: Vec<Tensor4<T>>,
        combine: GateCombine,
    ) -> Result<(GateTape<T>, Vec<Tensor4<T>>)> {
        if x.len() != g.len() {
            return Err(Error::shape(format!(
                "gate batch mismatch: {} feature tensors vs {} gating tensors",
                x.len(),
                g.len()
            )));
        }
        let n = x.len();
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        for (xi, gi) in x.iter().zip(&g) {
            let [_, xd, xh, xw] = xi.dims();
            let [_, gd, gh, gw] = gi.dims();
            if [xd, xh, xw] != [gd, gh, gw] {
                return Err(Error::shape(format!(
                    "gate spatial mismatch: features {:?} vs gating signal {:?}",
                    xi.dims(),
                    gi.dims()
                )));
            }
            let ai = self.wx.forward(xi)?;
            let bi = self.wg.forward(gi)?;
            let si = add_elementwise(&ai, &bi)?;
            let ti = relu_forward(&si);
            let ui = self.psi.forward(&ti)?;
            let alphai = sigmoid_forward(&ui);
            out.push(combine_forward(xi, &alphai, combine)?);
            a.push(ai);
            b.push(bi);
            s.push(si);
            t.push(ti);
            u.push(ui);
            alpha.push(alphai);
        }
        Ok((GateTape { x, g, a, b, s, t, u, alpha }, out))
    }

    /// Backward: accumulates into `wx`/`wg`/`psi` parameter gradients and
    /// into `tape.x` / `tape.g` input gradients.
    pub fn backward(
        &mut self,
        tape: &mut GateTape<T>,
        out: &[Tensor4<T>],
        combine: GateCombine,
    ) -> Result<()> {
        if out.len() != tape.x.len() {
            return Err(Error::shape(format!(
                "gate backward batch mismatch: {} outputs vs {} tape entries",
                out.len(),
                tape.x.len()
            )));
        }
        for i in 0..out.len() {
            combine_backward(&mut tape.x[i], &mut tape.alpha[i], &out[i], combine)?;
            sigmoid_backward(&mut tape.u[i], &tape.alpha[i])?;
            self.psi.backward(&mut tape.t[i], &tape.u[i])?;
            relu_backward(&mut tape.s[i], &tape.t[i])?;
            add_backward(&mut tape.a[i], &mut tape.b[i], &tape.s[i])?;
            self.wx.backward(&mut tape.x[i], &tape.a[i])?;
            self.wg.backward(&mut tape.g[i], &tape.b[i])?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.wx.w,
            &self.wx.b,
            &self.wg.w,
            &self.wg.b,
            &self.psi.w,
            &self.psi.b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.wx.w,
            &mut self.wx.b,
            &mut self.wg.w,
            &mut self.wg.b,
            &mut self.psi.w,
            &mut self.psi.b,
        ]
    }
}

/// Elementwise sum of two same-shape tensors.
fn add_elementwise<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "elementwise add requires matching dims, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    Tensor4::from_values(a.dims(), values)
}

/// Backward of the elementwise sum: both inputs receive the output gradient.
fn add_backward<T: Scalar>(a: &mut Tensor4<T>, b: &mut Tensor4<T>, s: &Tensor4<T>) -> Result<()> {
    let gs = s.grad_required()?.to_vec();
    for (ga, g) in a.grad_mut().iter_mut().zip(&gs) {
        *ga = T::from_f64(ga.to_f64() + g.to_f64());
    }
    for (gb, g) in b.grad_mut().iter_mut().zip(&gs) {
        *gb = T::from_f64(gb.to_f64() + g.to_f64());
    }
    Ok(())
}

/// Apply the attention map to the features: multiplicative scales every
/// channel by `α`, additive adds `α` (broadcast over channels).
fn combine_forward<T: Scalar>(
    x: &Tensor4<T>,
    alpha: &Tensor4<T>,
    combine: GateCombine,
) -> Result<Tensor4<T>> {
    let [c, d, h, w] = x.dims();
    if alpha.dims() != [1, d, h, w] {
        return Err(Error::shape(format!(
            "attention map dims {:?} do not match features {:?}",
            alpha.dims(),
            x.dims()
        )));
    }
    let sp = d * h * w;
    let xv = x.values();
    let av = alpha.values();
    let mut out = vec![T::ZERO; c * sp];
    for ci in 0..c {
        let base = ci * sp;
        for v in 0..sp {
            let xf = xv[base + v].to_f64();
            let af = av[v].to_f64();
            out[base + v] = T::from_f64(match combine {
                GateCombine::Multiplicative => af * xf,
                GateCombine::Additive => xf + af,
            });
        }
    }
    Tensor4::from_values([c, d, h, w], out)
}

/// Backward of [`combine_forward`]: routes the output gradient to the
/// features and (reduced over channels) to the attention map.
fn combine_backward<T: Scalar>(
    x: &mut Tensor4<T>,
    alpha: &mut Tensor4<T>,
    out: &Tensor4<T>,
    combine: GateCombine,
) -> Result<()> {
    let [c, d, h, w] = x.dims();
    let sp = d * h * w;
    let gout: Vec<f64> = out.grad_required()?.iter().map(|v| v.to_f64()).collect();
    let xv: Vec<f64> = x.values().iter().map(|v| v.to_f64()).collect();
    let av: Vec<f64> = alpha.values().iter().map(|v| v.to_f64()).collect();
    {
        let gx = x.grad_mut();
        for ci in 0..c {
            let base = ci * sp;
            for v in 0..sp {
                let g = match combine {
                    GateCombine::Multiplicative => av[v] * gout[base + v],
                    GateCombine::Additive => gout[base + v],
                };
                gx[base + v] = T::from_f64(gx[base + v].to_f64() + g);
            }
        }
    }
    let ga = alpha.grad_mut();
    for v in 0..sp {
        let mut acc = 0.0f64;
        for ci in 0..c {
            acc += match combine {
                GateCombine::Multiplicative => xv[ci * sp + v] * gout[ci * sp + v],
                GateCombine::Additive => gout[ci * sp + v],
            };
        }
        ga[v] = T::from_f64(ga[v].to_f64() + acc);
    }
    Ok(())
}

/// Multiply every channel of `x` by a per-voxel factor. Used for the global
/// prior weighting; a factor of `1.0` everywhere is the exact identity, which
/// lets variants without global attention share the same data path.
pub fn scale_forward<T: Scalar>(x: &Tensor4<T>, factor: Option<&[f64]>) -> Result<Tensor4<T>> {
    let Some(factor) = factor else {
        return Ok(x.clone());
    };
    let [c, d, h, w] = x.dims();
    let sp = d * h * w;
    if factor.len() != sp {
        return Err(Error::shape(format!(
            "prior factor has {} entries but the grid has {} voxels",
            factor.len(),
            sp
        )));
    }
    let xv = x.values();
    let mut out = vec![T::ZERO; c * sp];
    for ci in 0..c {
        let base = ci * sp;
        for v in 0..sp {
            out[base + v] = T::from_f64(xv[base + v].to_f64() * factor[v]);
        }
    }
    Tensor4::from_values([c, d, h, w], out)
}

/// Backward of [`scale_forward`]: `x.grad += factor ⊙ out.grad`. The factor
/// itself is data (derived from the prior pyramid), not a parameter, so no
/// gradient flows into it.
pub fn scale_backward<T: Scalar>(
    x: &mut Tensor4<T>,
    out: &Tensor4<T>,
    factor: Option<&[f64]>,
) -> Result<()> {
    let [c, d, h, w] = x.dims();
    let sp = d * h * w;
    let gout = out.grad_required()?;
    let gx = x.grad_mut();
    match factor {
        None => {
            for (g, o) in gx.iter_mut().zip(gout) {
                *g = T::from_f64(g.to_f64() + o.to_f64());
            }
        }
        Some(factor) => {
            for ci in 0..c {
                let base = ci * sp;
                for v in 0..sp {
                    gx[base + v] =
                        T::from_f64(gx[base + v].to_f64() + factor[v] * gout[base + v].to_f64());
                }
            }
        }
    }
    Ok(())
}

/// Accumulate `src`'s gradient into `dst`'s gradient (same shape). Used to
/// merge gradients when one tensor feeds several consumers through clones.
pub fn accumulate_grad<T: Scalar>(dst: &mut Tensor4<T>, src: &Tensor4<T>) -> Result<()> {
    if dst.dims() != src.dims() {
        return Err(Error::shape(format!(
            "gradient accumulation dims mismatch: {:?} vs {:?}",
            dst.dims(),
            src.dims()
        )));
    }
    let gs = src.grad_required()?;
    for (gd, g) in dst.grad_mut().iter_mut().zip(gs) {
        *gd = T::from_f64(gd.to_f64() + g.to_f64());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_rel_error, numeric_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_psi_gives_half_attention_everywhere() {
        // With all-zero weights the pre-sigmoid response is 0, so α = σ(0) = ½.
        let gate: Gate<f64> = Gate::zeros("g", 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, [4, 2, 2, 2]);
        let g = rand_tensor(&mut rng, [8, 2, 2, 2]);
        let alpha = gate.attention(&x, &g).unwrap();
        assert_eq!(alpha.dims(), [1, 2, 2, 2]);
        for &v in alpha.values() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn attention_values_are_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut gate: Gate<f64> = Gate::zeros("g", 3, 5);
        for p in gate.params_mut() {
            for v in p.value.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        let x = rand_tensor(&mut rng, [3, 2, 3, 2]);
        let g = rand_tensor(&mut rng, [5, 2, 3, 2]);
        let alpha = gate.attention(&x, &g).unwrap();
        for &v in alpha.values() {
            assert!(v > 0.0 && v < 1.0, "alpha {v} escaped (0,1)");
        }
    }

    #[test]
    fn additive_combine_adds_alpha_to_every_channel() {
        let gate: Gate<f64> = Gate::zeros("g", 2, 2);
        let x = Tensor4::from_fn([2, 1, 1, 2], |c, _, _, x| (c * 2 + x) as f64);
        let g = Tensor4::zeros([2, 1, 1, 2]);
        let (_, out) = gate
            .forward(vec![x.clone()], vec![g], GateCombine::Additive)
            .unwrap();
        // α ≡ 0.5 for zero weights, so every value shifts by +0.5.
        for (o, x) in out[0].values().iter().zip(x.values()) {
            assert_eq!(*o, x + 0.5);
        }
    }

    /// Full-gate gradient check: parameters and both inputs, multiplicative
    /// and additive combines, against central differences in f64.
    #[test]
    fn gate_gradient_check() {
        for combine in [GateCombine::Multiplicative, GateCombine::Additive] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut gate: Gate<f64> = Gate::zeros("g", 3, 4);
            for p in gate.params_mut() {
                for v in p.value.iter_mut() {
                    // Keep pre-activations away from the relu kink.
                    *v = rng.gen_range(0.1..0.9);
                }
            }
            let x0 = rand_tensor(&mut rng, [3, 2, 2, 2]);
            let g0 = rand_tensor(&mut rng, [4, 2, 2, 2]);
            // Loss = Σ out² / 2 so that d loss / d out = out.
            let run = |gate: &Gate<f64>, x: &Tensor4<f64>, g: &Tensor4<f64>| -> f64 {
                let (_, out) = gate
                    .forward(vec![x.clone()], vec![g.clone()], combine)
                    .unwrap();
                out[0].values().iter().map(|v| v * v * 0.5).sum()
            };

            // Analytic gradients.
            let (mut tape, mut out) = gate
                .forward(vec![x0.clone()], vec![g0.clone()], combine)
                .unwrap();
            let seed: Vec<f64> = out[0].values().to_vec();
            out[0].grad_mut().copy_from_slice(&seed);
            gate.backward(&mut tape, &out, combine).unwrap();

            // Numeric: inputs.
            for (label, analytic, base, which) in [
                ("x", tape.x[0].grad().unwrap().to_vec(), x0.clone(), 0),
                ("g", tape.g[0].grad().unwrap().to_vec(), g0.clone(), 1),
            ] {
                let numeric = numeric_gradient(base.len(), 1e-6, |i, dv| {
                    let mut probe = base.clone();
                    probe.values_mut()[i] += dv;
                    if which == 0 {
                        run(&gate, &probe, &g0)
                    } else {
                        run(&gate, &x0, &probe)
                    }
                });
                let err = max_rel_error(&analytic, &numeric);
                assert!(err <= 1e-6, "{combine} input {label}: rel err {err:.3e}");
            }

            // Numeric: every parameter.
            for pi in 0..gate.params().len() {
                let analytic = gate.params()[pi].grad.clone();
                let n = analytic.len();
                let numeric = numeric_gradient(n, 1e-6, |i, dv| {
                    let mut probe = gate.clone();
                    probe.params_mut()[pi].value[i] += dv;
                    run(&probe, &x0, &g0)
                });
                let name = gate.params()[pi].name.clone();
                let err = max_rel_error(&analytic, &numeric);
                assert!(err <= 1e-6, "{combine} param {name}: rel err {err:.3e}");
            }
        }
    }

    #[test]
    fn conv_block_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut block: ConvBlock<f64> = ConvBlock::zeros("b", 2, 3);
        for p in block.params_mut() {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-0.4..0.4);
            }
        }
        let x0 = rand_tensor(&mut rng, [2, 2, 2, 2]);
        let run = |block: &ConvBlock<f64>, x: &Tensor4<f64>| -> f64 {
            let mut b = block.clone();
            let (_, out) = b.forward_train(vec![x.clone()]).unwrap();
            out[0].values().iter().map(|v| v * v * 0.5).sum()
        };

        let (mut tape, mut out) = block.forward_train(vec![x0.clone()]).unwrap();
        let seed: Vec<f64> = out[0].values().to_vec();
        out[0].grad_mut().copy_from_slice(&seed);
        block.backward(&mut tape, &out).unwrap();

        let analytic_x = tape.x[0].grad().unwrap().to_vec();
        let numeric_x = numeric_gradient(x0.len(), 1e-5, |i, dv| {
            let mut probe = x0.clone();
            probe.values_mut()[i] += dv;
            run(&block, &probe)
        });
        let err = max_rel_error(&analytic_x, &numeric_x);
        assert!(err <= 1e-5, "block input: rel err {err:.3e}");

        for pi in 0..block.params().len() {
            let analytic = block.params()[pi].grad.clone();
            let n = analytic.len();
            let numeric = numeric_gradient(n, 1e-5, |i, dv| {
                let mut probe = block.clone();
                probe.params_mut()[pi].value[i] += dv;
                run(&probe, &x0)
            });
            let name = block.params()[pi].name.clone();
            let err = max_rel_error(&analytic, &numeric);
            assert!(err <= 1e-5, "block param {name}: rel err {err:.3e}");
        }
    }

    #[test]
    fn scale_with_no_factor_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let y = scale_forward(&x, None).unwrap();
        assert_eq!(x.values(), y.values());
    }

    #[test]
    fn scale_doubles_with_factor_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, [2, 1, 2, 2]);
        let factor = vec![2.0; 4];
        let y = scale_forward(&x, Some(&factor)).unwrap();
        for (a, b) in x.values().iter().zip(y.values()) {
            assert_eq!(*b, a * 2.0);
        }
    }

    #[test]
    fn scale_backward_routes_factor_times_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut x = rand_tensor(&mut rng, [2, 1, 1, 3]);
        let factor = vec![0.5, 1.5, 3.0];
        let mut y = scale_forward(&x, Some(&factor)).unwrap();
        y.grad_mut().copy_from_slice(&[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        scale_backward(&mut x, &y, Some(&factor)).unwrap();
        assert_eq!(x.grad().unwrap(), &[0.5, 1.5, 3.0, 1.0, 3.0, 6.0]);
    }
}
