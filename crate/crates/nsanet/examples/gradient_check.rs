//! Verify every hand-written backward pass against central differences.
//!
//! Each op is probed with a random linear functional of its output (so the
//! scalar loss is sensitive to every element), its analytic gradient is
//! compared to `(f(x+ε) − f(x−ε)) / 2ε` in f64, and the worst relative
//! error is reported. The final section runs the same check through a full
//! depth-2 dual-attention model: input gradient plus every parameter.
//!
//! Run with `cargo run --release --example gradient_check`.

use nsanet::model::{GateCombine, Model, ModelConfig, PriorGating, Variant};
use nsanet::priors::{PriorLevel, PriorPyramid};
use nsanet::tensor::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, softmax2_backward, softmax2_forward, upsample2_backward, upsample2_forward,
    wce_loss, BatchNorm, Conv1, Conv3, GradReport, Tensor4,
};
use nsanet::tensor::gradcheck::numeric_gradient;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero, so the ReLU kink cannot sit inside
/// the finite-difference interval.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| {
        let v = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn report(label: &str, analytic: &[f64], numeric: &[f64]) {
    let r = GradReport::from_pair(label, analytic, numeric);
    let verdict = if r.passes(TOL) { "ok" } else { "FAIL" };
    println!("  {:<22} {:>4} entries  max rel err {:.3e}  {}", r.label, r.checked, r.max_rel_error, verdict);
    assert!(r.passes(TOL), "{}", r);
}

/// Numeric gradient with respect to a flat slice reachable through `get` /
/// `set` on a cloneable state, against a scalar function of that state.
fn numeric_over<S: Clone>(
    base: &S,
    n: usize,
    set: impl Fn(&mut S, usize, f64),
    get: impl Fn(&S, usize) -> f64,
    f: impl Fn(&S) -> f64,
) -> Vec<f64> {
    numeric_gradient(n, EPS, |i, dv| {
        let mut s = base.clone();
        set(&mut s, i, get(base, i) + dv);
        f(&s)
    })
}

fn check_conv3(rng: &mut ChaCha8Rng) {
    let mut conv = Conv3::<f64>::zeros("conv3", 2, 2);
    conv.w.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    conv.b.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    let x0 = rand_tensor(rng, [2, 3, 3, 3]);
    let pr = probe(rng, 2 * 27);

    let mut x = x0.clone();
    let mut y = conv.forward(&x).unwrap();
    y.grad_mut().copy_from_slice(&pr);
    conv.backward(&mut x, &y).unwrap();

    let dot = |conv: &Conv3<f64>, x: &Tensor4<f64>| -> f64 {
        let y = conv.forward(x).unwrap();
        y.values().iter().zip(&pr).map(|(v, p)| v * p).sum()
    };
    let num_x = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| dot(&conv, t),
    );
    report("conv3 input", x.grad().unwrap(), &num_x);
    let num_w = numeric_over(
        &conv,
        conv.w.value.len(),
        |c, i, v| c.w.value[i] = v,
        |c, i| c.w.value[i],
        |c| dot(c, &x0),
    );
    report("conv3 weights", &conv.w.grad, &num_w);
    let num_b = numeric_over(
        &conv,
        conv.b.value.len(),
        |c, i, v| c.b.value[i] = v,
        |c, i| c.b.value[i],
        |c| dot(c, &x0),
    );
    report("conv3 bias", &conv.b.grad, &num_b);
}

fn check_conv1(rng: &mut ChaCha8Rng) {
    let mut conv = Conv1::<f64>::zeros("conv1", 3, 2);
    conv.w.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    conv.b.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let x0 = rand_tensor(rng, [3, 2, 2, 2]);
    let pr = probe(rng, 2 * 8);

    let mut x = x0.clone();
    let mut y = conv.forward(&x).unwrap();
    y.grad_mut().copy_from_slice(&pr);
    conv.backward(&mut x, &y).unwrap();

    let dot = |conv: &Conv1<f64>, x: &Tensor4<f64>| -> f64 {
        let y = conv.forward(x).unwrap();
        y.values().iter().zip(&pr).map(|(v, p)| v * p).sum()
    };
    let num_x = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| dot(&conv, t),
    );
    report("conv1 input", x.grad().unwrap(), &num_x);
    let num_w = numeric_over(
        &conv,
        conv.w.value.len(),
        |c, i, v| c.w.value[i] = v,
        |c, i| c.w.value[i],
        |c| dot(c, &x0),
    );
    report("conv1 weights", &conv.w.grad, &num_w);
}

fn check_batchnorm(rng: &mut ChaCha8Rng) {
    // A 2-item batch: batchnorm couples items through the batch moments, so
    // the check must differentiate through the whole batch at once.
    let bn0 = BatchNorm::<f64>::new("bn", 3);
    let xs0 = vec![rand_tensor(rng, [3, 2, 2, 2]), rand_tensor(rng, [3, 2, 2, 2])];
    let prs: Vec<Vec<f64>> = (0..2).map(|_| probe(rng, 3 * 8)).collect();

    let mut bn = bn0.clone();
    let mut xs = xs0.clone();
    let mut ys = bn.forward_train(&xs).unwrap();
    for (y, p) in ys.iter_mut().zip(&prs) {
        y.grad_mut().copy_from_slice(p);
    }
    bn.backward(&mut xs, &ys).unwrap();

    let dot = |bn: &BatchNorm<f64>, xs: &[Tensor4<f64>]| -> f64 {
        let mut b = bn.clone();
        let ys = b.forward_train(xs).unwrap();
        ys.iter()
            .zip(&prs)
            .map(|(y, p)| y.values().iter().zip(p).map(|(v, q)| v * q).sum::<f64>())
            .sum()
    };
    for item in 0..2 {
        let num = numeric_over(
            &xs0,
            xs0[item].len(),
            |t, i, v| t[item].values_mut()[i] = v,
            |t, i| t[item].values()[i],
            |t| dot(&bn0, t),
        );
        report(&format!("batchnorm x[{item}]"), xs[item].grad().unwrap(), &num);
    }
    let num_g = numeric_over(
        &bn0,
        3,
        |b, i, v| b.gamma.value[i] = v,
        |b, i| b.gamma.value[i],
        |b| dot(b, &xs0),
    );
    report("batchnorm gamma", &bn.gamma.grad, &num_g);
    let num_b = numeric_over(
        &bn0,
        3,
        |b, i, v| b.beta.value[i] = v,
        |b, i| b.beta.value[i],
        |b| dot(b, &xs0),
    );
    report("batchnorm beta", &bn.beta.grad, &num_b);
}

fn check_activations(rng: &mut ChaCha8Rng) {
    // ReLU: inputs off the kink (not differentiable at exactly 0).
    let x0 = rand_tensor_off_kink(rng, [2, 3, 3, 3]);
    let pr = probe(rng, x0.len());
    let mut x = x0.clone();
    let mut y = relu_forward(&x);
    y.grad_mut().copy_from_slice(&pr);
    relu_backward(&mut x, &y).unwrap();
    let num = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| relu_forward(t).values().iter().zip(&pr).map(|(v, p)| v * p).sum(),
    );
    report("relu", x.grad().unwrap(), &num);

    let x0 = rand_tensor(rng, [2, 3, 3, 3]);
    let pr = probe(rng, x0.len());
    let mut x = x0.clone();
    let mut y = sigmoid_forward(&x);
    y.grad_mut().copy_from_slice(&pr);
    sigmoid_backward(&mut x, &y).unwrap();
    let num = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| sigmoid_forward(t).values().iter().zip(&pr).map(|(v, p)| v * p).sum(),
    );
    report("sigmoid", x.grad().unwrap(), &num);
}

fn check_softmax_loss(rng: &mut ChaCha8Rng) {
    // Softmax and weighted cross-entropy checked as one composition, the way
    // the trainer uses them: dL/dprobs from the loss, pulled back through
    // softmax onto the logits. One voxel is void to exercise the exclusion.
    let logits0 = rand_tensor(rng, [2, 2, 2, 2]);
    let mut target: Vec<u8> = (0..8).map(|_| rng.gen_range(0..=1) as u8).collect();
    target[3] = nsanet::tensor::loss::VOID;

    let mut logits = logits0.clone();
    let mut probs = softmax2_forward(&logits).unwrap();
    wce_loss(&mut probs, &target, 1.0, 10.0).unwrap();
    softmax2_backward(&mut logits, &probs).unwrap();

    let num = numeric_over(
        &logits0,
        logits0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| {
            let mut p = softmax2_forward(t).unwrap();
            wce_loss(&mut p, &target, 1.0, 10.0).unwrap()
        },
    );
    report("softmax + wce", logits.grad().unwrap(), &num);
}

fn check_pooling(rng: &mut ChaCha8Rng) {
    // Max pooling is piecewise linear; random continuous inputs keep every
    // 2×2×2 window's max unique, so no argmax flips inside ±ε.
    let x0 = rand_tensor(rng, [2, 4, 4, 4]);
    let pr = probe(rng, 2 * 8);
    let mut x = x0.clone();
    let (mut y, argmax) = maxpool2_forward(&x).unwrap();
    y.grad_mut().copy_from_slice(&pr);
    maxpool2_backward(&mut x, &y, &argmax).unwrap();
    let num = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| {
            let (y, _) = maxpool2_forward(t).unwrap();
            y.values().iter().zip(&pr).map(|(v, p)| v * p).sum()
        },
    );
    report("maxpool2", x.grad().unwrap(), &num);

    let x0 = rand_tensor(rng, [2, 2, 2, 2]);
    let pr = probe(rng, 2 * 64);
    let mut x = x0.clone();
    let mut y = upsample2_forward(&x);
    y.grad_mut().copy_from_slice(&pr);
    upsample2_backward(&mut x, &y).unwrap();
    let num = numeric_over(
        &x0,
        x0.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| upsample2_forward(t).values().iter().zip(&pr).map(|(v, p)| v * p).sum(),
    );
    report("upsample2", x.grad().unwrap(), &num);
}

/// Hand-built two-level prior pyramid for a 4³ input under depth 2.
fn rand_pyramid(rng: &mut ChaCha8Rng) -> PriorPyramid {
    let mut levels = Vec::new();
    for e in [4usize, 2] {
        let n = e * e * e;
        levels.push(PriorLevel {
            dims: [e, e, e],
            probs: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            occ: (0..n).map(|_| rng.gen_range(0.0..8.0)).collect(),
        });
    }
    PriorPyramid { levels }
}

fn check_model(rng: &mut ChaCha8Rng) {
    // The fullest wiring: local attention gates on both paths plus global
    // prior weighting on both paths.
    let cfg = ModelConfig {
        depth: 2,
        base_channels: 2,
        in_channels: 2,
        out_classes: 2,
        variant: Variant::FitV2,
        gate_combine: GateCombine::Multiplicative,
        prior_gating: PriorGating::Affine,
        use_prior: true,
    };
    let model: Model<f64> = Model::new(cfg, 77).unwrap();
    let input = rand_tensor(rng, [2, 4, 4, 4]);
    let pyramids = vec![rand_pyramid(rng)];
    println!(
        "\nend-to-end: variant {} depth {} on a 4^3 grid, {} parameters",
        cfg.variant,
        cfg.depth,
        model.n_params()
    );

    // Loss = Σ probs²/2, so dL/dprobs = probs seeds the tape directly.
    let run = |model: &Model<f64>, input: &Tensor4<f64>| -> f64 {
        let mut m = model.cast::<f64>();
        let tape = m.forward_train(vec![input.clone()], Some(&pyramids)).unwrap();
        tape.probs[0].values().iter().map(|v| v * v * 0.5).sum()
    };

    let mut work = model.cast::<f64>();
    let mut tape = work.forward_train(vec![input.clone()], Some(&pyramids)).unwrap();
    let seed: Vec<f64> = tape.probs[0].values().to_vec();
    tape.probs[0].grad_mut().copy_from_slice(&seed);
    work.backward(&mut tape).unwrap();

    let num_in = numeric_over(
        &input,
        input.len(),
        |t, i, v| t.values_mut()[i] = v,
        |t, i| t.values()[i],
        |t| run(&model, t),
    );
    report("model input", tape.input_grad(0).unwrap(), &num_in);

    let mut worst: Option<GradReport> = None;
    for pi in 0..work.params().len() {
        let analytic = work.params()[pi].grad.clone();
        let name = work.params()[pi].name.clone();
        let num = numeric_gradient(analytic.len(), EPS, |i, dv| {
            let mut m = model.cast::<f64>();
            m.params_mut()[pi].value[i] += dv;
            run(&m, &input)
        });
        let r = GradReport::from_pair(name, &analytic, &num);
        assert!(r.passes(TOL), "{}", r);
        if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    let worst = worst.unwrap();
    println!(
        "  {} parameter tensors all ok; worst was {}",
        work.params().len(),
        worst
    );
}

fn main() -> nsanet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    println!("op-level checks (tolerance {TOL:.0e}, eps {EPS:.0e}):");
    check_conv3(&mut rng);
    check_conv1(&mut rng);
    check_batchnorm(&mut rng);
    check_activations(&mut rng);
    check_softmax_loss(&mut rng);
    check_pooling(&mut rng);
    check_model(&mut rng);
    println!("\nall gradients verified against central differences");
    Ok(())
}
