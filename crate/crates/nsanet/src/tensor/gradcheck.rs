//! Finite-difference gradient verification.
//!
//! Analytic gradients are compared against central differences
//! `(f(x+ε) − f(x−ε)) / 2ε` computed in `f64`. The relative error of a pair
//! `(a, n)` is `|a − n| / max(1, |a|, |n|)`, which behaves like absolute
//! error near zero and relative error for large magnitudes.

/// Central-difference gradient of a scalar function with respect to `n`
/// inputs. `eval(i, dv)` must evaluate the loss with input `i` offset by
/// `dv` from its base value (and everything else at base), restoring the
/// input afterwards; it is called twice per input with `dv = ±eps`.
pub fn numeric_gradient(n: usize, eps: f64, mut eval: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let up = eval(i, eps);
        let down = eval(i, -eps);
        *g = (up - down) / (2.0 * eps);
    }
    grad
}

/// Like [`numeric_gradient`] but only at a strided subset of inputs
/// (`i % stride == phase`), for large parameter sets; unchecked entries are
/// NaN so they cannot silently pass a comparison.
pub fn numeric_gradient_strided(
    n: usize,
    eps: f64,
    stride: usize,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> Vec<f64> {
    let stride = stride.max(1);
    let mut grad = vec![f64::NAN; n];
    let mut i = 0;
    while i < n {
        let up = eval(i, eps);
        let down = eval(i, -eps);
        grad[i] = (up - down) / (2.0 * eps);
        i += stride;
    }
    grad
}

/// Relative error of one analytic/numeric pair:
/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Worst relative error over all pairs; NaN numeric entries (skipped by a
/// strided check) are ignored.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(_, n)| !n.is_nan())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of one gradient comparison, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradReport {
    pub fn from_pair(label: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradReport {
        let mut worst = 0.0;
        let mut worst_index = 0;
        let mut checked = 0;
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if n.is_nan() {
                continue;
            }
            checked += 1;
            let e = rel_error(a, n);
            if e > worst {
                worst = e;
                worst_index = i;
            }
        }
        GradReport {
            label: label.into(),
            checked,
            max_rel_error: worst,
            worst_index,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} entries (worst at {})",
            self.label, self.max_rel_error, self.checked, self.worst_index
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_blends_absolute_and_relative() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        // small magnitudes: behaves like absolute difference
        assert!((rel_error(1e-9, 2e-9) - 1e-9).abs() < 1e-24);
        // large magnitudes: behaves like relative difference
        assert!((rel_error(100.0, 101.0) - 1.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_gradient_of_quadratic_is_linear() {
        // f(x) = Σ i·x_i², df/dx_i = 2·i·x_i, exactly representable here.
        let mut xs = vec![1.0, 2.0, -3.0];
        let grad = numeric_gradient(3, 1e-5, |i, dv| {
            let old = xs[i];
            xs[i] = old + dv;
            let l: f64 = xs.iter().enumerate().map(|(k, v)| k as f64 * v * v).sum();
            xs[i] = old;
            l
        });
        let want = [0.0, 4.0, -12.0];
        for (g, w) in grad.iter().zip(want) {
            assert!(rel_error(*g, w) < 1e-9, "{} vs {}", g, w);
        }
    }

    #[test]
    fn strided_check_skips_with_nan() {
        let xs = vec![2.0; 6];
        let grad = numeric_gradient_strided(6, 1e-5, 3, |i, dv| {
            let v = xs[i] + dv;
            v * v
        });
        assert!(!grad[0].is_nan() && !grad[3].is_nan());
        assert!(grad[1].is_nan() && grad[2].is_nan());
        let report = GradReport::from_pair("t", &[4.0; 6], &grad);
        assert_eq!(report.checked, 2);
        assert!(report.passes(1e-6));
    }
}
