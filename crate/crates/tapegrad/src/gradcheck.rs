/// Result of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Central-difference gradient check. `value_fn` evaluates the scalar
/// function; `grad_fn` returns its analytic gradient at the same point.
/// Relative error uses a scale floor of 1 so that near-zero gradients are
/// compared absolutely.
pub fn grad_check(
    mut value_fn: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    x: &[f64],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), x.len());
    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = value_fn(&xp);
        xp[i] = orig - eps;
        let fm = value_fn(&xp);
        xp[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let scale = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / scale;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        tol,
        pass: max_rel_err < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = 3x0 - 2x1; analytic grad [3, -2]
        let f = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1];
        let report = grad_check(f, &[3.0, -2.0], &[0.7, -1.3], 1e-4, 1e-10);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn tape_composite_passes() {
        let x0 = vec![0.3, -0.8, 1.2, 0.5];
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.leaf(&[2, 2], x.to_vec(), true).unwrap();
            let s = t.sigmoid(v);
            let w = t.tanh(s);
            let q = t.square(w);
            let out = t.sum_all(q);
            t.value(out)[0]
        };
        let mut t = Tape::new();
        let v = t.leaf(&[2, 2], x0.clone(), true).unwrap();
        let s = t.sigmoid(v);
        let w = t.tanh(s);
        let q = t.square(w);
        let out = t.sum_all(q);
        t.backward(out).unwrap();
        let g = t.grad(v).unwrap().to_vec();
        let report = grad_check(eval, &g, &x0, 1e-5, 1e-8);
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
