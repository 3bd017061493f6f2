/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Coordinate at which the maximum was attained.
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

/// Relative error with a unit floor on the denominator, so coordinates whose
/// gradient is (near) zero are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against central differences of `f` around `params`.
pub fn finite_diff_check<F>(f: F, params: &[f64], analytic: &[f64], epsilon: f64) -> GradCheck
where
    F: Fn(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert_eq!(params.len(), analytic.len());
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = f(&probe);
        probe[i] = orig - epsilon;
        let down = f(&probe);
        probe[i] = orig;
        let g = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], g);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(g);
    }
    GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        let a = [3.0, -1.5, 0.25, 7.0];
        let f = |p: &[f64]| p.iter().zip(&a).map(|(x, a)| a * x * x).sum::<f64>();
        let p = [0.3, -2.0, 5.0, 1.1];
        let g: Vec<f64> = p.iter().zip(&a).map(|(x, a)| 2.0 * a * x).collect();
        let r = finite_diff_check(f, &p, &g, 1e-5);
        assert!(r.max_relative_error < 1e-8, "{}", r.max_relative_error);
    }

    #[test]
    fn linear_gradient_is_exact_up_to_rounding() {
        let f = |p: &[f64]| 2.0 * p[0] - 3.0 * p[1] + 0.5;
        let r = finite_diff_check(f, &[1.0, 4.0], &[2.0, -3.0], 1e-3);
        assert!(r.max_relative_error < 1e-12);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |p: &[f64]| p[0] * p[0];
        let r = finite_diff_check(f, &[2.0], &[5.0], 1e-5);
        assert!(r.max_relative_error > 0.1);
        assert_eq!(r.worst_index, 0);
    }
}
