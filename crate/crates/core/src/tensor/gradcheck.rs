//! Central finite-difference gradient checking.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|a − n| / max(1e−8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `eps`, after discounting the rounding
/// error of the difference quotient.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_params(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        None,
    )
}

/// Like [`grad_check`] over several parameter tensors at once. When
/// `sample` is `Some((k, seed))` at most `k` coordinates per tensor are
/// checked (chosen with `seed`); otherwise every coordinate is.
pub fn grad_check_params<F>(f: F, params: &[Tensor], eps: f64, sample: Option<(usize, u64)>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&g, &vars)?;
        g.grad(loss, &vars, false)?.iter().map(Var::value).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| g.constant(p.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut rng = crate::rng::seeded(sample.map_or(0, |s| s.1));
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (ti, a) in analytic.iter().enumerate() {
        let n = params[ti].numel();
        let coords: Vec<usize> = match sample {
            Some((k, _)) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[ti].data()[c];
            work[ti].data_mut()[c] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            // Rounding in `plus - minus` alone can move the quotient by this
            // much; discrepancies below it are not measurable.
            let resolution = 4.0 * f64::EPSILON * plus.abs().max(minus.abs()).max(1.0) / eps;
            let gap = ((a.data()[c] - numeric).abs() - resolution).max(0.0);
            worst = worst.max(gap / (a.data()[c].abs() + numeric.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0, 2.5]);
        let err = grad_check(|_, v| v.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
