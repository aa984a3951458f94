//! Central finite-difference checks against the reverse sweep.

use super::{AutodiffError, Graph, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central difference of a plain scalar function at every coordinate of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], epsilon: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + epsilon;
            let plus = f(&probe);
            probe[i] = orig - epsilon;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * epsilon)
        })
        .collect()
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences and returns the maximum relative error over coordinates.
///
/// `f` receives a fresh graph and the leaf holding the input, and must return
/// a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, AutodiffError>,
{
    if !(epsilon > 0.0) {
        return Err(AutodiffError::BadEpsilon(epsilon));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let root = f(&mut g, x)?;
    check_finite(g.value(root).item())?;
    let grads = g.backward(root)?;
    let analytic = grads.values_or_zero(x, point.numel());

    let eval = |values: &[f64]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(point.shape().to_vec(), values.to_vec())?);
        let root = f(&mut g, x)?;
        check_finite(g.value(root).item())
    };
    let mut probe = point.data().to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = eval(&probe)?;
        probe[i] = orig - epsilon;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64, AutodiffError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AutodiffError::NonFinite)
    }
}
