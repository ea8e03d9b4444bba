//! Central finite differences, the independent oracle for every analytic
//! gradient and Hessian in this crate. Runs in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                index: i,
                context: "finite-difference evaluation".into(),
            });
        }
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// Hessian by central differences of an analytic gradient. Row `i` is
/// `(∇f(x + h·e_i) - ∇f(x - h·e_i)) / 2h`; no symmetrization is applied.
pub fn finite_difference_hessian<G>(mut grad: G, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let n = x.len();
    let mut probe = x.to_vec();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = grad(&probe)?;
        probe[i] = orig - h;
        let down = grad(&probe)?;
        probe[i] = orig;
        let row: Vec<f64> = up
            .iter()
            .zip(&down)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: i * n + j,
                context: "Hessian entry".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Largest entrywise deviation, relative to the largest oracle magnitude.
pub fn max_relative_error(analytic: &[f64], oracle: &[f64]) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    analytic
        .iter()
        .zip(oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// `max_ij |H_ij - H_ji|`.
pub fn asymmetry(h: &[Vec<f64>]) -> f64 {
    let n = h.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((h[i][j] - h[j][i]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_gives_ones() {
        let x = Tensor::new(&[5], vec![0.3, -2.0, 7.5, 1e3, 0.0]).unwrap();
        let g = finite_difference_grad(|t| Ok(t.data().iter().sum()), &x, 1e-4).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let x = Tensor::new(&[3], vec![1.0, 1e-5, 1.0]).unwrap();
        let err =
            finite_difference_grad(|t| Ok(t.data()[1].ln() + t.data()[0]), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
        assert!(finite_difference_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn hessian_of_quadratic_form() {
        // f = x0² + 3 x0 x1 + 2 x1²  ->  H = [[2, 3], [3, 4]]
        let grad = |x: &[f64]| Ok(vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0] + 4.0 * x[1]]);
        let h = finite_difference_hessian(grad, &[0.4, -1.2], 1e-5).unwrap();
        let want = [[2.0, 3.0], [3.0, 4.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((h[i][j] - want[i][j]).abs() < 1e-8);
            }
        }
        assert!(asymmetry(&h) < 1e-8);
    }
}
