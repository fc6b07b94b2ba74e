//! Ridge regression with an unpenalised intercept.
//!
//! Columns and the response are centred before solving
//! `(X̃ᵀX̃ + ζI) β = X̃ᵀỹ`, and the intercept is `ȳ − x̄·β`. When there are more
//! columns than rows the equivalent dual system `(X̃X̃ᵀ + ζI) α = ỹ`,
//! `β = X̃ᵀα`, is solved instead.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Fits `y ≈ intercept + X β` on a row-major `n × p` design.
pub fn ridge(x: &[f64], p: usize, y: &[f64], zeta: f64) -> Result<RidgeFit> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Empty("ridge rows"));
    }
    if x.len() != n * p {
        return Err(Error::Dimension { expected: n * p, got: x.len() });
    }
    if !(zeta > 0.0) {
        return Err(Error::config("estimator.ridge", "must be > 0"));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut x_mean = vec![0.0; p];
    for row in x.chunks_exact(p.max(1)).take(n) {
        x_mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    x_mean.iter_mut().for_each(|m| *m /= n as f64);
    if p == 0 {
        return Ok(RidgeFit { coefficients: Vec::new(), intercept: y_mean });
    }
    let xc = DMatrix::from_fn(n, p, |i, j| x[i * p + j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let beta = if p <= n {
        let mut gram = xc.tr_mul(&xc);
        for j in 0..p {
            gram[(j, j)] += zeta;
        }
        let rhs = xc.tr_mul(&yc);
        solve_spd(gram, rhs)?
    } else {
        let mut gram = &xc * xc.transpose();
        for i in 0..n {
            gram[(i, i)] += zeta;
        }
        let alpha = solve_spd(gram, yc)?;
        xc.tr_mul(&alpha)
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    if coefficients.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { component: "ridge coefficients" });
    }
    let intercept = y_mean - coefficients.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(RidgeFit { coefficients, intercept })
}

fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&b)),
        // numerically indefinite at tiny ζ: fall back to a pivoted LU
        None => a.lu().solve(&b).ok_or(Error::NonFinite { component: "ridge system" }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_response() {
        let x = [1.0, 0.0, 2.0, 1.0, -1.0, 3.0];
        let fit = ridge(&x, 2, &[5.0, 5.0, 5.0], 1e-8).unwrap();
        for row in x.chunks(2) {
            assert!((fit.predict(row) - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_linear_interpolation() {
        let x: Vec<f64> = (0..20).flat_map(|i| [i as f64 * 0.3, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.chunks(2).map(|r| 1.5 + 2.0 * r[0] - 0.5 * r[1]).collect();
        let fit = ridge(&x, 2, &y, 1e-8).unwrap();
        let mse: f64 = x.chunks(2).zip(&y).map(|(r, y)| (fit.predict(r) - y).powi(2)).sum::<f64>() / 20.0;
        assert!(mse < 1e-10);
    }

    #[test]
    fn hand_solved_three_points() {
        // z = (0, 1, 2), y = (1, 2, 4): z̄ = 1, ȳ = 7/3, Σz̃² = 2, Σz̃ỹ = 3
        let zeta = 0.5;
        let fit = ridge(&[0.0, 1.0, 2.0], 1, &[1.0, 2.0, 4.0], zeta).unwrap();
        let slope = 3.0 / (2.0 + zeta);
        assert!((fit.coefficients[0] - slope).abs() < 1e-14);
        assert!((fit.intercept - (7.0 / 3.0 - slope)).abs() < 1e-14);
    }

    #[test]
    fn dual_matches_primal() {
        // same data solved with p > n via padding columns of zeros
        let x = [0.3, -1.0, 2.0, 0.5, 1.0, 1.0];
        let y = [1.0, -2.0, 0.5];
        let narrow = ridge(&x, 2, &y, 0.1).unwrap();
        let wide_x: Vec<f64> = x.chunks(2).flat_map(|r| [r[0], r[1], 0.0, 0.0]).collect();
        let wide = ridge(&wide_x, 4, &y, 0.1).unwrap();
        for i in 0..2 {
            assert!((narrow.coefficients[i] - wide.coefficients[i]).abs() < 1e-12);
        }
        assert!((narrow.intercept - wide.intercept).abs() < 1e-12);
    }
}
