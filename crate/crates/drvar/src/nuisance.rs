//! Parametric nuisance models: logistic propensity score and linear outcome
//! regression, with their per-observation score contributions.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg;

const SCORE_TOL: f64 = 1e-8;
const MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 30;
/// Fitted propensities are clamped to [ETA_CLAMP, 1 - ETA_CLAMP] before use
/// in inverse-probability weights.
pub const ETA_CLAMP: f64 = 1e-10;

pub fn expit(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Clamps a probability away from the boundary of (0, 1).
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(ETA_CLAMP, 1.0 - ETA_CLAMP)
}

/// Fitted logistic propensity model.
#[derive(Debug, Clone)]
pub struct PsFit {
    pub psi_hat: Array1<f64>,
    pub design: Array2<f64>,
    /// Fitted probabilities, clamped strictly inside (0, 1).
    pub fitted_eta: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Fitted linear outcome model.
#[derive(Debug, Clone)]
pub struct OrFit {
    pub xi_hat: Array1<f64>,
    pub design: Array2<f64>,
    pub fitted: Array1<f64>,
    /// Residual variance RSS / (n - r); forced to 1 (with `sigma2_degenerate`
    /// set) when the fit interpolates exactly.
    pub sigma2_hat: f64,
    pub sigma2_degenerate: bool,
}

fn bernoulli_loglik(design: &Array2<f64>, x: &Array1<f64>, psi: &Array1<f64>) -> f64 {
    let lin = design.dot(psi);
    let mut ll = 0.0;
    for i in 0..x.len() {
        // log-likelihood of logit model, numerically stable form
        let l = lin[i];
        ll += x[i] * l - softplus(l);
    }
    ll
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (1.0 + v.exp()).ln()
    }
}

/// Fits the logistic propensity model by Newton iterations with step-halving.
///
/// Solves sum_i (x_i - expit(d_i' psi)) d_i = 0 to a max-score tolerance of
/// 1e-8 within 100 iterations.
pub fn fit_ps(design: &Array2<f64>, x: &Array1<f64>) -> Result<PsFit> {
    let n = design.nrows();
    let q = design.ncols();
    if x.len() != n {
        return Err(Error::Shape(format!("design has {n} rows, x has {}", x.len())));
    }
    if !x.iter().any(|&v| v == 1.0) || !x.iter().any(|&v| v == 0.0) {
        return Err(Error::Data("treatment is all 0 or all 1".to_string()));
    }

    let mut psi = Array1::zeros(q);
    let mut ll = bernoulli_loglik(design, x, &psi);
    let mut iterations = 0;
    loop {
        let lin = design.dot(&psi);
        let eta = lin.mapv(expit);
        let resid = x - &eta;
        let score = design.t().dot(&resid);
        let max_score = score.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_score < SCORE_TOL {
            let fitted_eta = eta.mapv(clamp_eta);
            return Ok(PsFit {
                psi_hat: psi,
                design: design.clone(),
                fitted_eta,
                converged: true,
                iterations,
            });
        }
        if iterations >= MAX_ITER {
            return Err(Error::Convergence(format!(
                "logistic fit: max |score| = {max_score:.3e} after {MAX_ITER} iterations \
                 (possible separation); last psi = {:?}",
                psi.to_vec()
            )));
        }
        iterations += 1;

        // Newton step: H = X' diag(eta (1 - eta)) X
        let mut hessian = Array2::zeros((q, q));
        for i in 0..n {
            let w = eta[i] * (1.0 - eta[i]);
            for a in 0..q {
                for b in a..q {
                    hessian[[a, b]] += w * design[[i, a]] * design[[i, b]];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hessian[[a, b]] = hessian[[b, a]];
            }
        }
        let step = linalg::solve(&hessian, &score)
            .map_err(|_| Error::Singular("rank-deficient propensity design".to_string()))?;

        // step-halving until the log-likelihood does not decrease
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &psi + &(&step * scale);
            let cand_ll = bernoulli_loglik(design, x, &candidate);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                psi = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::Convergence(format!(
                "logistic fit: step-halving failed at iteration {iterations}; \
                 last psi = {:?}",
                psi.to_vec()
            )));
        }
    }
}

/// Fits the linear outcome model by ordinary least squares.
pub fn fit_or(design: &Array2<f64>, y: &Array1<f64>) -> Result<OrFit> {
    let n = design.nrows();
    let r = design.ncols();
    if y.len() != n {
        return Err(Error::Shape(format!("design has {n} rows, y has {}", y.len())));
    }
    if n <= r {
        return Err(Error::Data(format!("need n > r, got n = {n}, r = {r}")));
    }
    let xi_hat = linalg::least_squares(design, y)?;
    let fitted = design.dot(&xi_hat);
    let rss: f64 = y.iter().zip(fitted.iter()).map(|(yi, fi)| (yi - fi) * (yi - fi)).sum();
    let mut sigma2_hat = rss / (n - r) as f64;
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut sigma2_degenerate = false;
    if sigma2_hat <= 1e-24 * scale * scale {
        // exact interpolation; keep the score finite
        sigma2_hat = 1.0;
        sigma2_degenerate = true;
    }
    Ok(OrFit { xi_hat, design: design.clone(), fitted, sigma2_hat, sigma2_degenerate })
}

/// Per-observation propensity score contributions, row i = (x_i - eta_i) d_i.
pub fn ps_scores(fit: &PsFit, x: &Array1<f64>) -> Result<Array2<f64>> {
    let n = fit.design.nrows();
    if x.len() != n {
        return Err(Error::Shape(format!("fit has {n} rows, x has {}", x.len())));
    }
    let mut scores = fit.design.clone();
    for i in 0..n {
        let resid = x[i] - fit.fitted_eta[i];
        for j in 0..scores.ncols() {
            scores[[i, j]] *= resid;
        }
    }
    Ok(scores)
}

/// Per-observation outcome score contributions, row i = (y_i - Q_i) d_i / sigma2.
pub fn or_scores(fit: &OrFit, y: &Array1<f64>) -> Result<Array2<f64>> {
    let n = fit.design.nrows();
    if y.len() != n {
        return Err(Error::Shape(format!("fit has {n} rows, y has {}", y.len())));
    }
    let mut scores = fit.design.clone();
    for i in 0..n {
        let resid = (y[i] - fit.fitted[i]) / fit.sigma2_hat;
        for j in 0..scores.ncols() {
            scores[[i, j]] *= resid;
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn intercept_design(n: usize) -> Array2<f64> {
        Array2::ones((n, 1))
    }

    #[test]
    fn intercept_only_half_treated() {
        let design = intercept_design(4);
        let x = array![1.0, 1.0, 0.0, 0.0];
        let fit = fit_ps(&design, &x).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.psi_hat[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn intercept_only_quarter_treated() {
        let design = intercept_design(8);
        let x = array![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let fit = fit_ps(&design, &x).unwrap();
        // logit(0.25) = log(1/3)
        assert_abs_diff_eq!(fit.psi_hat[0], (1.0f64 / 3.0).ln(), epsilon = 1e-8);
    }

    #[test]
    fn ps_score_columns_sum_to_zero_at_fit() {
        let design = array![
            [1.0, 0.2],
            [1.0, -1.3],
            [1.0, 0.7],
            [1.0, 2.1],
            [1.0, -0.4],
            [1.0, 1.0],
        ];
        let x = array![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let fit = fit_ps(&design, &x).unwrap();
        let scores = ps_scores(&fit, &x).unwrap();
        for j in 0..2 {
            let col_sum: f64 = scores.column(j).sum();
            assert!(col_sum.abs() <= 1e-8, "column {j} sum = {col_sum:e}");
        }
    }

    #[test]
    fn ps_fit_row_order_invariant() {
        let design = array![[1.0, 0.5], [1.0, -0.5], [1.0, 1.5], [1.0, 0.0], [1.0, -1.0]];
        let x = array![1.0, 0.0, 1.0, 0.0, 0.0];
        let fit = fit_ps(&design, &x).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let mut design_p = Array2::zeros((5, 2));
        let mut x_p = Array1::zeros(5);
        for (row, &i) in perm.iter().enumerate() {
            design_p.row_mut(row).assign(&design.row(i));
            x_p[row] = x[i];
        }
        let fit_p = fit_ps(&design_p, &x_p).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(fit.psi_hat[j], fit_p.psi_hat[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn separation_drives_fitted_probabilities_to_bounds() {
        // x perfectly determined by the covariate sign; the score still goes
        // to zero (as the slope diverges), so the fit converges numerically
        // with fitted probabilities at the clamp bounds
        let design = array![[1.0, -2.0], [1.0, -1.0], [1.0, 1.0], [1.0, 2.0]];
        let x = array![0.0, 0.0, 1.0, 1.0];
        let fit = fit_ps(&design, &x).unwrap();
        assert!(fit.psi_hat[1] > 10.0);
        assert!(fit.fitted_eta[0] >= ETA_CLAMP);
        assert!(fit.fitted_eta[0] < 1e-6);
        assert!(fit.fitted_eta[3] > 1.0 - 1e-6);
        assert!(fit.fitted_eta[3] <= 1.0 - ETA_CLAMP);
    }

    #[test]
    fn ols_exact_line() {
        let design = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
        let y = array![1.0, 3.0, 5.0];
        let fit = fit_or(&design, &y).unwrap();
        assert_abs_diff_eq!(fit.xi_hat[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.xi_hat[1], 2.0, epsilon = 1e-10);
        assert!(fit.sigma2_degenerate);
        assert_eq!(fit.sigma2_hat, 1.0);
    }

    #[test]
    fn ols_intercept_only_is_mean() {
        let design = intercept_design(4);
        let y = array![1.0, 2.0, 3.0, 6.0];
        let fit = fit_or(&design, &y).unwrap();
        assert_abs_diff_eq!(fit.xi_hat[0], 3.0, epsilon = 1e-12);
        // RSS = 1 + 4 + 0 + 9 = 14, df = 3
        assert_abs_diff_eq!(fit.sigma2_hat, 14.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn or_residuals_orthogonal_to_design() {
        let design = array![
            [1.0, 0.3, 2.0],
            [1.0, -1.1, 0.5],
            [1.0, 0.8, -0.7],
            [1.0, 2.0, 1.2],
            [1.0, -0.2, 0.1],
            [1.0, 1.4, -1.5],
        ];
        let y = array![2.0, -0.5, 1.1, 3.7, 0.2, -1.0];
        let fit = fit_or(&design, &y).unwrap();
        let resid = &y - &fit.fitted;
        let grad = design.t().dot(&resid);
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for g in grad.iter() {
            assert!(g.abs() <= 1e-8 * 6.0 * scale);
        }
    }

    #[test]
    fn or_scores_zero_when_interpolating() {
        let design = array![[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
        let y = array![1.0, 3.0, 5.0];
        let fit = fit_or(&design, &y).unwrap();
        let scores = or_scores(&fit, &y).unwrap();
        assert!(scores.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn ps_scores_hand_computed() {
        let fit = PsFit {
            psi_hat: array![0.0],
            design: array![[1.0], [1.0]],
            fitted_eta: array![0.5, 0.5],
            converged: true,
            iterations: 0,
        };
        let scores = ps_scores(&fit, &array![1.0, 0.0]).unwrap();
        assert_eq!(scores[[0, 0]], 0.5);
        assert_eq!(scores[[1, 0]], -0.5);
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let design = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        // unbalanced so the score at psi = 0 is nonzero and a Newton step
        // against the singular Hessian is actually attempted
        let x = array![1.0, 1.0, 1.0, 0.0];
        assert!(matches!(fit_ps(&design, &x), Err(Error::Singular(_))));
        let y = array![1.0, 2.0, 3.0, 4.0];
        assert!(matches!(fit_or(&design, &y), Err(Error::Singular(_))));
    }
}
