//! Doubly robust point estimation of the average causal effect and the
//! influence-function plug-in variance.

use ndarray::{Array1, Array2};

use crate::data::{build_design, Dataset, DesignSpec, JointParams};
use crate::error::{Error, Result};
use crate::nuisance::{self, OrFit, PsFit};

/// AIPW point estimate with its per-observation influence values.
#[derive(Debug, Clone)]
pub struct AipwResult {
    pub mu_hat: f64,
    /// U_i evaluated at the fitted parameters; mean is zero by construction.
    pub u_values: Array1<f64>,
    /// Plug-in variance of mu_hat itself: (1/n^2) sum U_i^2.
    pub plugin_var_of_mean: f64,
    pub se_plugin: f64,
    pub params: JointParams,
}

/// Per-observation influence values at the given parameters.
///
/// U_i = x/eta (y - Q1) - (1-x)/(1-eta) (y - Q0) + (Q1 - Q0) - mu.
pub fn eif_values(
    ds: &Dataset,
    eta: &Array1<f64>,
    q1: &Array1<f64>,
    q0: &Array1<f64>,
    mu: f64,
) -> Result<Array1<f64>> {
    let n = ds.n();
    if eta.len() != n || q1.len() != n || q0.len() != n {
        return Err(Error::Shape(format!(
            "eif_values: n = {n} but eta/q1/q0 have lengths {}/{}/{}",
            eta.len(),
            q1.len(),
            q0.len()
        )));
    }
    let mut u = Array1::zeros(n);
    for i in 0..n {
        let e = eta[i];
        if e <= 0.0 || e >= 1.0 {
            return Err(Error::Positivity(format!("eta[{i}] = {e} outside (0, 1)")));
        }
        let x = ds.x()[i];
        let y = ds.y()[i];
        u[i] = x / e * (y - q1[i]) - (1.0 - x) / (1.0 - e) * (y - q0[i]) + (q1[i] - q0[i]) - mu;
    }
    Ok(u)
}

/// Nuisance fits plus the treatment-arm predictions used by the estimator.
#[derive(Debug, Clone)]
pub struct FittedNuisances {
    pub ps: PsFit,
    pub or: OrFit,
    pub q1: Array1<f64>,
    pub q0: Array1<f64>,
}

/// Fits both nuisance models on `ds` and evaluates Q(1, z) and Q(0, z).
pub fn fit_nuisances(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
) -> Result<FittedNuisances> {
    let ps_design = build_design(ds, ps_spec, None)?;
    let ps = nuisance::fit_ps(&ps_design, ds.x())?;
    let or_design = build_design(ds, or_spec, None)?;
    let or = nuisance::fit_or(&or_design, ds.y())?;
    let d1 = build_design(ds, or_spec, Some(1.0))?;
    let d0 = build_design(ds, or_spec, Some(0.0))?;
    let q1 = d1.dot(&or.xi_hat);
    let q0 = d0.dot(&or.xi_hat);
    Ok(FittedNuisances { ps, or, q1, q0 })
}

/// Closed-form mu_hat given fitted nuisances.
///
/// U is linear in mu with slope -1, so the root of sum_i U_i(mu) = 0 is the
/// sample mean of the augmented contrasts.
pub fn mu_hat_from_nuisances(ds: &Dataset, nf: &FittedNuisances) -> f64 {
    let n = ds.n();
    let mut total = 0.0;
    for i in 0..n {
        let e = nf.ps.fitted_eta[i];
        let x = ds.x()[i];
        let y = ds.y()[i];
        total += x / e * (y - nf.q1[i]) - (1.0 - x) / (1.0 - e) * (y - nf.q0[i])
            + (nf.q1[i] - nf.q0[i]);
    }
    total / n as f64
}

/// Full AIPW estimate: fit nuisances, solve for mu, and report the plug-in SE.
pub fn estimate_ace(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
) -> Result<AipwResult> {
    let nf = fit_nuisances(ds, ps_spec, or_spec)?;
    estimate_ace_with(ds, &nf)
}

/// Same as [`estimate_ace`] but reuses existing nuisance fits.
pub fn estimate_ace_with(ds: &Dataset, nf: &FittedNuisances) -> Result<AipwResult> {
    let n = ds.n();
    let mu_hat = mu_hat_from_nuisances(ds, nf);
    let u_values = eif_values(ds, &nf.ps.fitted_eta, &nf.q1, &nf.q0, mu_hat)?;
    let sum_sq: f64 = u_values.iter().map(|u| u * u).sum();
    let plugin_var_of_mean = sum_sq / (n as f64 * n as f64);
    Ok(AipwResult {
        mu_hat,
        u_values,
        plugin_var_of_mean,
        se_plugin: plugin_var_of_mean.sqrt(),
        params: JointParams {
            mu: mu_hat,
            psi: nf.ps.psi_hat.clone(),
            xi: nf.or.xi_hat.clone(),
        },
    })
}

/// Influence values evaluated at an arbitrary flat parameter vector.
///
/// Used by the finite-difference bread computation, which perturbs theta away
/// from the fitted solution. `sigma2` is held fixed at the fitted residual
/// variance so the outcome-score scaling stays consistent across evaluations.
pub fn eif_values_at(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    params: &JointParams,
) -> Result<Array1<f64>> {
    let ps_design = build_design(ds, ps_spec, None)?;
    let eta = ps_design.dot(&params.psi).mapv(|v| nuisance::clamp_eta(nuisance::expit(v)));
    let d1 = build_design(ds, or_spec, Some(1.0))?;
    let d0 = build_design(ds, or_spec, Some(0.0))?;
    let q1 = d1.dot(&params.xi);
    let q0 = d0.dot(&params.xi);
    eif_values(ds, &eta, &q1, &q0, params.mu)
}

/// Propensity design and score rows at arbitrary psi, for bread evaluation.
pub fn ps_scores_at(ds: &Dataset, ps_spec: &DesignSpec, psi: &Array1<f64>) -> Result<Array2<f64>> {
    let design = build_design(ds, ps_spec, None)?;
    let eta = design.dot(psi).mapv(nuisance::expit);
    let mut scores = design;
    for i in 0..ds.n() {
        let resid = ds.x()[i] - eta[i];
        for j in 0..scores.ncols() {
            scores[[i, j]] *= resid;
        }
    }
    Ok(scores)
}

/// Outcome score rows at arbitrary xi with a fixed residual variance.
pub fn or_scores_at(
    ds: &Dataset,
    or_spec: &DesignSpec,
    xi: &Array1<f64>,
    sigma2: f64,
) -> Result<Array2<f64>> {
    let design = build_design(ds, or_spec, None)?;
    let fitted = design.dot(xi);
    let mut scores = design;
    for i in 0..ds.n() {
        let resid = (ds.y()[i] - fitted[i]) / sigma2;
        for j in 0..scores.ncols() {
            scores[[i, j]] *= resid;
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DesignSpec, Factor, Term, Transform};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn single_observation_arithmetic() {
        let ds = Dataset::new(
            array![10.0, 0.0],
            array![1.0, 0.0],
            array![[0.0], [0.0]],
            vec!["z1".into()],
        )
        .unwrap();
        let u = eif_values(&ds, &array![0.5, 0.5], &array![8.0, 0.0], &array![3.0, 0.0], 0.0)
            .unwrap();
        // (1/0.5)(10-8) + (8-3) = 9
        assert_abs_diff_eq!(u[0], 9.0, epsilon = 1e-12);
    }

    #[test]
    fn residual_terms_vanish_when_or_interpolates() {
        let ds = Dataset::new(
            array![5.0, 2.0, 5.0],
            array![1.0, 0.0, 1.0],
            array![[1.0], [2.0], [3.0]],
            vec!["z1".into()],
        )
        .unwrap();
        let q1 = array![5.0, 4.0, 5.0];
        let q0 = array![1.0, 2.0, 3.0];
        // y_i equals the prediction for the observed arm
        let u = eif_values(&ds, &array![0.4, 0.6, 0.5], &q1, &q0, 0.0).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(u[i], q1[i] - q0[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn eta_on_boundary_rejected() {
        let ds = Dataset::new(
            array![1.0, 2.0],
            array![1.0, 0.0],
            array![[0.0], [0.0]],
            vec!["z1".into()],
        )
        .unwrap();
        let err = eif_values(&ds, &array![1.0, 0.5], &array![0.0, 0.0], &array![0.0, 0.0], 0.0);
        assert!(matches!(err, Err(Error::Positivity(_))));
    }

    /// Independent term-by-term EIF evaluation; shares nothing with
    /// `eif_values` beyond the raw inputs.
    fn eif_oracle(
        y: &[f64],
        x: &[f64],
        eta: &[f64],
        q1: &[f64],
        q0: &[f64],
        mu: f64,
    ) -> Vec<f64> {
        let mut out = Vec::with_capacity(y.len());
        for i in 0..y.len() {
            let ipw_treated = if x[i] == 1.0 { (y[i] - q1[i]) / eta[i] } else { 0.0 };
            let ipw_control = if x[i] == 0.0 { (y[i] - q0[i]) / (1.0 - eta[i]) } else { 0.0 };
            let augmentation = q1[i] - q0[i];
            out.push(ipw_treated - ipw_control + augmentation - mu);
        }
        out
    }

    #[test]
    fn matches_independent_oracle_on_random_rows() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(41);
        let n = 50;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let x: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let q1: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q0: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mu = 1.37;
        let mut x_arr = Array1::from(x.clone());
        // ensure both arms present
        x_arr[0] = 1.0;
        x_arr[1] = 0.0;
        let x = x_arr.to_vec();
        let ds = Dataset::new(
            Array1::from(y.clone()),
            x_arr,
            Array2::zeros((n, 0)),
            vec![],
        )
        .unwrap();
        let u = eif_values(
            &ds,
            &Array1::from(eta.clone()),
            &Array1::from(q1.clone()),
            &Array1::from(q0.clone()),
            mu,
        )
        .unwrap();
        let expected = eif_oracle(&y, &x, &eta, &q1, &q0, mu);
        for i in 0..n {
            assert_abs_diff_eq!(u[i], expected[i], epsilon = 1e-12);
        }
    }

    fn dgp_specs() -> (DesignSpec, DesignSpec) {
        let z = |name: &str| Factor { name: name.into(), transform: Transform::Identity };
        let ps = DesignSpec::new(vec![
            Term::intercept(),
            Term { factors: vec![z("z2")], with_treatment: false },
            Term { factors: vec![z("z1"), z("z2")], with_treatment: false },
        ])
        .unwrap();
        let or = DesignSpec::new(vec![
            Term::intercept(),
            Term { factors: vec![z("z1")], with_treatment: false },
            Term { factors: vec![z("z2")], with_treatment: false },
            Term { factors: vec![z("z1"), z("z2")], with_treatment: false },
            Term { factors: vec![], with_treatment: true },
            Term { factors: vec![z("z1")], with_treatment: true },
            Term { factors: vec![z("z2")], with_treatment: true },
            Term { factors: vec![z("z1"), z("z2")], with_treatment: true },
        ])
        .unwrap();
        (ps, or)
    }

    #[test]
    fn dgp_correct_ps_spec_has_three_columns() {
        let (ps, _) = dgp_specs();
        assert_eq!(ps.ncols(), 3);
    }

    #[test]
    fn estimating_equation_residual_vanishes() {
        let ds = crate::simlab::gen_dataset(200, &mut crate::stream::replication_rng(3, 0)).unwrap();
        let (ps, or) = dgp_specs();
        let res = estimate_ace(&ds, &ps, &or).unwrap();
        let total: f64 = res.u_values.sum();
        let scale = res.u_values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(total.abs() <= 1e-10 * 200.0 * scale);
    }

    #[test]
    fn ipw_reduction_on_stratified_fixture() {
        // Single stratum, intercept-only PS and OR. With constant eta = mean(x)
        // and constant Q, AIPW reduces to the Horvitz-Thompson difference.
        let y = array![3.0, 5.0, 7.0, 2.0, 4.0, 6.0];
        let x = array![1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let ds = Dataset::new(y.clone(), x.clone(), Array2::zeros((6, 0)), vec![]).unwrap();
        let spec = DesignSpec::new(vec![Term::intercept()]).unwrap();
        let res = estimate_ace(&ds, &spec, &spec).unwrap();

        // hand computation: eta = 1/2, Q = mean(y) = 4.5
        let eta = 0.5;
        let q = 4.5;
        let n = 6.0;
        let mut hand = 0.0;
        for i in 0..6 {
            hand += x[i] / eta * (y[i] - q) - (1.0 - x[i]) / (1.0 - eta) * (y[i] - q);
        }
        hand /= n;
        assert_abs_diff_eq!(res.mu_hat, hand, epsilon = 1e-10);
    }

    #[test]
    fn perfect_or_fit_gives_mean_contrast() {
        // y exactly linear in {1, x}: the OR interpolates within arms, so
        // mu_hat = mean(Q1 - Q0) = coefficient on x.
        let y = array![1.0, 1.0, 4.0, 4.0, 1.0, 4.0];
        let x = array![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let z = array![[0.1], [0.2], [0.3], [0.4], [0.5], [0.6]];
        let ds = Dataset::new(y, x, z, vec!["z1".into()]).unwrap();
        let ps = DesignSpec::new(vec![Term::intercept()]).unwrap();
        let or = DesignSpec::new(vec![
            Term::intercept(),
            Term { factors: vec![], with_treatment: true },
        ])
        .unwrap();
        let res = estimate_ace(&ds, &ps, &or).unwrap();
        assert_abs_diff_eq!(res.mu_hat, 3.0, epsilon = 1e-10);
    }

    #[test]
    fn se_plugin_row_permutation_invariant() {
        let ds = crate::simlab::gen_dataset(120, &mut crate::stream::replication_rng(9, 0)).unwrap();
        let (ps, or) = dgp_specs();
        let res = estimate_ace(&ds, &ps, &or).unwrap();
        let perm: Vec<usize> = (0..120).rev().collect();
        let ds_p = ds.select_rows(&perm).unwrap();
        let res_p = estimate_ace(&ds_p, &ps, &or).unwrap();
        assert_abs_diff_eq!(res.se_plugin, res_p.se_plugin, epsilon = 1e-10);
    }
}
