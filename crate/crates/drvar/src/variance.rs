//! Corrected variance estimators for the doubly robust point estimate:
//! joint sandwich over the stacked estimating equations, efficient-score
//! projection, and bootstrap joint inference.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use crate::aipw::{self, FittedNuisances};
use crate::data::{Dataset, DesignSpec, JointParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::stream;

/// n x p matrix of per-observation estimating-function values, with columns
/// partitioned as [U | V (q cols) | T (r cols)].
#[derive(Debug, Clone)]
pub struct EfMatrix {
    pub values: Array2<f64>,
    pub q: usize,
    pub r: usize,
}

impl EfMatrix {
    pub fn p(&self) -> usize {
        1 + self.q + self.r
    }

    pub fn u_column(&self) -> Array1<f64> {
        self.values.column(0).to_owned()
    }

    /// The concatenated nuisance-score block (V and T columns).
    pub fn nuisance_block(&self) -> Array2<f64> {
        self.values.slice(s![.., 1..]).to_owned()
    }

    pub fn column_means(&self) -> Array1<f64> {
        let n = self.values.nrows() as f64;
        self.values.sum_axis(ndarray::Axis(0)) / n
    }
}

/// Joint sandwich covariance output.
#[derive(Debug, Clone)]
pub struct SandwichOutput {
    /// Empirical negative Jacobian of the mean estimating function.
    pub bread: Array2<f64>,
    /// (1/n) sum W_i W_i'.
    pub meat: Array2<f64>,
    /// Covariance of theta_hat: bread^-1 meat bread^-T / n, symmetrized.
    pub sigma_theta: Array2<f64>,
    pub sigma_mu: f64,
    pub se_mu: f64,
    pub params: JointParams,
    pub mu_hat: f64,
}

/// Efficient-score projection output.
#[derive(Debug, Clone)]
pub struct EfficientScoreOutput {
    pub u_eff: Array1<f64>,
    /// Variance of mu_hat itself: (1/n^2) sum u_eff_i^2.
    pub var_mu: f64,
    pub se_mu: f64,
}

/// Bootstrap joint inference output.
#[derive(Debug, Clone)]
pub struct BootstrapOutput {
    pub se_mu: f64,
    /// Sample covariance of the joint bootstrap estimates (divisor M).
    pub sigma_theta_boot: Array2<f64>,
    pub replicates_used: usize,
    pub replicates_skipped: usize,
}

/// Stacks per-observation estimating functions at the given parameters.
///
/// `sigma2` fixes the outcome-score scaling; pass the fitted residual
/// variance so all evaluations along a finite-difference path agree.
pub fn stack_ef(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    params: &JointParams,
    sigma2: f64,
) -> Result<EfMatrix> {
    let q = ps_spec.ncols();
    let r = or_spec.ncols();
    if params.psi.len() != q || params.xi.len() != r {
        return Err(Error::Spec(format!(
            "parameter blocks ({}, {}) do not match spec widths ({q}, {r})",
            params.psi.len(),
            params.xi.len()
        )));
    }
    let n = ds.n();
    let u = aipw::eif_values_at(ds, ps_spec, or_spec, params)?;
    let v = aipw::ps_scores_at(ds, ps_spec, &params.psi)?;
    let t = aipw::or_scores_at(ds, or_spec, &params.xi, sigma2)?;
    let mut values = Array2::zeros((n, 1 + q + r));
    values.column_mut(0).assign(&u);
    values.slice_mut(s![.., 1..1 + q]).assign(&v);
    values.slice_mut(s![.., 1 + q..]).assign(&t);
    Ok(EfMatrix { values, q, r })
}

/// Bread matrix by central finite differences of the stacked column means.
///
/// Entry (i, j) is the negative derivative of mean estimating function i with
/// respect to parameter j, with per-coordinate step 1e-5 * max(1, |theta_j|).
pub fn bread_matrix(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    params: &JointParams,
    sigma2: f64,
) -> Result<Array2<f64>> {
    let blocks = params.block_index();
    let p = blocks.flat_len();
    let flat = params.flatten();
    let mut bread = Array2::zeros((p, p));
    for j in 0..p {
        let h = 1e-5 * flat[j].abs().max(1.0);
        let mut plus = flat.clone();
        plus[j] += h;
        let mut minus = flat.clone();
        minus[j] -= h;
        let mean_plus = stack_ef(
            ds,
            ps_spec,
            or_spec,
            &JointParams::unflatten(&plus, blocks)?,
            sigma2,
        )?
        .column_means();
        let mean_minus = stack_ef(
            ds,
            ps_spec,
            or_spec,
            &JointParams::unflatten(&minus, blocks)?,
            sigma2,
        )?
        .column_means();
        for i in 0..p {
            bread[[i, j]] = (mean_minus[i] - mean_plus[i]) / (2.0 * h);
        }
    }
    Ok(bread)
}

/// Solves the stacked system and returns the full sandwich covariance.
///
/// The system is triangular (V involves only psi, T only xi, U is linear in
/// mu), so sequential solving is exact: psi_hat from V, xi_hat from T, then
/// mu_hat in closed form from U.
pub fn joint_sandwich(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
) -> Result<SandwichOutput> {
    let nf = aipw::fit_nuisances(ds, ps_spec, or_spec)?;
    joint_sandwich_with(ds, ps_spec, or_spec, &nf)
}

/// [`joint_sandwich`] reusing existing nuisance fits.
pub fn joint_sandwich_with(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    nf: &FittedNuisances,
) -> Result<SandwichOutput> {
    let n = ds.n() as f64;
    let aipw_res = aipw::estimate_ace_with(ds, nf)?;
    let params = aipw_res.params.clone();
    let sigma2 = nf.or.sigma2_hat;

    let ef = stack_ef(ds, ps_spec, or_spec, &params, sigma2)?;
    let meat = ef.values.t().dot(&ef.values) / n;
    let bread = bread_matrix(ds, ps_spec, or_spec, &params, sigma2)?;
    let bread_inv = linalg::inverse(&bread)
        .map_err(|_| Error::Singular("bread matrix is singular".to_string()))?;
    let sigma_scaled = bread_inv.dot(&meat).dot(&bread_inv.t());
    let mut sigma_theta = sigma_scaled / n;
    // symmetrize; the two triangles differ only by finite-difference noise
    let transposed = sigma_theta.t().to_owned();
    sigma_theta = (&sigma_theta + &transposed) / 2.0;
    let sigma_mu = sigma_theta[[0, 0]];
    Ok(SandwichOutput {
        bread,
        meat,
        sigma_theta,
        sigma_mu,
        se_mu: sigma_mu.max(0.0).sqrt(),
        params,
        mu_hat: aipw_res.mu_hat,
    })
}

/// Projects U onto the orthocomplement of the nuisance scores and returns the
/// plug-in variance of the projected values.
pub fn efficient_score_variance(ef: &EfMatrix) -> Result<EfficientScoreOutput> {
    let n = ef.values.nrows();
    let nf = n as f64;
    let u = ef.u_column();
    let nuis = ef.nuisance_block();
    let k = nuis.ncols();

    // I12 = (1/n) sum U_i N_i', I22 = (1/n) sum N_i N_i'
    let i12 = nuis.t().dot(&u) / nf;
    let i22 = nuis.t().dot(&nuis) / nf;
    let coef = linalg::solve(&i22, &i12)
        .map_err(|_| Error::Singular("collinear nuisance scores".to_string()))?;

    let mut u_eff = u.clone();
    for i in 0..n {
        let mut proj = 0.0;
        for j in 0..k {
            proj += coef[j] * nuis[[i, j]];
        }
        u_eff[i] -= proj;
    }
    let var_mu = u_eff.iter().map(|v| v * v).sum::<f64>() / (nf * nf);
    Ok(EfficientScoreOutput { u_eff, var_mu, se_mu: var_mu.sqrt() })
}

/// Bootstrap joint inference: resample rows, refit nuisances, recompute the
/// plug-in point estimate, and take the covariance of the joint estimates.
///
/// Replicate `m` draws from a stream derived from `(seed, m)`, so the result
/// is bit-identical regardless of scheduling. Degenerate replicates
/// (single-class treatment or separation) are skipped and counted; more than
/// 5% skipped is an error.
pub fn bootstrap_joint(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    m: usize,
    seed: u64,
) -> Result<BootstrapOutput> {
    if m < 2 {
        return Err(Error::Config(format!("bootstrap needs M >= 2, got {m}")));
    }
    let n = ds.n();
    let estimates: Vec<Option<Array1<f64>>> = (0..m)
        .into_par_iter()
        .map(|rep| {
            use rand::Rng;
            let mut rng = stream::replication_rng(seed, rep as u64);
            let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let resampled = match ds.select_rows(&indices) {
                Ok(d) => d,
                Err(_) => return None,
            };
            let nf = match aipw::fit_nuisances(&resampled, ps_spec, or_spec) {
                Ok(f) => f,
                Err(_) => return None,
            };
            let res = aipw::estimate_ace_with(&resampled, &nf).ok()?;
            Some(res.params.flatten())
        })
        .collect();

    let kept: Vec<&Array1<f64>> = estimates.iter().flatten().collect();
    let skipped = m - kept.len();
    if skipped * 20 > m {
        return Err(Error::Degenerate(format!(
            "{skipped} of {m} bootstrap replicates degenerate (> 5%)"
        )));
    }
    let m_eff = kept.len() as f64;
    let p = kept[0].len();
    let mut mean = Array1::<f64>::zeros(p);
    for est in &kept {
        mean += *est;
    }
    mean /= m_eff;
    let mut cov = Array2::<f64>::zeros((p, p));
    for est in &kept {
        let d = *est - &mean;
        for a in 0..p {
            for b in 0..p {
                cov[[a, b]] += d[a] * d[b];
            }
        }
    }
    cov /= m_eff;
    let se_mu = cov[[0, 0]].sqrt();
    Ok(BootstrapOutput {
        se_mu,
        sigma_theta_boot: cov,
        replicates_used: kept.len(),
        replicates_skipped: skipped,
    })
}
