//! Sample-splitting and cross-fitting: nuisances fit on one half, target
//! estimated on the complementary half, roles swapped, results averaged.

use ndarray::Array1;

use crate::aipw;
use crate::data::{build_design, Dataset, DesignSpec};
use crate::error::{Error, Result};
use crate::nuisance;
use crate::stream;

/// A random partition of row indices into two halves.
///
/// `half_a` has floor(n/2) rows; for odd n the extra row goes to `half_b`,
/// which serves as the nuisance half in Sample 1.
#[derive(Debug, Clone)]
pub struct SplitPlan {
    pub half_a: Vec<usize>,
    pub half_b: Vec<usize>,
    pub seed: u64,
}

/// Combined cross-fitted estimate.
#[derive(Debug, Clone)]
pub struct SscfResult {
    pub mu_1: f64,
    pub mu_2: f64,
    /// Per-sample plug-in variances of sqrt(n_k) (mu_hat_k - mu).
    pub var_1: f64,
    pub var_2: f64,
    pub mu_sscf: f64,
    pub var_sscf: f64,
    pub se_mu: f64,
}

/// Draws a uniform random partition, deterministic given `(n, seed)`.
pub fn make_split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < 4 {
        return Err(Error::Config(format!("SSCF needs n >= 4, got {n}")));
    }
    use rand::seq::SliceRandom;
    let mut rng = stream::replication_rng(seed, u64::MAX);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let na = n / 2;
    let mut half_a = order[..na].to_vec();
    let mut half_b = order[na..].to_vec();
    half_a.sort_unstable();
    half_b.sort_unstable();
    Ok(SplitPlan { half_a, half_b, seed })
}

struct HalfFit {
    mu: f64,
    /// Plug-in variance of sqrt(n_k) (mu_hat - mu): (1/n_k) sum U_i^2.
    var: f64,
}

/// Fits both nuisances on `nuisance_rows`, then evaluates U and solves for mu
/// on `target_rows`.
fn cross_fit_half(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    nuisance_rows: &[usize],
    target_rows: &[usize],
) -> Result<HalfFit> {
    let nuisance_half = ds.select_rows(nuisance_rows).map_err(|_| {
        Error::Degenerate(
            "split half lacks both treatment classes; try a different seed".to_string(),
        )
    })?;
    let target_half = ds.select_rows(target_rows).map_err(|_| {
        Error::Degenerate(
            "split half lacks both treatment classes; try a different seed".to_string(),
        )
    })?;

    let ps_design = build_design(&nuisance_half, ps_spec, None)?;
    let ps_fit = nuisance::fit_ps(&ps_design, nuisance_half.x())?;
    let or_design = build_design(&nuisance_half, or_spec, None)?;
    let or_fit = nuisance::fit_or(&or_design, nuisance_half.y())?;

    // evaluate nuisances on the target half
    let target_ps_design = build_design(&target_half, ps_spec, None)?;
    let eta: Array1<f64> = target_ps_design
        .dot(&ps_fit.psi_hat)
        .mapv(|v| nuisance::clamp_eta(nuisance::expit(v)));
    let d1 = build_design(&target_half, or_spec, Some(1.0))?;
    let d0 = build_design(&target_half, or_spec, Some(0.0))?;
    let q1 = d1.dot(&or_fit.xi_hat);
    let q0 = d0.dot(&or_fit.xi_hat);

    let nk = target_half.n() as f64;
    let mut total = 0.0;
    for i in 0..target_half.n() {
        let x = target_half.x()[i];
        let y = target_half.y()[i];
        total += x / eta[i] * (y - q1[i]) - (1.0 - x) / (1.0 - eta[i]) * (y - q0[i])
            + (q1[i] - q0[i]);
    }
    let mu = total / nk;
    let u = aipw::eif_values(&target_half, &eta, &q1, &q0, mu)?;
    let var = u.iter().map(|v| v * v).sum::<f64>() / nk;
    Ok(HalfFit { mu, var })
}

/// Runs both cross-fits and combines them.
pub fn sscf_estimate(
    ds: &Dataset,
    ps_spec: &DesignSpec,
    or_spec: &DesignSpec,
    plan: &SplitPlan,
) -> Result<SscfResult> {
    let n = ds.n();
    if plan.half_a.len() + plan.half_b.len() != n {
        return Err(Error::Shape(format!(
            "split covers {} rows but dataset has {n}",
            plan.half_a.len() + plan.half_b.len()
        )));
    }
    // Sample 1: nuisances on half_b, target on half_a; Sample 2 swaps roles.
    let s1 = cross_fit_half(ds, ps_spec, or_spec, &plan.half_b, &plan.half_a)?;
    let s2 = cross_fit_half(ds, ps_spec, or_spec, &plan.half_a, &plan.half_b)?;
    let mu_sscf = (s1.mu + s2.mu) / 2.0;
    let var_sscf = (s1.var + s2.var) / 2.0;
    Ok(SscfResult {
        mu_1: s1.mu,
        mu_2: s2.mu,
        var_1: s1.var,
        var_2: s2.var,
        mu_sscf,
        var_sscf,
        se_mu: (var_sscf / n as f64).sqrt(),
    })
}
