//! Empirical-Bayes EM estimation of the shared subspace.
//!
//! The subspace `VV'` is estimated by maximum marginal likelihood after
//! integrating the per-group nuisance parameters `M_k = sigma2_k (Psi_k + I)`
//! and `sigma2_k` under Jeffreys priors. The E-step computes
//! `E[M_k^{-1} | V] = n_k (V'S_kV)^{-1}` and
//! `E[1/sigma2_k | V] = n_k (p - s) / tr[(I - VV')S_k]`; the M-step
//! maximizes `sum_k tr((E[1/sigma2_k] I - E[M_k^{-1}]) V'S_kV) / 2` over the
//! Stiefel manifold, warm-started at the previous iterate.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::model::{GroupDataset, SubspaceBasis};
use crate::stiefel::{maximize, OptimizerOptions, TraceObjective};

/// Per-group conditional expectations of the integrated-out parameters.
#[derive(Debug, Clone)]
pub struct EStepExpectations {
    /// `E[M_k^{-1} | V]`, one `s x s` symmetric positive definite matrix per group.
    pub inv_m: Vec<DMatrix<f64>>,
    /// `E[1/sigma2_k | V]`, one positive scalar per group.
    pub inv_sigma2: Vec<f64>,
}

/// Options for [`fit`].
#[derive(Debug, Clone)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Relative convergence tolerance on the marginal log-likelihood.
    pub tol: f64,
    /// Options for the inner Stiefel maximization. The inner problem is run
    /// to its own convergence by default; cap `inner.max_iters` to trade
    /// M-step accuracy for speed.
    pub inner: OptimizerOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions { max_iters: 200, tol: 1e-8, inner: OptimizerOptions::default() }
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct EmFitResult {
    pub v_hat: SubspaceBasis,
    /// Marginal log-likelihood at the initial basis and after each EM
    /// iteration; nondecreasing up to rounding.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn check_groups(v: &SubspaceBasis, data: &[GroupDataset]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let p = v.p();
    if v.s() >= p {
        return Err(Error::InvalidInput(format!(
            "subspace dimension s = {} must be smaller than p = {p}",
            v.s()
        )));
    }
    for (k, d) in data.iter().enumerate() {
        if d.p() != p {
            return Err(Error::DimensionMismatch(format!(
                "group {k} has p = {} but the basis has p = {p}",
                d.p()
            )));
        }
    }
    Ok(())
}

/// Projected scatter `V'S_kV` and residual trace `tr[(I - VV')S_k]` for one group.
fn projected_parts(v: &SubspaceBasis, data_k: &GroupDataset) -> (DMatrix<f64>, f64) {
    let sv = data_k.scatter() * v.matrix();
    let t = v.matrix().transpose() * sv;
    let t = (&t + t.transpose()).scale(0.5);
    let resid = data_k.scatter().trace() - t.trace();
    (t, resid)
}

/// E-step: conditional expectations of `M_k^{-1}` and `1/sigma2_k` given `V`.
pub fn e_step(v: &SubspaceBasis, data: &[GroupDataset]) -> Result<EStepExpectations> {
    check_groups(v, data)?;
    let p = v.p();
    let s = v.s();
    let mut inv_m = Vec::with_capacity(data.len());
    let mut inv_sigma2 = Vec::with_capacity(data.len());
    for (k, d) in data.iter().enumerate() {
        let (t, resid) = projected_parts(v, d);
        let chol = Cholesky::new(t).ok_or_else(|| Error::DegenerateProjection {
            group: k,
            detail: "V'S_kV is singular".into(),
        })?;
        let inv = chol.inverse();
        let inv = (&inv + inv.transpose()).scale(0.5 * d.n() as f64);
        if resid <= 0.0 {
            return Err(Error::DegenerateNoise {
                group: k,
                detail: format!("tr[(I - VV')S_k] = {resid:.3e} is not positive"),
            });
        }
        inv_m.push(inv);
        inv_sigma2.push(d.n() as f64 * (p - s) as f64 / resid);
    }
    Ok(EStepExpectations { inv_m, inv_sigma2 })
}

/// M-step: maximize the expected complete-data log-likelihood over the
/// Stiefel manifold, warm-started at `v_prev`.
pub fn m_step(
    expectations: &EStepExpectations,
    data: &[GroupDataset],
    v_prev: &SubspaceBasis,
    inner: &OptimizerOptions,
) -> Result<SubspaceBasis> {
    check_groups(v_prev, data)?;
    if expectations.inv_m.len() != data.len() || expectations.inv_sigma2.len() != data.len() {
        return Err(Error::DimensionMismatch(
            "expectations and data have different group counts".into(),
        ));
    }
    let s = v_prev.s();
    let terms: Vec<(DMatrix<f64>, DMatrix<f64>)> = data
        .iter()
        .zip(expectations.inv_m.iter().zip(expectations.inv_sigma2.iter()))
        .map(|(d, (im, is2))| {
            let b = DMatrix::identity(s, s).scale(*is2) - im;
            (d.scatter().clone(), b)
        })
        .collect();
    let obj = TraceObjective::new(terms)?;
    let (v_new, _) = maximize(&obj, v_prev, inner)?;
    Ok(v_new)
}

/// Marginal log-likelihood of the subspace with `M_k` and `sigma2_k`
/// integrated out under Jeffreys priors (additive constants dropped):
/// `sum_k [ -(n_k/2) log|V'S_kV| - (n_k(p-s)/2) log tr((I - VV')S_k) ]`.
pub fn log_marginal_likelihood(v: &SubspaceBasis, data: &[GroupDataset]) -> Result<f64> {
    check_groups(v, data)?;
    let p = v.p();
    let s = v.s();
    let mut total = 0.0;
    for (k, d) in data.iter().enumerate() {
        let (t, resid) = projected_parts(v, d);
        let chol = Cholesky::new(t).ok_or_else(|| Error::DegenerateProjection {
            group: k,
            detail: "V'S_kV is singular".into(),
        })?;
        if resid <= 0.0 {
            return Err(Error::DegenerateNoise {
                group: k,
                detail: format!("tr[(I - VV')S_k] = {resid:.3e} is not positive"),
            });
        }
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let n = d.n() as f64;
        total += -0.5 * n * log_det - 0.5 * n * (p - s) as f64 * resid.ln();
    }
    Ok(total)
}

/// Plug-in noise variance `tr[(I - VV')S_k] / (n_k (p - s))`.
pub fn sigma2_plugin(v: &SubspaceBasis, data_k: &GroupDataset) -> Result<f64> {
    check_groups(v, std::slice::from_ref(data_k))?;
    let (_, resid) = projected_parts(v, data_k);
    if resid <= 0.0 {
        return Err(Error::DegenerateNoise {
            group: 0,
            detail: format!("tr[(I - VV')S_k] = {resid:.3e} is not positive"),
        });
    }
    Ok(resid / (data_k.n() as f64 * (v.p() - v.s()) as f64))
}

/// Initial basis: top-`s` eigenvectors of the pooled scatter `sum_k S_k`.
pub fn pooled_init(data: &[GroupDataset], s: usize) -> Result<SubspaceBasis> {
    if data.is_empty() {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let p = data[0].p();
    if s == 0 || s >= p {
        return Err(Error::InvalidInput(format!(
            "need 1 <= s < p, got s = {s}, p = {p}"
        )));
    }
    let mut pooled = DMatrix::zeros(p, p);
    for d in data {
        if d.p() != p {
            return Err(Error::DimensionMismatch("groups disagree on p".into()));
        }
        pooled += d.scatter();
    }
    Ok(top_eigenvectors(&pooled, s))
}

/// Top-`s` eigenvectors of a symmetric matrix, ordered by decreasing eigenvalue.
pub(crate) fn top_eigenvectors(m: &DMatrix<f64>, s: usize) -> SubspaceBasis {
    let p = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..p).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut v = DMatrix::zeros(p, s);
    for (j, &i) in idx[..s].iter().enumerate() {
        v.set_column(j, &eig.eigenvectors.column(i));
    }
    // Eigenvector columns are orthonormal up to rounding; tighten before
    // wrapping so the basis invariant holds exactly downstream.
    SubspaceBasis::new(v.qr().q()).expect("eigenvector basis must be orthonormal")
}

/// Run EM to convergence from the pooled-scatter initialization.
pub fn fit(data: &[GroupDataset], s: usize, opts: &EmOptions) -> Result<EmFitResult> {
    let v0 = pooled_init(data, s)?;
    fit_from(data, &v0, opts)
}

/// Run EM to convergence from an explicit starting basis.
pub fn fit_from(data: &[GroupDataset], v0: &SubspaceBasis, opts: &EmOptions) -> Result<EmFitResult> {
    check_groups(v0, data)?;
    let mut v = v0.clone();
    let mut ll = log_marginal_likelihood(&v, data)?;
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let expectations = e_step(&v, data)?;
        let v_new = m_step(&expectations, data, &v, &opts.inner)?;
        let ll_new = log_marginal_likelihood(&v_new, data)?;
        iterations += 1;
        trace.push(ll_new);
        v = v_new;
        let delta = (ll_new - ll).abs();
        ll = ll_new;
        if delta <= opts.tol * (1.0 + ll_new.abs()) {
            converged = true;
            break;
        }
    }

    Ok(EmFitResult { v_hat: v, objective_trace: trace, iterations, converged })
}

/// Which reading of the goodness-of-fit ratio to use. The squared form
/// treats both Frobenius norms as squared, which is the reading consistent
/// with interpreting the statistic as a ratio of eigenvalue sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GammaNorm {
    #[default]
    Squared,
    /// Unsquared norms, evaluated exactly as displayed.
    AsPrinted,
}

/// Proportion of signal variance captured by the subspace:
/// `gamma = [tr(V'S_kV)/n] / [(top-s eigenvalue sum of S_k)/n - sigma2 p s / n]`
/// in the squared-norm reading (the default).
pub fn goodness_of_fit(data_k: &GroupDataset, v: &SubspaceBasis, sigma2: f64) -> Result<f64> {
    goodness_of_fit_with(data_k, v, sigma2, GammaNorm::Squared)
}

/// Goodness of fit with an explicit norm convention.
pub fn goodness_of_fit_with(
    data_k: &GroupDataset,
    v: &SubspaceBasis,
    sigma2: f64,
    norm: GammaNorm,
) -> Result<f64> {
    if data_k.p() != v.p() {
        return Err(Error::DimensionMismatch(format!(
            "group has p = {} but the basis has p = {}",
            data_k.p(),
            v.p()
        )));
    }
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "sigma2 must be nonnegative and finite, got {sigma2}"
        )));
    }
    let n = data_k.n() as f64;
    let p = v.p() as f64;
    let s = v.s();
    let (t, _) = projected_parts(v, data_k);
    let captured = t.trace();

    let mut eigs: Vec<f64> = data_k.scatter().clone().symmetric_eigenvalues().iter().cloned().collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top_sum: f64 = eigs[..s].iter().sum();

    let noise = sigma2 * p * s as f64 / n;
    let (num, denom) = match norm {
        GammaNorm::Squared => (captured / n, top_sum / n - noise),
        GammaNorm::AsPrinted => (captured.max(0.0).sqrt() / n, top_sum.max(0.0).sqrt() / n - noise),
    };
    if denom <= 0.0 {
        return Err(Error::GofDenominator { value: denom });
    }
    Ok(num / denom)
}
