//! Maximization of weighted trace objectives over the Stiefel manifold.
//!
//! The objective has the form `F(V) = 1/2 sum_k tr(B_k V' S_k V)` for
//! symmetric `S_k` (p x p) and `B_k` (s x s). Iterates move along the Cayley
//! curve `V(tau) = (I + tau/2 W)^{-1} (I - tau/2 W) V` with
//! `W = G V' - V G'`, which preserves orthonormality exactly. The inverse is
//! applied through its rank-2s form, so each step solves a `2s x 2s` system
//! regardless of `p`. Step lengths are seeded with Barzilai-Borwein values
//! and safeguarded by monotone Armijo backtracking.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::SubspaceBasis;

/// A weighted trace objective `F(V) = 1/2 sum_k tr(B_k V' S_k V)`.
#[derive(Debug, Clone)]
pub struct TraceObjective {
    terms: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl TraceObjective {
    /// Build an objective from `(scatter, weight)` pairs. All scatters must
    /// be `p x p`, all weights `s x s`, and both symmetric.
    pub fn new(terms: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidInput("objective needs at least one term".into()));
        }
        let p = terms[0].0.nrows();
        let s = terms[0].1.nrows();
        for (k, (scatter, weight)) in terms.iter().enumerate() {
            if scatter.nrows() != p || scatter.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "term {k}: scatter is {}x{}, expected {p}x{p}",
                    scatter.nrows(),
                    scatter.ncols()
                )));
            }
            if weight.nrows() != s || weight.ncols() != s {
                return Err(Error::DimensionMismatch(format!(
                    "term {k}: weight is {}x{}, expected {s}x{s}",
                    weight.nrows(),
                    weight.ncols()
                )));
            }
            let sym_err = (scatter - scatter.transpose()).norm();
            if sym_err > 1e-10 * scatter.norm().max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "term {k}: scatter is not symmetric"
                )));
            }
            let wsym_err = (weight - weight.transpose()).norm();
            if wsym_err > 1e-10 * weight.norm().max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "term {k}: weight is not symmetric"
                )));
            }
        }
        Ok(TraceObjective { terms })
    }

    pub fn terms(&self) -> &[(DMatrix<f64>, DMatrix<f64>)] {
        &self.terms
    }

    pub fn p(&self) -> usize {
        self.terms[0].0.nrows()
    }

    pub fn s(&self) -> usize {
        self.terms[0].1.nrows()
    }

    /// Objective value at an arbitrary `p x s` matrix.
    pub fn value(&self, v: &DMatrix<f64>) -> f64 {
        let mut f = 0.0;
        for (scatter, weight) in &self.terms {
            let sv = scatter * v;
            let m = v.transpose() * sv;
            // tr(B M) for symmetric B, M.
            f += 0.5 * weight.component_mul(&m).sum();
        }
        f
    }

    /// Objective value and Euclidean gradient `G = sum_k S_k V B_k`.
    pub fn value_and_gradient(&self, v: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let mut f = 0.0;
        let mut g = DMatrix::zeros(v.nrows(), v.ncols());
        for (scatter, weight) in &self.terms {
            let sv = scatter * v;
            let m = v.transpose() * &sv;
            f += 0.5 * weight.component_mul(&m).sum();
            g += sv * weight;
        }
        (f, g)
    }
}

/// Euclidean gradient of the trace objective, `G = sum_k S_k V B_k`.
pub fn euclidean_gradient(obj: &TraceObjective, v: &SubspaceBasis) -> DMatrix<f64> {
    obj.value_and_gradient(v.matrix()).1
}

/// Options controlling the curvilinear search.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// Relative gradient tolerance: stop when the Riemannian gradient norm
    /// is at most `grad_tol * (1 + |F|)`.
    pub grad_tol: f64,
    pub step_init: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_iters: 500,
            grad_tol: 1e-6,
            step_init: 1e-2,
            armijo_c: 1e-4,
            max_backtracks: 40,
        }
    }
}

impl OptimizerOptions {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0
            || self.grad_tol <= 0.0
            || self.step_init <= 0.0
            || !(0.0..1.0).contains(&self.armijo_c)
            || self.armijo_c == 0.0
            || self.max_backtracks == 0
        {
            return Err(Error::InvalidInput(
                "optimizer options must be positive with armijo_c in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Signals that a single Cayley step could not be completed (singular
/// `2s x 2s` system for the attempted step length). Callers shrink `tau`
/// and retry.
#[derive(Debug, Error)]
#[error("cayley step failed: {0}")]
pub struct StepFailure(pub String);

/// One Cayley-transform step from `v` along the curve generated by
/// `W = grad v' - v grad'`, evaluated through the rank-2s identity
/// `V(tau) = V - tau P (I + tau/2 Q'P)^{-1} Q'V` with `P = [grad, V]`,
/// `Q = [V, -grad]`.
pub fn cayley_step(
    v: &SubspaceBasis,
    grad: &DMatrix<f64>,
    tau: f64,
) -> std::result::Result<SubspaceBasis, StepFailure> {
    let (p, s) = (v.p(), v.s());
    if grad.nrows() != p || grad.ncols() != s {
        return Err(StepFailure(format!(
            "gradient is {}x{}, expected {p}x{s}",
            grad.nrows(),
            grad.ncols()
        )));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(StepFailure(format!("step length {tau} must be finite and >= 0")));
    }
    if tau == 0.0 {
        return Ok(v.clone());
    }

    let vm = v.matrix();
    let mut pmat = DMatrix::zeros(p, 2 * s);
    pmat.columns_mut(0, s).copy_from(grad);
    pmat.columns_mut(s, s).copy_from(vm);
    let mut qmat = DMatrix::zeros(p, 2 * s);
    qmat.columns_mut(0, s).copy_from(vm);
    qmat.columns_mut(s, s).copy_from(&(-grad));

    let qtp = qmat.transpose() * &pmat;
    let sys = DMatrix::identity(2 * s, 2 * s) + qtp.scale(tau / 2.0);
    let rhs = qmat.transpose() * vm;
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or_else(|| StepFailure(format!("singular 2s x 2s system at tau = {tau}")))?;
    let mut out = vm - (&pmat * sol).scale(tau);

    if out.iter().any(|x| !x.is_finite()) {
        return Err(StepFailure(format!("non-finite iterate at tau = {tau}")));
    }
    // The Cayley map is orthogonal in exact arithmetic; correct any rounding
    // drift with a polar projection before wrapping.
    let gram = out.transpose() * &out;
    let drift = (&gram - DMatrix::identity(s, s)).norm();
    if drift > 1e-13 {
        let eig = gram.symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e <= 0.0) {
            return Err(StepFailure("iterate lost column rank".into()));
        }
        let inv_sqrt = DMatrix::from_fn(s, s, |i, j| {
            (0..s)
                .map(|k| {
                    eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)]
                        / eig.eigenvalues[k].sqrt()
                })
                .sum()
        });
        out = &out * inv_sqrt;
    }
    SubspaceBasis::new(out).map_err(|e| StepFailure(e.to_string()))
}

/// Riemannian gradient `G - V G'V` used for the stopping rule.
fn riemannian_gradient(v: &DMatrix<f64>, g: &DMatrix<f64>) -> DMatrix<f64> {
    g - v * (g.transpose() * v)
}

/// Maximize the trace objective over the Stiefel manifold starting from
/// `v0`. Returns the final iterate and the nondecreasing sequence of
/// objective values at accepted iterates (including the start).
pub fn maximize(
    obj: &TraceObjective,
    v0: &SubspaceBasis,
    opts: &OptimizerOptions,
) -> Result<(SubspaceBasis, Vec<f64>)> {
    opts.validate()?;
    if obj.p() != v0.p() || obj.s() != v0.s() {
        return Err(Error::DimensionMismatch(format!(
            "objective is for {}x{} bases but v0 is {}x{}",
            obj.p(),
            obj.s(),
            v0.p(),
            v0.s()
        )));
    }

    let mut v = v0.clone();
    let (mut f, mut g) = obj.value_and_gradient(v.matrix());
    if !f.is_finite() {
        return Err(Error::Optimization(format!("objective is not finite at start: {f}")));
    }
    let mut rg = riemannian_gradient(v.matrix(), &g);
    let mut trace = vec![f];
    let mut tau = opts.step_init;
    let mut use_bb1 = true;

    for _iter in 0..opts.max_iters {
        let rg_norm = rg.norm();
        if rg_norm <= opts.grad_tol * (1.0 + f.abs()) {
            break;
        }

        // Ascent along the Cayley curve of -G: the first-order gain per unit
        // tau is |W|^2/2 = |G|^2 - tr((V'G)^2).
        let vtg = v.matrix().transpose() * &g;
        let slope = g.norm_squared() - vtg.component_mul(&vtg.transpose()).sum();
        if slope <= 0.0 {
            break;
        }
        let neg_g = -&g;

        let mut accepted: Option<(SubspaceBasis, f64)> = None;
        let mut t = tau;
        for _ in 0..opts.max_backtracks {
            match cayley_step(&v, &neg_g, t) {
                Ok(cand) => {
                    let f_new = obj.value(cand.matrix());
                    if f_new.is_finite() && f_new >= f + opts.armijo_c * t * slope {
                        accepted = Some((cand, f_new));
                        break;
                    }
                }
                Err(_) => {} // singular system: shrink the step and retry
            }
            t *= 0.5;
        }

        let Some((v_new, f_new)) = accepted else {
            // No admissible step: the objective is flat to rounding here.
            break;
        };

        let (f_chk, g_new) = obj.value_and_gradient(v_new.matrix());
        if !f_chk.is_finite() {
            return Err(Error::Optimization("objective became non-finite".into()));
        }
        let rg_new = riemannian_gradient(v_new.matrix(), &g_new);

        // Barzilai-Borwein seed for the next step, alternating the two forms.
        let s_mat = v_new.matrix() - v.matrix();
        let y_mat = &rg - &rg_new;
        let ss = s_mat.norm_squared();
        let sy = s_mat.component_mul(&y_mat).sum().abs();
        let yy = y_mat.norm_squared();
        let bb = if use_bb1 {
            if sy > 1e-300 { ss / sy } else { t * 2.0 }
        } else if yy > 1e-300 {
            sy / yy
        } else {
            t * 2.0
        };
        use_bb1 = !use_bb1;
        tau = bb.clamp(1e-10, 1e4);

        v = v_new;
        f = f_new;
        g = g_new;
        rg = rg_new;
        trace.push(f);
    }

    Ok((v, trace))
}
