//! Domain types and exact likelihood identities for the shared-subspace
//! spiked covariance model.
//!
//! Each of `K` groups has covariance `Sigma_k = V Psi_k V' + sigma2_k I`
//! where `V` is a `p x s` orthonormal basis common to all groups and
//! `Psi_k = O_k Lambda_k O_k'` is a rank-`r` covariance on the subspace.
//! Spike eigenvalues are stored in the bounded parameterization
//! `omega_i = lambda_i / (lambda_i + 1)`, which is what the posterior
//! conditionals are written in; `lambda` is derived on demand.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for orthonormality checks on stored bases.
pub const ORTHO_TOL: f64 = 1e-10;

/// Relative tolerance for symmetry checks on scatter matrices.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A scatter matrix may have eigenvalues as low as `-PSD_TOL * trace`
/// before it is rejected; rank-deficient scatters from n < p sit at zero
/// up to rounding.
pub const PSD_TOL: f64 = 1e-8;

/// One group's sufficient statistic: the scatter matrix `S_k = Y_k' Y_k`
/// and its Wishart degrees of freedom `n_k`.
#[derive(Debug, Clone)]
pub struct GroupDataset {
    scatter: DMatrix<f64>,
    n: usize,
    raw: Option<DMatrix<f64>>,
}

impl GroupDataset {
    /// Wrap a precomputed scatter matrix with its sample count.
    ///
    /// The matrix is symmetrized as `(S + S')/2` after validation, so all
    /// downstream code can assume exact symmetry.
    pub fn from_scatter(scatter: DMatrix<f64>, n: usize) -> Result<Self> {
        Self::build(scatter, n, None)
    }

    /// Wrap a scatter computed from `raw` while keeping the raw data around.
    pub fn from_raw(raw: DMatrix<f64>) -> Result<Self> {
        scatter_from_data(&raw)
    }

    fn build(scatter: DMatrix<f64>, n: usize, raw: Option<DMatrix<f64>>) -> Result<Self> {
        let p = scatter.nrows();
        if p < 2 || scatter.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "scatter must be square with p >= 2, got {}x{}",
                scatter.nrows(),
                scatter.ncols()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidInput("sample count n must be >= 1".into()));
        }
        if scatter.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("scatter has non-finite entries".into()));
        }
        let norm = scatter.norm();
        let asym = (&scatter - scatter.transpose()).norm();
        if asym > SYMMETRY_TOL * norm.max(1.0) {
            return Err(Error::InvalidInput(format!(
                "scatter is not symmetric: |S - S'|_F = {asym:.3e}"
            )));
        }
        let sym = (&scatter + scatter.transpose()).scale(0.5);
        let trace = sym.trace();
        let min_eig = sym
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL * trace.max(0.0) {
            return Err(Error::InvalidInput(format!(
                "scatter is not positive semidefinite: min eigenvalue {min_eig:.3e}"
            )));
        }
        if let Some(ref y) = raw {
            let resid = (y.transpose() * y - &sym).norm();
            if resid > 1e-8 * norm.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "raw data inconsistent with scatter: |Y'Y - S|_F = {resid:.3e}"
                )));
            }
        }
        Ok(GroupDataset { scatter: sym, n, raw })
    }

    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.scatter.nrows()
    }

    pub fn raw(&self) -> Option<&DMatrix<f64>> {
        self.raw.as_ref()
    }
}

/// Compute the scatter matrix `S = Y'Y` from a data matrix with rows as
/// observations, keeping the raw data attached.
pub fn scatter_from_data(raw: &DMatrix<f64>) -> Result<GroupDataset> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("data matrix has non-finite entries".into()));
    }
    let n = raw.nrows();
    let p = raw.ncols();
    if n < 1 || p < 2 {
        return Err(Error::DimensionMismatch(format!(
            "need n >= 1 rows and p >= 2 columns, got {n}x{p}"
        )));
    }
    let s = raw.transpose() * raw;
    let sym = (&s + s.transpose()).scale(0.5);
    GroupDataset::build(sym, n, Some(raw.clone()))
}

/// A `p x s` matrix with orthonormal columns representing the shared
/// subspace `VV'`. Only the column span is identified; any right rotation
/// of the stored basis denotes the same subspace.
#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    v: DMatrix<f64>,
}

impl SubspaceBasis {
    /// Validate and wrap an orthonormal basis. Requires `1 <= s <= p`.
    ///
    /// The ambient model requires `s < p`; square bases are still accepted
    /// here because simulation utilities draw full orthogonal matrices, and
    /// the fitting routines reject `s = p` where it matters.
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        let (p, s) = v.shape();
        if s == 0 || s > p {
            return Err(Error::DimensionMismatch(format!(
                "basis must be p x s with 1 <= s <= p, got {p}x{s}"
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("basis has non-finite entries".into()));
        }
        let gram_err = (v.transpose() * &v - DMatrix::identity(s, s)).norm();
        if gram_err > ORTHO_TOL {
            return Err(Error::InvalidInput(format!(
                "basis columns are not orthonormal: |V'V - I|_F = {gram_err:.3e}"
            )));
        }
        Ok(SubspaceBasis { v })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    pub fn s(&self) -> usize {
        self.v.ncols()
    }

    /// The projector `VV'` onto the subspace.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }
}

/// Per-group spiked covariance on the shared subspace: noise variance
/// `sigma2`, eigenvector frame `O_k` (`s x r`), and spike weights
/// `omega_i = lambda_i / (lambda_i + 1)` sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct GroupSpikeParams {
    sigma2: f64,
    eigvecs: DMatrix<f64>,
    omega: DVector<f64>,
}

impl GroupSpikeParams {
    pub fn new(sigma2: f64, eigvecs: DMatrix<f64>, omega: DVector<f64>) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma2 must be positive and finite, got {sigma2}"
            )));
        }
        let (s, r) = eigvecs.shape();
        if r > s {
            return Err(Error::DimensionMismatch(format!(
                "eigvecs must be s x r with r <= s, got {s}x{r}"
            )));
        }
        if omega.len() != r {
            return Err(Error::DimensionMismatch(format!(
                "omega has length {} but eigvecs has {} columns",
                omega.len(),
                r
            )));
        }
        if r > 0 {
            let gram_err = (eigvecs.transpose() * &eigvecs - DMatrix::identity(r, r)).norm();
            if gram_err > ORTHO_TOL {
                return Err(Error::InvalidInput(format!(
                    "eigvecs columns are not orthonormal: |O'O - I|_F = {gram_err:.3e}"
                )));
            }
        }
        for i in 0..omega.len() {
            let w = omega[i];
            if !(w.is_finite() && (0.0..1.0).contains(&w)) {
                return Err(Error::InvalidInput(format!(
                    "omega[{i}] = {w} is outside [0, 1)"
                )));
            }
            if i + 1 < omega.len() && omega[i] < omega[i + 1] {
                return Err(Error::InvalidInput(
                    "omega entries must be in decreasing order".into(),
                ));
            }
        }
        Ok(GroupSpikeParams { sigma2, eigvecs, omega })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn eigvecs(&self) -> &DMatrix<f64> {
        &self.eigvecs
    }

    pub fn omega(&self) -> &DVector<f64> {
        &self.omega
    }

    /// Spike eigenvalues `lambda_i = omega_i / (1 - omega_i)`.
    pub fn lambdas(&self) -> DVector<f64> {
        self.omega.map(|w| w / (1.0 - w))
    }

    /// Subspace dimension (rows of `O_k`).
    pub fn s(&self) -> usize {
        self.eigvecs.nrows()
    }

    /// Spike rank (columns of `O_k`).
    pub fn r(&self) -> usize {
        self.eigvecs.ncols()
    }

    /// The projected covariance `Psi_k = O_k Lambda_k O_k'` (an `s x s` matrix).
    pub fn psi(&self) -> DMatrix<f64> {
        let lam = self.lambdas();
        let mut psi = DMatrix::zeros(self.s(), self.s());
        for i in 0..self.r() {
            let o = self.eigvecs.column(i);
            psi += (o * o.transpose()).scale(lam[i]);
        }
        psi
    }
}

/// Block-structured projected covariance: a group-specific rank-`r` spike
/// block plus a diagonal tail `D` shared across all groups, so that
/// `Psi_k = blockdiag(O_k Lambda_k O_k', D)` on an `s`-dimensional subspace.
#[derive(Debug, Clone)]
pub struct PartitionedPsi {
    group_block: GroupSpikeParams,
    shared_diag: DVector<f64>,
}

impl PartitionedPsi {
    pub fn new(group_block: GroupSpikeParams, shared_diag: DVector<f64>) -> Result<Self> {
        if group_block.s() != group_block.r() {
            return Err(Error::DimensionMismatch(format!(
                "group block must be square on its own coordinates, got {}x{}",
                group_block.s(),
                group_block.r()
            )));
        }
        if shared_diag.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidInput(
                "shared diagonal entries must be positive and finite".into(),
            ));
        }
        Ok(PartitionedPsi { group_block, shared_diag })
    }

    pub fn group_block(&self) -> &GroupSpikeParams {
        &self.group_block
    }

    pub fn shared_diag(&self) -> &DVector<f64> {
        &self.shared_diag
    }

    /// Total subspace dimension `s = r + dim(D)`.
    pub fn s(&self) -> usize {
        self.group_block.r() + self.shared_diag.len()
    }
}

/// Dimensions and seed describing one model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub p: usize,
    pub s: usize,
    pub r: usize,
    pub k_groups: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(p: usize, s: usize, r: usize, k_groups: usize, seed: u64) -> Result<Self> {
        if !(r >= 1 && r <= s && s < p && k_groups >= 1) {
            return Err(Error::InvalidInput(format!(
                "need 1 <= r <= s < p and k_groups >= 1, got p={p} s={s} r={r} K={k_groups}"
            )));
        }
        Ok(ModelConfig { p, s, r, k_groups, seed })
    }
}

/// Assemble the full covariance `Sigma_k = sigma2 (U Lambda U' + I)` with
/// `U = V O_k`.
pub fn assemble_sigma(v: &SubspaceBasis, params: &GroupSpikeParams) -> Result<DMatrix<f64>> {
    if v.s() != params.s() {
        return Err(Error::DimensionMismatch(format!(
            "basis has s = {} but params expect s = {}",
            v.s(),
            params.s()
        )));
    }
    let p = v.p();
    let u = v.matrix() * params.eigvecs();
    let lam = params.lambdas();
    let mut sigma = DMatrix::identity(p, p);
    for i in 0..params.r() {
        let ui = u.column(i);
        sigma += (ui * ui.transpose()).scale(lam[i]);
    }
    sigma.scale_mut(params.sigma2());
    Ok(sigma)
}

/// Precision matrix via the Woodbury identity:
/// `Sigma_k^{-1} = (1/sigma2) (I - U Omega U')`.
pub fn precision_woodbury(params: &GroupSpikeParams, v: &SubspaceBasis) -> Result<DMatrix<f64>> {
    if v.s() != params.s() {
        return Err(Error::DimensionMismatch(format!(
            "basis has s = {} but params expect s = {}",
            v.s(),
            params.s()
        )));
    }
    for i in 0..params.r() {
        if 1.0 - params.omega()[i] <= 0.0 {
            return Err(Error::SingularModel(format!(
                "omega[{i}] = {} corresponds to an infinite spike",
                params.omega()[i]
            )));
        }
    }
    let p = v.p();
    let u = v.matrix() * params.eigvecs();
    let mut prec = DMatrix::identity(p, p);
    for i in 0..params.r() {
        let ui = u.column(i);
        prec -= (ui * ui.transpose()).scale(params.omega()[i]);
    }
    prec.scale_mut(1.0 / params.sigma2());
    Ok(prec)
}

/// Log-determinant via Sylvester's theorem:
/// `log|Sigma_k| = p log(sigma2) + sum_i log(lambda_i + 1)`,
/// computed as `-log(1 - omega_i)` for stability near the boundary.
pub fn log_det_sigma(params: &GroupSpikeParams, p: usize) -> f64 {
    let mut ld = p as f64 * params.sigma2().ln();
    for i in 0..params.r() {
        ld -= (1.0 - params.omega()[i]).ln();
    }
    ld
}

/// Wishart log-likelihood `-(n/2) log|Sigma| - tr(Sigma^{-1} S)/2`, with the
/// additive normalization constant dropped. The trace term uses the spiked
/// structure so no `p x p` inverse is ever formed.
pub fn wishart_loglik(
    params: &GroupSpikeParams,
    v: &SubspaceBasis,
    data: &GroupDataset,
) -> Result<f64> {
    if v.p() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "basis has p = {} but data has p = {}",
            v.p(),
            data.p()
        )));
    }
    if v.s() != params.s() {
        return Err(Error::DimensionMismatch(format!(
            "basis has s = {} but params expect s = {}",
            v.s(),
            params.s()
        )));
    }
    let s_mat = data.scatter();
    let u = v.matrix() * params.eigvecs();
    let mut trace_term = s_mat.trace();
    for i in 0..params.r() {
        let ui = u.column(i);
        trace_term -= params.omega()[i] * (s_mat * ui).dot(&ui.clone_owned());
    }
    trace_term /= params.sigma2();
    let n = data.n() as f64;
    Ok(-0.5 * n * log_det_sigma(params, v.p()) - 0.5 * trace_term)
}

/// Convert spike eigenvalues `lambda >= 0` to weights `omega = lambda/(lambda+1)`.
pub fn lambda_to_omega(lambda: &DVector<f64>) -> Result<DVector<f64>> {
    for (i, l) in lambda.iter().enumerate() {
        if !(l.is_finite() && *l >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda[{i}] = {l} must be finite and nonnegative"
            )));
        }
    }
    Ok(lambda.map(|l| l / (l + 1.0)))
}

/// Convert weights `omega in [0, 1)` to spike eigenvalues `lambda = omega/(1-omega)`.
pub fn omega_to_lambda(omega: &DVector<f64>) -> Result<DVector<f64>> {
    for (i, w) in omega.iter().enumerate() {
        if !(w.is_finite() && (0.0..1.0).contains(w)) {
            return Err(Error::InvalidInput(format!(
                "omega[{i}] = {w} is outside [0, 1)"
            )));
        }
    }
    Ok(omega.map(|w| w / (1.0 - w)))
}
