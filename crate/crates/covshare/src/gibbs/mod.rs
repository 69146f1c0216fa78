//! Posterior sampling of per-group projected covariance parameters
//! conditional on a fixed shared subspace.
//!
//! Given `V`, each group's likelihood depends on the data only through
//! `tr(S_k)` and the projected scatter `T_k = V'S_kV`, so a chain runs in
//! `s`-dimensional space regardless of `p`. One systematic scan updates
//!
//! 1. `sigma2_k ~ inverse-gamma(n_k p / 2, tr[S_k (I - U Omega U')] / 2)`,
//! 2. `O_k ~ Bingham(Omega, T_k / (2 sigma2_k))` (one column sweep),
//! 3. each `omega_i` from its univariate conditional
//!    `(1 - w)^{n/2} exp(c_i n w / 2)`, `c_i = u_i'S_k u_i / (n sigma2_k)`,
//!    by grid inverse-CDF,
//!
//! then re-sorts the spikes in decreasing order (permuting columns to match)
//! and fixes column signs so summaries are single-moded.

mod bingham;
mod fullrank;
mod region;

pub use bingham::sample_bingham_o;
pub use fullrank::{run_chain_full, stein_estimator_full};
pub(crate) use region::fold_angle;
pub use region::{
    angle_logratio, hull_peel_region, procrustes_align, AngleRatioSummary, PosteriorRegion,
};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{GroupDataset, GroupSpikeParams, SubspaceBasis};

/// Chain length, burn-in, thinning, seed, and the resolution of the grid
/// used for the spike-weight conditionals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub omega_grid: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig { n_iter: 5000, burn_in: 1000, thin: 2, seed: 0, omega_grid: 1024 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(Error::InvalidInput(format!(
                "burn_in = {} must be smaller than n_iter = {}",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidInput("thin must be >= 1".into()));
        }
        if self.omega_grid < 256 {
            return Err(Error::InvalidInput(format!(
                "omega_grid = {} is too coarse; need >= 256",
                self.omega_grid
            )));
        }
        Ok(())
    }
}

/// Ordered posterior draws for one group.
#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub draws: Vec<GroupSpikeParams>,
    pub group_id: usize,
    pub config: ChainConfig,
}

impl GibbsChain {
    /// Absolute sampler iteration at which draw `j` was recorded.
    pub fn iteration_of(&self, j: usize) -> usize {
        self.config.burn_in + j * self.config.thin
    }
}

/// Precomputed per-group quantities: the chain never touches `p`-dimensional
/// objects after construction.
struct ChainWorkspace {
    t: DMatrix<f64>,
    tr_s: f64,
    n: usize,
    p: usize,
}

impl ChainWorkspace {
    fn new(data_k: &GroupDataset, v: &SubspaceBasis) -> Result<Self> {
        if v.p() != data_k.p() {
            return Err(Error::DimensionMismatch(format!(
                "basis has p = {} but data has p = {}",
                v.p(),
                data_k.p()
            )));
        }
        if v.s() >= data_k.p() {
            return Err(Error::InvalidInput(format!(
                "chain needs s < p, got s = {}, p = {}",
                v.s(),
                data_k.p()
            )));
        }
        let sv = data_k.scatter() * v.matrix();
        let t = v.matrix().transpose() * sv;
        let t = (&t + t.transpose()).scale(0.5);
        Ok(ChainWorkspace { t, tr_s: data_k.scatter().trace(), n: data_k.n(), p: data_k.p() })
    }

    fn quad(&self, o: &DMatrix<f64>, i: usize) -> f64 {
        let oi = o.column(i);
        (&self.t * oi).dot(&oi.clone_owned())
    }
}

fn inv_gamma_draw<R: Rng>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let gamma = Gamma::new(shape, 1.0 / rate).expect("inverse-gamma parameters must be positive");
    let y: f64 = gamma.sample(rng);
    1.0 / y.max(f64::MIN_POSITIVE)
}

/// Draw the noise variance from its inverse-gamma full conditional
/// `IG(n p / 2, tr[S (I - U Omega U')] / 2)` with `U = V O`.
pub fn sample_sigma2<R: Rng>(
    rng: &mut R,
    v: &SubspaceBasis,
    o: &DMatrix<f64>,
    omega: &DVector<f64>,
    data_k: &GroupDataset,
) -> Result<f64> {
    if o.nrows() != v.s() || omega.len() != o.ncols() {
        return Err(Error::DimensionMismatch(
            "eigvec frame and omega do not match the basis".into(),
        ));
    }
    let ws = ChainWorkspace::new(data_k, v)?;
    sample_sigma2_ws(rng, &ws, o, omega)
}

fn sample_sigma2_ws<R: Rng>(
    rng: &mut R,
    ws: &ChainWorkspace,
    o: &DMatrix<f64>,
    omega: &DVector<f64>,
) -> Result<f64> {
    let mut quad_sum = 0.0;
    for i in 0..omega.len() {
        quad_sum += omega[i] * ws.quad(o, i);
    }
    let rate = 0.5 * (ws.tr_s - quad_sum);
    if !(rate > 0.0) {
        return Err(Error::DegeneratePosterior(format!(
            "inverse-gamma rate {rate:.3e} is not positive"
        )));
    }
    let shape = ws.n as f64 * ws.p as f64 / 2.0;
    Ok(inv_gamma_draw(rng, shape, rate))
}

/// Midpoint grid over `[0, 1)` with the iteration-invariant `log(1 - w)`
/// values cached; the spike-weight conditionals only vary in a linear term.
struct OmegaGrid {
    w: Vec<f64>,
    log1mw: Vec<f64>,
}

impl OmegaGrid {
    fn new(grid: usize) -> Self {
        debug_assert!(grid >= 2);
        let w: Vec<f64> = (0..grid).map(|j| (j as f64 + 0.5) / grid as f64).collect();
        let log1mw = w.iter().map(|w| (1.0 - w).ln()).collect();
        OmegaGrid { w, log1mw }
    }
}

/// Inverse-CDF draw from a density on `[0, 1)` given by `log_density` at
/// cell midpoints, with linear interpolation inside the chosen cell.
fn grid_inverse_cdf<R: Rng>(rng: &mut R, grid: usize, log_density: impl Fn(f64) -> f64) -> f64 {
    debug_assert!(grid >= 2);
    let mut logs = Vec::with_capacity(grid);
    let mut max = f64::NEG_INFINITY;
    for j in 0..grid {
        let w = (j as f64 + 0.5) / grid as f64;
        let l = log_density(w);
        logs.push(l);
        if l > max {
            max = l;
        }
    }
    draw_from_logs(rng, &logs, max)
}

fn draw_from_logs<R: Rng>(rng: &mut R, logs: &[f64], max: f64) -> f64 {
    let grid = logs.len();
    let mut cum = Vec::with_capacity(grid);
    let mut total = 0.0;
    for l in logs {
        total += (l - max).exp();
        cum.push(total);
    }
    let u = rng.random::<f64>() * total;
    let mut j = match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
        Ok(k) | Err(k) => k,
    };
    if j >= grid {
        j = grid - 1;
    }
    let prev = if j == 0 { 0.0 } else { cum[j - 1] };
    let w = cum[j] - prev;
    let frac = if w > 0.0 { ((u - prev) / w).clamp(0.0, 1.0) } else { 0.5 };
    (((j as f64) + frac) / grid as f64).min(1.0 - 1e-15)
}

fn sample_omega_on<R: Rng>(rng: &mut R, grid: &OmegaGrid, c: f64, n: usize) -> f64 {
    let nf = n as f64;
    let half_n = 0.5 * nf;
    let coef = 0.5 * c * nf;
    let mut logs = Vec::with_capacity(grid.w.len());
    let mut max = f64::NEG_INFINITY;
    for j in 0..grid.w.len() {
        let l = half_n * grid.log1mw[j] + coef * grid.w[j];
        logs.push(l);
        if l > max {
            max = l;
        }
    }
    draw_from_logs(rng, &logs, max)
}

/// Draw one spike weight from its conditional
/// `(1 - w)^{n/2} exp(c n w / 2)` on `[0, 1)`. The density peaks at
/// `max(0, (c - 1)/c)` and is sampled by grid inversion.
pub fn sample_omega<R: Rng>(rng: &mut R, c: f64, n: usize, grid: usize) -> f64 {
    assert!(n >= 1, "need n >= 1");
    assert!(c.is_finite(), "spike statistic c must be finite");
    sample_omega_on(rng, &OmegaGrid::new(grid), c, n)
}

/// Draw a spike weight shared by all groups (the diagonal entries of the
/// pooled tail block): the conditional is the product of per-group factors
/// `(1 - w)^{n_k/2} exp(c_k n_k w / 2)` with `c_k = u'S_k u / (n_k sigma2_k)`
/// for the common direction `u`.
pub fn sample_omega_pooled<R: Rng>(
    rng: &mut R,
    u_column: &DVector<f64>,
    groups: &[(&GroupDataset, f64)],
    grid: usize,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let mut factors = Vec::with_capacity(groups.len());
    for (k, (data, sigma2)) in groups.iter().enumerate() {
        if data.p() != u_column.len() {
            return Err(Error::DimensionMismatch(format!(
                "group {k} has p = {} but the direction has length {}",
                data.p(),
                u_column.len()
            )));
        }
        if !(sigma2.is_finite() && *sigma2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "group {k} has nonpositive sigma2 = {sigma2}"
            )));
        }
        let n = data.n() as f64;
        let c = (data.scatter() * u_column).dot(u_column) / (n * sigma2);
        if !c.is_finite() {
            return Err(Error::InvalidInput(format!("group {k} produced non-finite c")));
        }
        factors.push((c, n));
    }
    Ok(grid_inverse_cdf(rng, grid, |w| {
        factors
            .iter()
            .map(|(c, n)| 0.5 * n * (1.0 - w).ln() + 0.5 * c * n * w)
            .sum()
    }))
}

/// Sort spikes in decreasing order (permuting the eigenvector columns to
/// match) and make the first nonzero entry of each column positive. Neither
/// move changes the implied `Psi_k`.
pub(crate) fn canonicalize(o: &mut DMatrix<f64>, omega: &mut DVector<f64>) {
    let r = omega.len();
    let mut idx: Vec<usize> = (0..r).collect();
    idx.sort_by(|&a, &b| omega[b].partial_cmp(&omega[a]).unwrap());
    let o_old = o.clone();
    let w_old = omega.clone();
    for (new_j, &old_j) in idx.iter().enumerate() {
        o.set_column(new_j, &o_old.column(old_j));
        omega[new_j] = w_old[old_j];
    }
    for j in 0..r {
        let lead = o.column(j).iter().find(|x| **x != 0.0).copied();
        if let Some(v) = lead {
            if v < 0.0 {
                let neg = -o.column(j).into_owned();
                o.set_column(j, &neg);
            }
        }
    }
}

fn step_ws<R: Rng>(
    rng: &mut R,
    ws: &ChainWorkspace,
    grid: &OmegaGrid,
    state: &GroupSpikeParams,
) -> Result<GroupSpikeParams> {
    let r = state.r();
    let sigma2 = sample_sigma2_ws(rng, ws, state.eigvecs(), state.omega())?;

    let a = ws.t.scale(0.5 / sigma2);
    let o_new = sample_bingham_o(rng, &a, state.omega(), state.eigvecs());

    let mut omega_new = DVector::zeros(r);
    let nf = ws.n as f64;
    for i in 0..r {
        let c = ws.quad(&o_new, i) / (nf * sigma2);
        omega_new[i] = sample_omega_on(rng, grid, c, ws.n);
    }

    let mut o_canon = o_new;
    canonicalize(&mut o_canon, &mut omega_new);
    GroupSpikeParams::new(sigma2, o_canon, omega_new)
}

/// One systematic-scan Gibbs update of `(sigma2, O, omega)`.
pub fn gibbs_step<R: Rng>(
    rng: &mut R,
    state: &GroupSpikeParams,
    v: &SubspaceBasis,
    data_k: &GroupDataset,
    omega_grid: usize,
) -> Result<GroupSpikeParams> {
    if state.s() != v.s() {
        return Err(Error::DimensionMismatch(format!(
            "state has s = {} but basis has s = {}",
            state.s(),
            v.s()
        )));
    }
    let ws = ChainWorkspace::new(data_k, v)?;
    step_ws(rng, &ws, &OmegaGrid::new(omega_grid), state)
}

/// Reasonable chain start: plug-in noise variance, leading eigenvectors of
/// the projected scatter, and moment-matched spike weights.
pub fn initial_state(data_k: &GroupDataset, v: &SubspaceBasis, r: usize) -> Result<GroupSpikeParams> {
    let ws = ChainWorkspace::new(data_k, v)?;
    initial_state_ws(&ws, r)
}

fn initial_state_ws(ws: &ChainWorkspace, r: usize) -> Result<GroupSpikeParams> {
    let s = ws.t.nrows();
    if r > s {
        return Err(Error::InvalidInput(format!("rank r = {r} exceeds s = {s}")));
    }
    let resid = ws.tr_s - ws.t.trace();
    if !(resid > 0.0) {
        return Err(Error::DegeneratePosterior(
            "no residual variance outside the subspace to initialize sigma2".into(),
        ));
    }
    let sigma2 = resid / (ws.n as f64 * (ws.p - s) as f64);

    let eig = ws.t.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut o = DMatrix::zeros(s, r);
    let mut omega = DVector::zeros(r);
    for (j, &i) in idx[..r].iter().enumerate() {
        o.set_column(j, &eig.eigenvectors.column(i));
        let lam = (eig.eigenvalues[i] / (ws.n as f64 * sigma2) - 1.0).max(0.0);
        omega[j] = (lam / (lam + 1.0)).min(1.0 - 1e-12);
    }
    // Orthonormality of the eigenvector block can drift at the 1e-12 level;
    // tighten it before constructing the state.
    let o = o.qr().q();
    let mut o_canon = o;
    canonicalize(&mut o_canon, &mut omega);
    GroupSpikeParams::new(sigma2, o_canon, omega)
}

/// Run one group's chain. The generator is seeded as `seed XOR group_id`,
/// so per-group chains are reproducible regardless of scheduling or group
/// order.
pub fn run_chain(
    data_k: &GroupDataset,
    v: &SubspaceBasis,
    r: usize,
    config: &ChainConfig,
    group_id: usize,
) -> Result<GibbsChain> {
    let init = initial_state(data_k, v, r)?;
    run_chain_from(data_k, v, &init, config, group_id)
}

/// Run one group's chain from an explicit starting state.
pub fn run_chain_from(
    data_k: &GroupDataset,
    v: &SubspaceBasis,
    init: &GroupSpikeParams,
    config: &ChainConfig,
    group_id: usize,
) -> Result<GibbsChain> {
    config.validate()?;
    if init.s() != v.s() {
        return Err(Error::DimensionMismatch(format!(
            "initial state has s = {} but basis has s = {}",
            init.s(),
            v.s()
        )));
    }
    let ws = ChainWorkspace::new(data_k, v)?;
    let grid = OmegaGrid::new(config.omega_grid);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ group_id as u64);
    let mut state = init.clone();
    let kept = (config.n_iter - config.burn_in).div_ceil(config.thin);
    let mut draws = Vec::with_capacity(kept);
    for it in 0..config.n_iter {
        state = step_ws(&mut rng, &ws, &grid, &state)?;
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            draws.push(state.clone());
        }
    }
    Ok(GibbsChain { draws, group_id, config: config.clone() })
}

/// Bayes estimator under Stein's loss: the inverse of the posterior-mean
/// precision. The average precision has the form `cbar I - V Abar V'`, so
/// the inverse needs only an `s`-dimensional solve:
/// `V [ (cbar I - Abar)^{-1} - cbar^{-1} I ] V' + cbar^{-1} I`.
pub fn stein_estimator(chain: &GibbsChain, v: &SubspaceBasis) -> Result<DMatrix<f64>> {
    if chain.draws.is_empty() {
        return Err(Error::InvalidInput("chain has no draws".into()));
    }
    let s = v.s();
    if chain.draws[0].s() != s {
        return Err(Error::DimensionMismatch(format!(
            "draws have s = {} but basis has s = {s}",
            chain.draws[0].s()
        )));
    }
    let mut cbar = 0.0;
    let mut abar = DMatrix::zeros(s, s);
    for d in &chain.draws {
        let inv_s2 = 1.0 / d.sigma2();
        cbar += inv_s2;
        for i in 0..d.r() {
            let oi = d.eigvecs().column(i);
            abar += (oi * oi.transpose()).scale(inv_s2 * d.omega()[i]);
        }
    }
    let m = chain.draws.len() as f64;
    cbar /= m;
    abar /= m;

    let block = DMatrix::identity(s, s).scale(cbar) - &abar;
    let chol = Cholesky::new(block)
        .ok_or_else(|| Error::SingularModel("averaged precision is singular".into()))?;
    let block_inv = chol.inverse();
    let middle = block_inv - DMatrix::identity(s, s).scale(1.0 / cbar);
    let p = v.p();
    let out = v.matrix() * middle * v.matrix().transpose() + DMatrix::identity(p, p).scale(1.0 / cbar);
    Ok((&out + out.transpose()).scale(0.5))
}

/// One chain draw in wire form: noise variance, spike weights, and the
/// eigenvector frame flattened column-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawRecord {
    pub sigma2: f64,
    pub omega: Vec<f64>,
    pub o: Vec<f64>,
}

impl From<&GroupSpikeParams> for DrawRecord {
    fn from(p: &GroupSpikeParams) -> Self {
        DrawRecord {
            sigma2: p.sigma2(),
            omega: p.omega().iter().cloned().collect(),
            o: p.eigvecs().iter().cloned().collect(),
        }
    }
}

/// Write a chain as JSON lines, one draw per line.
pub fn write_chain_jsonl<W: Write>(chain: &GibbsChain, w: &mut W) -> std::io::Result<()> {
    for d in &chain.draws {
        let rec = DrawRecord::from(d);
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Write the per-draw angle/log-ratio summary as CSV (`iteration`, `angle`,
/// `log_ratio`). Only defined for rank-2 chains.
pub fn write_chain_summary_csv<W: Write>(chain: &GibbsChain, w: &mut W) -> Result<()> {
    writeln!(w, "iteration,angle,log_ratio").map_err(Error::from)?;
    for (j, d) in chain.draws.iter().enumerate() {
        let s = angle_logratio(d)?;
        writeln!(w, "{},{},{}", chain.iteration_of(j), s.angle, s.log_ratio)
            .map_err(Error::from)?;
    }
    Ok(())
}
