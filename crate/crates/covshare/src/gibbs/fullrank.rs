//! Posterior sampling for the spiked model on the full feature space
//! (no shared-subspace reduction): the frame `U` lives on the big Stiefel
//! manifold `V_{p,r}`. This is the independent per-group estimator, and the
//! pooled single-covariance estimator, in the simulation experiments.
//!
//! The Bingham column conditionals are sampled exactly with an angular
//! central Gaussian envelope applied in the low-rank eigenbasis of the
//! scatter: with `S = Q D Q'` of rank `m`, every dense object the update
//! touches lives in the `(m + r - 1)`-dimensional span of `[Q, U_rest]`,
//! so one column update costs `O(p m)` rather than `O(p^3)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{GroupDataset, GroupSpikeParams};

use super::{canonicalize, sample_omega_on, ChainConfig, GibbsChain, OmegaGrid};

/// Spectral form of one group's scatter: `S = Q diag(d) Q'` keeping only
/// eigenvalues above a relative floor.
pub(crate) struct FullWorkspace {
    pub(crate) q: DMatrix<f64>,
    pub(crate) d: DVector<f64>,
    tr_s: f64,
    n: usize,
    p: usize,
}

impl FullWorkspace {
    pub(crate) fn new(data_k: &GroupDataset) -> Result<Self> {
        let p = data_k.p();
        let eig = data_k.scatter().clone().symmetric_eigen();
        let max_eig = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if max_eig <= 0.0 {
            return Err(Error::DegeneratePosterior(
                "scatter is zero; the spiked posterior is undefined".into(),
            ));
        }
        let mut idx: Vec<usize> = (0..p).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let kept: Vec<usize> = idx
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > 1e-12 * max_eig)
            .collect();
        let m = kept.len();
        let mut q = DMatrix::zeros(p, m);
        let mut d = DVector::zeros(m);
        for (j, &i) in kept.iter().enumerate() {
            q.set_column(j, &eig.eigenvectors.column(i));
            d[j] = eig.eigenvalues[i];
        }
        Ok(FullWorkspace { q, d, tr_s: data_k.scatter().trace(), n: data_k.n(), p })
    }

    /// `u'Su` through the spectral form.
    pub(crate) fn quad(&self, u: &DVector<f64>) -> f64 {
        let coeff = self.q.transpose() * u;
        (0..self.d.len()).map(|j| self.d[j] * coeff[j] * coeff[j]).sum()
    }
}

/// Draw one frame column from its exact conditional: the vector Bingham
/// density `exp(kappa z'Sz)` on the unit sphere orthogonal to the other
/// columns `rest` (`p x (r-1)`, orthonormal).
pub(crate) fn sample_column<R: Rng>(
    rng: &mut R,
    ws: &FullWorkspace,
    kappa: f64,
    rest: &DMatrix<f64>,
) -> DVector<f64> {
    let p = ws.p;
    let m_s = ws.d.len();
    let r_rest = rest.ncols();
    let d_sub = (p - r_rest) as f64;

    if kappa * ws.d[0] < 1e-12 {
        // Flat density: uniform on the constrained sphere.
        loop {
            let g = DVector::from_fn(p, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z
            });
            let g = &g - rest * (rest.transpose() * &g);
            let norm = g.norm();
            if norm > 1e-12 {
                return g / norm;
            }
        }
    }

    // Orthonormal basis W = [Q, Qf] covering range(S) and the constraint
    // columns; everything dense below lives in W-coordinates.
    let mut extra: Vec<DVector<f64>> = Vec::with_capacity(r_rest);
    for j in 0..r_rest {
        let f = rest.column(j).into_owned();
        let mut resid = &f - &ws.q * (ws.q.transpose() * &f);
        for e in &extra {
            resid -= e.scale(e.dot(&resid));
        }
        let norm = resid.norm();
        if norm > 1e-10 {
            resid /= norm;
            extra.push(resid);
        }
    }
    let m = m_s + extra.len();
    let mut w = DMatrix::zeros(p, m);
    w.columns_mut(0, m_s).copy_from(&ws.q);
    for (j, e) in extra.iter().enumerate() {
        w.set_column(m_s + j, e);
    }

    // M in W-coordinates is diag(kappa d, 0); project out the constraint
    // directions phi = W'rest to get K = (I - phi phi')M_W(I - phi phi').
    let phi = w.transpose() * rest;
    let m_diag = DVector::from_fn(m, |j, _| if j < m_s { kappa * ws.d[j] } else { 0.0 });
    let m_phi = DMatrix::from_fn(m, r_rest, |i, j| m_diag[i] * phi[(i, j)]);
    let phi_m_phi = phi.transpose() * &m_phi;
    let mut k = DMatrix::from_diagonal(&m_diag);
    k -= &m_phi * phi.transpose();
    k -= &phi * m_phi.transpose();
    k += &phi * &phi_m_phi * phi.transpose();
    let k = (&k + k.transpose()).scale(0.5);

    // Exact spectrum of the projected operator in span(W): the constraint
    // directions carry exact zeros, everything outside span(W) is flat.
    let eig = k.symmetric_eigen();
    let lam_sub = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let mut spec: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    spec.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Drop the r_rest structural zeros belonging to the constrained-out
    // directions; the remainder is the in-span subspace spectrum.
    let active: Vec<f64> = spec[r_rest..].to_vec();

    // Envelope tuning: b solves sum 1/(b + 2 a_i) = 1 over the subspace
    // spectrum a_i = lam_sub - spec_i (flat directions sit at lam_sub).
    let flat = d_sub - active.len() as f64;
    let g = |b: f64| {
        active.iter().map(|&s| 1.0 / (b + 2.0 * (lam_sub - s).max(0.0))).sum::<f64>()
            + flat.max(0.0) / (b + 2.0 * lam_sub)
    };
    let (mut lo, mut hi) = (1e-8, d_sub);
    if g(lo) < 1.0 {
        lo = hi;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    let alpha = 1.0 + 2.0 * lam_sub / b;
    let beta = 2.0 / b;

    // H = alpha I - beta PMP: in the K eigenbasis the W-block has
    // eigenvalues alpha - beta kappa_i >= 1, so the envelope Gaussian is
    // well defined; its inverse and square root are diagonal there.
    let h_eigs: Vec<f64> = eig.eigenvalues.iter().map(|&kv| alpha - beta * kv).collect();
    let e_basis = &eig.eigenvectors;

    // Conditioning x ~ N(0, H^{-1}) on rest'x = 0 needs Sigma rest once.
    let phi_e = e_basis.transpose() * &phi;
    let mut sigma_phi_e = phi_e.clone();
    for i in 0..m {
        for j in 0..r_rest {
            sigma_phi_e[(i, j)] /= h_eigs[i];
        }
    }
    let sigma_phi = e_basis * &sigma_phi_e;
    let gram = phi_e.transpose() * &sigma_phi_e;
    let gram_inv = gram
        .try_inverse()
        .expect("constraint Gram matrix must be invertible");

    let log_m_const = -(d_sub - b) / 2.0 + (d_sub / 2.0) * (d_sub / b).ln();
    let sqrt_alpha = alpha.sqrt();
    let h_inv_sqrt: Vec<f64> = h_eigs.iter().map(|&h| 1.0 / h.sqrt()).collect();

    if std::env::var("COVSHARE_DEBUG_ACG").is_ok() {
        eprintln!("acg: d_sub={d_sub} b={b:.4} alpha={alpha:.1} lam_sub={lam_sub:.1} logM={log_m_const:.1}");
    }
    let mut attempts = 0u32;
    for _ in 0..10_000 {
        attempts += 1;
        // x = W E diag(h^{-1/2}) eta + (I - WW')zeta / sqrt(alpha).
        let eta = DVector::from_fn(m, |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * h_inv_sqrt[i]
        });
        let y = e_basis * eta;
        let zeta = DVector::from_fn(p, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        let mut x = &w * &y + (&zeta - &w * (w.transpose() * &zeta)).scale(1.0 / sqrt_alpha);
        if r_rest > 0 {
            let fx = rest.transpose() * &x;
            x -= &w * (&sigma_phi * (&gram_inv * fx));
        }
        let norm = x.norm();
        if norm <= 1e-12 {
            continue;
        }
        let z = x / norm;
        let t = (lam_sub - kappa * ws.quad(&z)).max(0.0);
        let log_acc = -t + (d_sub / 2.0) * (1.0 + 2.0 * t / b).ln() - log_m_const;
        if rng.random::<f64>().ln() < log_acc {
            if std::env::var("COVSHARE_DEBUG_ACG").is_ok() {
                eprintln!("acg: accepted after {attempts} attempts, t={t:.2}");
            }
            return z;
        }
    }
    // Unreachable in practice: fall back to the constrained top direction.
    let top = ws.q.column(0).into_owned();
    let fallback = &top - rest * (rest.transpose() * &top);
    let norm = fallback.norm();
    if norm > 1e-12 {
        fallback / norm
    } else {
        let g = DVector::from_fn(p, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z
        });
        let g = &g - rest * (rest.transpose() * &g);
        let n2 = g.norm();
        g / n2
    }
}

fn full_step<R: Rng>(
    rng: &mut R,
    ws: &FullWorkspace,
    grid: &OmegaGrid,
    state: &GroupSpikeParams,
) -> Result<GroupSpikeParams> {
    let r = state.r();
    let nf = ws.n as f64;

    // sigma2 | U, omega.
    let mut quad_sum = 0.0;
    for i in 0..r {
        quad_sum += state.omega()[i] * ws.quad(&state.eigvecs().column(i).into_owned());
    }
    let rate = 0.5 * (ws.tr_s - quad_sum);
    if !(rate > 0.0) {
        return Err(Error::DegeneratePosterior(format!(
            "inverse-gamma rate {rate:.3e} is not positive"
        )));
    }
    let shape = nf * ws.p as f64 / 2.0;
    let gamma = rand_distr::Gamma::new(shape, 1.0 / rate).expect("valid gamma");
    let draw: f64 = gamma.sample(rng);
    let sigma2 = 1.0 / draw.max(f64::MIN_POSITIVE);

    // U | sigma2, omega: one sweep of exact column conditionals.
    let mut u = state.eigvecs().clone();
    for i in 0..r {
        let rest = DMatrix::from_fn(ws.p, r - 1, |row, col| {
            let src = if col < i { col } else { col + 1 };
            u[(row, src)]
        });
        let kappa = state.omega()[i] / (2.0 * sigma2);
        let z = sample_column(rng, ws, kappa, &rest);
        u.set_column(i, &z);
    }

    // omega | sigma2, U.
    let mut omega = DVector::zeros(r);
    for i in 0..r {
        let c = ws.quad(&u.column(i).into_owned()) / (nf * sigma2);
        omega[i] = sample_omega_on(rng, grid, c, ws.n);
    }

    canonicalize(&mut u, &mut omega);
    GroupSpikeParams::new(sigma2, u, omega)
}

/// Chain start for the full-space model: leading scatter eigenvectors with
/// moment-matched weights and the residual-variance plug-in.
fn full_initial_state(ws: &FullWorkspace, r: usize) -> Result<GroupSpikeParams> {
    if r > ws.d.len() {
        return Err(Error::InvalidInput(format!(
            "rank r = {r} exceeds the scatter rank {}",
            ws.d.len()
        )));
    }
    if r >= ws.p {
        return Err(Error::InvalidInput(format!(
            "rank r = {r} must be smaller than p = {}",
            ws.p
        )));
    }
    let top_sum: f64 = (0..r).map(|j| ws.d[j]).sum();
    let resid = ws.tr_s - top_sum;
    if !(resid > 0.0) {
        return Err(Error::DegeneratePosterior(
            "no residual variance to initialize sigma2".into(),
        ));
    }
    let sigma2 = resid / (ws.n as f64 * (ws.p - r) as f64);
    let mut u = DMatrix::zeros(ws.p, r);
    let mut omega = DVector::zeros(r);
    for j in 0..r {
        u.set_column(j, &ws.q.column(j));
        let lam = (ws.d[j] / (ws.n as f64 * sigma2) - 1.0).max(0.0);
        omega[j] = (lam / (lam + 1.0)).min(1.0 - 1e-12);
    }
    canonicalize(&mut u, &mut omega);
    GroupSpikeParams::new(sigma2, u, omega)
}

/// Run the spiked-model chain on the full feature space (`U` on `V_{p,r}`,
/// no shared subspace). Draw frames have `s = p`.
pub fn run_chain_full(
    data_k: &GroupDataset,
    r: usize,
    config: &ChainConfig,
    group_id: usize,
) -> Result<GibbsChain> {
    config.validate()?;
    let ws = FullWorkspace::new(data_k)?;
    let grid = OmegaGrid::new(config.omega_grid);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed ^ group_id as u64);
    let mut state = full_initial_state(&ws, r)?;
    let kept = (config.n_iter - config.burn_in).div_ceil(config.thin);
    let mut draws = Vec::with_capacity(kept);
    for it in 0..config.n_iter {
        state = full_step(&mut rng, &ws, &grid, &state)?;
        if it >= config.burn_in && (it - config.burn_in) % config.thin == 0 {
            draws.push(state.clone());
        }
    }
    Ok(GibbsChain { draws, group_id, config: config.clone() })
}

/// Stein-loss Bayes estimate from a full-space chain: the inverse of the
/// averaged precision `mean[(1/sigma2)(I - U Omega U')]`.
pub fn stein_estimator_full(chain: &GibbsChain) -> Result<DMatrix<f64>> {
    if chain.draws.is_empty() {
        return Err(Error::InvalidInput("chain has no draws".into()));
    }
    let p = chain.draws[0].s();
    let mut cbar = 0.0;
    let mut bbar: DMatrix<f64> = DMatrix::zeros(p, p);
    for d in &chain.draws {
        let inv_s2 = 1.0 / d.sigma2();
        cbar += inv_s2;
        for i in 0..d.r() {
            let ui = d.eigvecs().column(i);
            bbar += (ui * ui.transpose()).scale(inv_s2 * d.omega()[i]);
        }
    }
    let m = chain.draws.len() as f64;
    cbar /= m;
    bbar /= m;
    let prec = DMatrix::identity(p, p).scale(cbar) - bbar;
    let chol = Cholesky::new(prec)
        .ok_or_else(|| Error::SingularModel("averaged precision is singular".into()))?;
    let out = chol.inverse();
    Ok((&out + out.transpose()).scale(0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::bingham::sample_vector_bingham;
    use crate::model::scatter_from_data;

    fn gaussian_matrix(rng: &mut impl Rng, nr: usize, nc: usize) -> DMatrix<f64> {
        DMatrix::from_fn(nr, nc, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn low_rank_column_sampler_matches_dense_path() {
        // Same target two ways: the low-rank constrained update vs the
        // generic dense sampler on an explicit null-space basis.
        let mut rng = ChaCha20Rng::seed_from_u64(700);
        let p = 6;
        let n = 4; // rank-deficient scatter
        let y = gaussian_matrix(&mut rng, n, p).scale(1.4);
        let data = scatter_from_data(&y).unwrap();
        let ws = FullWorkspace::new(&data).unwrap();

        let f = {
            let g = gaussian_matrix(&mut rng, p, 1);
            let norm = g.norm();
            g / norm
        };
        let kappa = 0.35;

        let draws = 30_000;
        let mut mean_fast: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut stats_fast = Vec::with_capacity(draws);
        for _ in 0..draws {
            let z = sample_column(&mut rng, &ws, kappa, &f);
            assert!((z.norm() - 1.0).abs() < 1e-10);
            assert!(f.dot(&z).abs() < 1e-10, "constraint violated");
            stats_fast.push(ws.quad(&z));
            mean_fast += &z * z.transpose();
        }
        mean_fast /= draws as f64;

        // Dense path: null basis N of f, then the validated generic sampler.
        let mut base = DMatrix::zeros(p, p);
        base.column_mut(0).copy_from(&f);
        for j in 1..p {
            let g = gaussian_matrix(&mut rng, p, 1);
            base.set_column(j, &g.column(0));
        }
        let nq = base.qr().q().columns(1, p - 1).into_owned();
        let m_small = (nq.transpose() * data.scatter() * &nq).scale(kappa);
        let m_small = (&m_small + m_small.transpose()).scale(0.5);
        let mut mean_dense: DMatrix<f64> = DMatrix::zeros(p, p);
        let mut stats_dense = Vec::with_capacity(draws);
        for _ in 0..draws {
            let zn = sample_vector_bingham(&mut rng, &m_small);
            let z = &nq * zn;
            stats_dense.push(ws.quad(&z));
            mean_dense += &z * z.transpose();
        }
        mean_dense /= draws as f64;

        let max_gap = (&mean_fast - &mean_dense).iter().map(|x| x.abs()).fold(0.0_f64, f64::max);
        assert!(max_gap < 0.02, "projector moments differ by {max_gap}");

        stats_fast.sort_by(|a, b| a.partial_cmp(b).unwrap());
        stats_dense.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Two-sample KS on the quadratic-form statistic.
        let mut ks = 0.0_f64;
        let (mut i, mut j) = (0usize, 0usize);
        while i < draws && j < draws {
            if stats_fast[i] <= stats_dense[j] {
                i += 1;
            } else {
                j += 1;
            }
            ks = ks.max((i as f64 - j as f64).abs() / draws as f64);
        }
        assert!(ks < 0.02, "two-sample KS = {ks}");
    }

    #[test]
    fn full_chain_is_deterministic_and_orthonormal() {
        let mut rng = ChaCha20Rng::seed_from_u64(701);
        let p = 12;
        let y = gaussian_matrix(&mut rng, 20, p);
        let data = scatter_from_data(&y).unwrap();
        let config = ChainConfig { n_iter: 150, burn_in: 50, thin: 2, seed: 5, omega_grid: 512 };
        let a = run_chain_full(&data, 2, &config, 3).unwrap();
        let b = run_chain_full(&data, 2, &config, 3).unwrap();
        assert_eq!(a.draws.len(), 50);
        for (x, y) in a.draws.iter().zip(b.draws.iter()) {
            assert_eq!(x.sigma2(), y.sigma2());
            assert_eq!(x.eigvecs(), y.eigvecs());
        }
        for d in &a.draws {
            assert_eq!(d.s(), p);
            let gram =
                (d.eigvecs().transpose() * d.eigvecs() - DMatrix::identity(2, 2)).norm();
            assert!(gram < 1e-9);
        }
    }

    #[test]
    fn full_chain_recovers_strong_spike() {
        let mut rng = ChaCha20Rng::seed_from_u64(702);
        let p = 30;
        let n = 100;
        let lam: f64 = 50.0;
        let u = gaussian_matrix(&mut rng, p, 1).qr().q();
        let mut y = gaussian_matrix(&mut rng, n, p);
        for i in 0..n {
            let row = y.row(i).transpose();
            let coeff = (u.transpose() * &row)[(0, 0)];
            let new_row = &row + u.column(0).scale(coeff * ((lam + 1.0).sqrt() - 1.0));
            y.set_row(i, &new_row.transpose());
        }
        let data = scatter_from_data(&y).unwrap();
        let config = ChainConfig { n_iter: 1500, burn_in: 500, thin: 1, seed: 6, omega_grid: 2048 };
        let chain = run_chain_full(&data, 1, &config, 0).unwrap();
        let mean_w: f64 =
            chain.draws.iter().map(|d| d.omega()[0]).sum::<f64>() / chain.draws.len() as f64;
        let target = lam / (lam + 1.0);
        assert!((mean_w - target).abs() < 0.05, "omega mean {mean_w} vs {target}");
        // The posterior frame concentrates near the planted direction.
        let mean_align: f64 = chain
            .draws
            .iter()
            .map(|d| u.column(0).dot(&d.eigvecs().column(0).into_owned()).powi(2))
            .sum::<f64>()
            / chain.draws.len() as f64;
        assert!(mean_align > 0.8, "alignment {mean_align}");
    }

    #[test]
    fn full_stein_estimator_beats_conditioned_frame_in_structure() {
        // Degenerate chain: the estimator reduces to assemble_sigma with
        // V = I and O = U.
        let mut rng = ChaCha20Rng::seed_from_u64(703);
        let p = 5;
        let u = gaussian_matrix(&mut rng, p, 2).qr().q();
        let mut omega = DVector::from_vec(vec![0.8, 0.4]);
        let mut u2 = u;
        canonicalize(&mut u2, &mut omega);
        let params = GroupSpikeParams::new(1.3, u2, omega).unwrap();
        let chain = GibbsChain {
            draws: vec![params.clone(); 3],
            group_id: 0,
            config: ChainConfig::default(),
        };
        let est = stein_estimator_full(&chain).unwrap();
        let v_eye = crate::model::SubspaceBasis::new(DMatrix::identity(p, p)).unwrap();
        let truth = crate::model::assemble_sigma(&v_eye, &params).unwrap();
        assert!((est - truth).norm() < 1e-8);
    }
}

#[cfg(test)]
mod scratch_probe {
    use super::*;
    use crate::model::scatter_from_data;

    #[test]
    fn probe_isolated_column_sampler_high_concentration() {
        let mut rng = ChaCha20Rng::seed_from_u64(777);
        let p = 200;
        let n = 50;
        let g = DMatrix::from_fn(p, 2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let u_true = g.qr().q();
        let mut y = DMatrix::from_fn(n, p, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        for i in 0..n {
            let row = y.row(i).transpose();
            let coeff = u_true.transpose() * &row;
            let boost = u_true.column(0).scale(coeff[0] * (251.0_f64.sqrt() - 1.0))
                + u_true.column(1).scale(coeff[1] * (26.0_f64.sqrt() - 1.0));
            let new_row = &row + boost;
            y.set_row(i, &new_row.transpose());
        }
        let data = scatter_from_data(&y).unwrap();
        let ws = FullWorkspace::new(&data).unwrap();
        let kappa = 0.5_f64;
        let top = ws.q.column(0).into_owned();
        // large-concentration limit: E[1 - <z,top>^2] = sum_j 1/(2 kappa (d1 - dj))
        let theory: f64 = (1..ws.d.len())
            .map(|j| 1.0 / (2.0 * kappa * (ws.d[0] - ws.d[j])))
            .sum::<f64>()
            + (p - ws.d.len()) as f64 / (2.0 * kappa * ws.d[0]);
        let rest = DMatrix::zeros(p, 0);
        let draws = 20_000;
        let mut total = 0.0;
        let mut bad = 0;
        let mut worst = 0.0_f64;
        for _ in 0..draws {
            let z = sample_column(&mut rng, &ws, kappa, &rest);
            let miss = 1.0 - top.dot(&z).powi(2);
            total += miss;
            if miss > 0.05 {
                bad += 1;
            }
            worst = worst.max(miss);
        }
        eprintln!(
            "isolated column: mean miss = {:.5} (theory {:.5}), draws with miss>0.05: {bad}/{draws}, worst {:.3}",
            total / draws as f64,
            theory,
            worst
        );
    }
}
