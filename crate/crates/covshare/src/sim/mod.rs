//! Synthetic data generation, loss and accuracy metrics, and asymptotic
//! benchmarks for the simulation experiments.

pub mod experiments;
pub mod report;

pub use experiments::{run_accuracy_vs_k, run_coverage, run_table1};
pub use report::{ExperimentReport, ReportCell};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{scatter_from_data, GroupDataset, SubspaceBasis};

/// How the group-level spike directions relate across groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceMode {
    /// One shared basis `V`; per-group frames `O_k` drawn uniformly.
    SharedRandom,
    /// One `(V, O, Lambda)` for every group: identical covariances.
    IdenticalCovariance,
    /// Per-group spike directions drawn uniformly from the full-dimensional
    /// Stiefel manifold; no low-dimensional shared structure.
    FullRankIndependent,
}

/// Configuration of a synthetic multi-group draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub p: usize,
    pub s: usize,
    pub r: usize,
    pub k_groups: usize,
    pub n_per_group: usize,
    /// Spike eigenvalues, strictly positive and descending.
    pub lambdas: Vec<f64>,
    /// Per-group noise variances (length `k_groups`).
    pub sigma2: Vec<f64>,
    pub subspace_mode: SubspaceMode,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1 && self.r <= self.s && self.s <= self.p) {
            return Err(Error::InvalidInput(format!(
                "need 1 <= r <= s <= p, got r={}, s={}, p={}",
                self.r, self.s, self.p
            )));
        }
        if self.k_groups == 0 || self.n_per_group == 0 {
            return Err(Error::InvalidInput("need k_groups >= 1 and n_per_group >= 1".into()));
        }
        if self.lambdas.len() != self.r {
            return Err(Error::InvalidInput(format!(
                "lambdas has length {}, expected r = {}",
                self.lambdas.len(),
                self.r
            )));
        }
        for i in 0..self.lambdas.len() {
            if !(self.lambdas[i].is_finite() && self.lambdas[i] > 0.0) {
                return Err(Error::InvalidInput("lambdas must be positive".into()));
            }
            if i + 1 < self.lambdas.len() && self.lambdas[i] < self.lambdas[i + 1] {
                return Err(Error::InvalidInput("lambdas must be descending".into()));
            }
        }
        if self.sigma2.len() != self.k_groups
            || self.sigma2.iter().any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidInput(
                "sigma2 must hold one positive value per group".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth for one generated group.
#[derive(Debug, Clone)]
pub struct GroupTruth {
    /// Spike directions `U_k` in the ambient space (`p x r`).
    pub u: DMatrix<f64>,
    /// Frame on the shared basis when one exists (`s x r`).
    pub o: Option<DMatrix<f64>>,
    pub lambdas: DVector<f64>,
    pub sigma2: f64,
    /// The assembled true covariance.
    pub sigma: DMatrix<f64>,
}

/// Ground truth for a generated multi-group draw.
#[derive(Debug, Clone)]
pub struct SimTruth {
    /// The shared basis, absent in the full-rank-independent mode.
    pub v: Option<SubspaceBasis>,
    pub groups: Vec<GroupTruth>,
}

/// Draw a basis uniformly (Haar) from the Stiefel manifold by QR of a
/// Gaussian matrix with the sign convention fixed from the R factor.
pub fn sample_uniform_stiefel<R: Rng>(rng: &mut R, p: usize, s: usize) -> SubspaceBasis {
    assert!(s >= 1 && s <= p, "need 1 <= s <= p");
    let g = DMatrix::from_fn(p, s, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..s {
        if r[(j, j)] < 0.0 {
            let neg = -q.column(j).into_owned();
            q.set_column(j, &neg);
        }
    }
    SubspaceBasis::new(q).expect("QR factor must be orthonormal")
}

/// Draw `n` rows from `N(0, sigma2 (I + U Lambda U'))` without forming the
/// covariance: `y = sqrt(sigma2) (z + U (sqrt(Lambda + I) - I) U'z)`.
pub fn gaussian_rows<R: Rng>(
    rng: &mut R,
    n: usize,
    p: usize,
    u: &DMatrix<f64>,
    lambdas: &DVector<f64>,
    sigma2: f64,
) -> DMatrix<f64> {
    let r = u.ncols();
    debug_assert_eq!(lambdas.len(), r);
    let scale = sigma2.sqrt();
    let boosts: Vec<f64> = lambdas.iter().map(|l| (l + 1.0).sqrt() - 1.0).collect();
    let mut y = DMatrix::zeros(n, p);
    for i in 0..n {
        let z = DVector::from_fn(p, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            g
        });
        let mut row = z.clone();
        if r > 0 {
            let coeff = u.transpose() * &z;
            for j in 0..r {
                row += u.column(j).scale(boosts[j] * coeff[j]);
            }
        }
        y.set_row(i, &row.scale(scale).transpose());
    }
    y
}

/// Generate group datasets and the generating truth under `config`.
pub fn generate_groups(config: &GenConfig) -> Result<(Vec<GroupDataset>, SimTruth)> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let lambdas = DVector::from_vec(config.lambdas.clone());
    let (p, s, r) = (config.p, config.s, config.r);

    let shared_v = match config.subspace_mode {
        SubspaceMode::FullRankIndependent => None,
        _ => Some(sample_uniform_stiefel(&mut rng, p, s)),
    };
    let shared_o = match config.subspace_mode {
        SubspaceMode::IdenticalCovariance => {
            Some(sample_uniform_stiefel(&mut rng, s, r).matrix().clone())
        }
        _ => None,
    };

    let mut datasets = Vec::with_capacity(config.k_groups);
    let mut groups = Vec::with_capacity(config.k_groups);
    for k in 0..config.k_groups {
        let sigma2 = config.sigma2[k];
        let (u, o) = match config.subspace_mode {
            SubspaceMode::SharedRandom => {
                let o = sample_uniform_stiefel(&mut rng, s, r).matrix().clone();
                (shared_v.as_ref().unwrap().matrix() * &o, Some(o))
            }
            SubspaceMode::IdenticalCovariance => {
                let o = shared_o.as_ref().unwrap().clone();
                (shared_v.as_ref().unwrap().matrix() * &o, Some(o))
            }
            SubspaceMode::FullRankIndependent => {
                (sample_uniform_stiefel(&mut rng, p, r).matrix().clone(), None)
            }
        };
        let y = gaussian_rows(&mut rng, config.n_per_group, p, &u, &lambdas, sigma2);
        datasets.push(scatter_from_data(&y)?);

        let mut sigma = DMatrix::identity(p, p);
        for j in 0..r {
            let uj = u.column(j);
            sigma += (uj * uj.transpose()).scale(lambdas[j]);
        }
        sigma.scale_mut(sigma2);
        groups.push(GroupTruth { u, o, lambdas: lambdas.clone(), sigma2, sigma });
    }
    Ok((datasets, SimTruth { v: shared_v, groups }))
}

/// Stein's loss `tr(Sigma^{-1} Sigma_hat) - log|Sigma^{-1} Sigma_hat| - p`.
pub fn steins_loss(sigma_true: &DMatrix<f64>, sigma_hat: &DMatrix<f64>) -> Result<f64> {
    let p = sigma_true.nrows();
    if sigma_true.ncols() != p || sigma_hat.nrows() != p || sigma_hat.ncols() != p {
        return Err(Error::DimensionMismatch(
            "Stein's loss needs two square matrices of the same size".into(),
        ));
    }
    let chol_true = Cholesky::new(sigma_true.clone())
        .ok_or_else(|| Error::InvalidInput("true covariance is not positive definite".into()))?;
    let chol_hat = Cholesky::new(sigma_hat.clone())
        .ok_or_else(|| Error::InvalidInput("estimate is not positive definite".into()))?;
    let trace = chol_true.solve(sigma_hat).trace();
    let log_det_true: f64 = 2.0 * chol_true.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_det_hat: f64 = 2.0 * chol_hat.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(trace - (log_det_hat - log_det_true) - p as f64)
}

/// Mean of per-group Stein's losses.
pub fn average_steins_loss(truths: &[DMatrix<f64>], estimates: &[DMatrix<f64>]) -> Result<f64> {
    if truths.len() != estimates.len() || truths.is_empty() {
        return Err(Error::DimensionMismatch(
            "need matching nonempty lists of truths and estimates".into(),
        ));
    }
    let mut total = 0.0;
    for (t, e) in truths.iter().zip(estimates.iter()) {
        total += steins_loss(t, e)?;
    }
    Ok(total / truths.len() as f64)
}

/// Subspace accuracy `tr(Vhat Vhat' V V') / s`, in `[0, 1]`, basis-free on
/// both sides.
pub fn subspace_accuracy(v_hat: &SubspaceBasis, v_true: &SubspaceBasis) -> Result<f64> {
    if v_hat.p() != v_true.p() || v_hat.s() != v_true.s() {
        return Err(Error::DimensionMismatch(format!(
            "bases differ in shape: {}x{} vs {}x{}",
            v_hat.p(),
            v_hat.s(),
            v_true.p(),
            v_true.s()
        )));
    }
    let m = v_hat.matrix().transpose() * v_true.matrix();
    Ok(m.norm_squared() / v_hat.s() as f64)
}

/// Asymptotic subspace accuracy of the pooled estimator with `K` groups:
/// `(1/s) sum_i (1 - g/(K (l_i - 1)^2)) / (1 + g/(K (l_i - 1)))` where
/// `g = p/n`. Terms with undetectable spikes (`l_i <= 1 + sqrt(g/K)`) clamp
/// to zero, reported through the flag.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BenchmarkValue {
    pub value: f64,
    /// True when at least one spike fell below the detectability edge and
    /// its term was clamped to zero.
    pub clamped: bool,
}

pub fn pooled_accuracy_benchmark(
    lambdas: &[f64],
    gamma_ratio: f64,
    k_groups: usize,
) -> BenchmarkValue {
    assert!(k_groups >= 1, "need at least one group");
    assert!(gamma_ratio >= 0.0, "gamma must be nonnegative");
    let g = gamma_ratio / k_groups as f64;
    let mut clamped = false;
    let mut total = 0.0;
    for &l in lambdas {
        if l <= 1.0 + g.sqrt() {
            clamped = true;
            continue;
        }
        let term = (1.0 - g / (l - 1.0).powi(2)) / (1.0 + g / (l - 1.0));
        total += term.max(0.0);
    }
    BenchmarkValue { value: total / lambdas.len() as f64, clamped }
}

/// Asymptotic location of a leading sample eigenvalue of `S/(n sigma2)`
/// when the population eigenvalue of `Sigma/sigma2` is `lambda` and
/// `p/n -> alpha`: `lambda (1 + sigma2 alpha / (lambda - 1))`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiasPrediction {
    pub value: f64,
    /// Set when the spike is below the detectability edge
    /// `1 + sqrt(alpha)`; the prediction does not apply there.
    pub undetectable: bool,
}

/// Exact form of the bias prediction. The large-spike simplification
/// `lambda + sigma2 alpha` is available via [`eigenvalue_bias_simplified`].
pub fn eigenvalue_bias_prediction(lambda: f64, sigma2: f64, alpha: f64) -> BiasPrediction {
    assert!(lambda > 1.0, "population spike must exceed the noise level");
    let undetectable = lambda <= 1.0 + alpha.sqrt();
    BiasPrediction { value: lambda * (1.0 + sigma2 * alpha / (lambda - 1.0)), undetectable }
}

/// Large-spike simplification `lambda + sigma2 alpha`.
pub fn eigenvalue_bias_simplified(lambda: f64, sigma2: f64, alpha: f64) -> BiasPrediction {
    let undetectable = lambda <= 1.0 + alpha.sqrt();
    BiasPrediction { value: lambda + sigma2 * alpha, undetectable }
}

/// SplitMix64 stream: derives independent per-replication seeds from a base
/// seed without correlation between consecutive indices.
pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
