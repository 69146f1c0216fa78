//! Rank selection by optimal singular-value hard thresholding.
//!
//! Uses the unknown-noise variant: the cutoff is `omega(beta)` times the
//! median singular value of the data matrix, with
//! `omega(beta) ~ 0.56 b^3 - 0.95 b^2 + 1.82 b + 1.43` and
//! `beta = min(n, p) / max(n, p)`. A group's spike rank comes from its own
//! singular values; the shared dimension comes from the groups' data
//! concatenated row-wise, whose Gram matrix is the pooled scatter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GroupDataset;

/// Outcome of a threshold-based rank estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankEstimate {
    /// Number of singular values strictly above the threshold. A value
    /// exactly at the threshold does not count.
    pub rank: usize,
    pub threshold: f64,
    pub median_sv: f64,
    /// Aspect ratio `min(n, p) / max(n, p)`.
    pub beta: f64,
}

/// Cubic approximation to the optimal hard-threshold coefficient.
fn omega_coefficient(beta: f64) -> f64 {
    0.56 * beta.powi(3) - 0.95 * beta.powi(2) + 1.82 * beta + 1.43
}

fn median(sorted_desc: &[f64]) -> f64 {
    let m = sorted_desc.len();
    if m % 2 == 1 {
        sorted_desc[m / 2]
    } else {
        0.5 * (sorted_desc[m / 2 - 1] + sorted_desc[m / 2])
    }
}

/// Apply the hard threshold to a descending sequence of singular values of
/// an `n x p` data matrix.
pub fn gavish_donoho_rank(singular_values: &[f64], n: usize, p: usize) -> Result<RankEstimate> {
    if singular_values.is_empty() {
        return Err(Error::InvalidInput("no singular values supplied".into()));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput("need n >= 1 and p >= 1".into()));
    }
    for (i, sv) in singular_values.iter().enumerate() {
        if !(sv.is_finite() && *sv >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "singular value {i} is {sv}; must be finite and nonnegative"
            )));
        }
        if i + 1 < singular_values.len() && singular_values[i] < singular_values[i + 1] {
            return Err(Error::InvalidInput(
                "singular values must be in decreasing order".into(),
            ));
        }
    }
    if singular_values[0] <= 0.0 {
        return Err(Error::InvalidInput(
            "need at least one positive singular value".into(),
        ));
    }
    let beta = n.min(p) as f64 / n.max(p) as f64;
    let median_sv = median(singular_values);
    let threshold = omega_coefficient(beta) * median_sv;
    let rank = singular_values.iter().filter(|sv| **sv > threshold).count();
    Ok(RankEstimate { rank, threshold, median_sv, beta })
}

/// The `min(n, p)` singular values of the data matrix, recovered as square
/// roots of the leading scatter eigenvalues.
fn singular_values_from_scatter(data: &GroupDataset) -> Vec<f64> {
    let mut eigs: Vec<f64> = data
        .scatter()
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .collect();
    eigs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eigs.truncate(data.n().min(data.p()));
    eigs.iter().map(|e| e.max(0.0).sqrt()).collect()
}

/// Estimate one group's spike rank from its scatter spectrum.
pub fn estimate_group_rank(data_k: &GroupDataset) -> Result<RankEstimate> {
    let svs = singular_values_from_scatter(data_k);
    gavish_donoho_rank(&svs, data_k.n(), data_k.p())
}

/// Estimate the shared subspace dimension from all groups: the row-wise
/// concatenation of the data matrices has Gram matrix `sum_k S_k`, so its
/// singular values are the square roots of the pooled scatter eigenvalues.
pub fn estimate_shared_dimension(data: &[GroupDataset]) -> Result<RankEstimate> {
    if data.is_empty() {
        return Err(Error::InvalidInput("need at least one group".into()));
    }
    let p = data[0].p();
    let mut pooled = data[0].scatter().clone();
    let mut n_total = data[0].n();
    for (k, d) in data.iter().enumerate().skip(1) {
        if d.p() != p {
            return Err(Error::DimensionMismatch(format!(
                "group {k} has p = {} but group 0 has p = {p}",
                d.p()
            )));
        }
        pooled += d.scatter();
        n_total += d.n();
    }
    let pooled_data = GroupDataset::from_scatter(pooled, n_total)?;
    let svs = singular_values_from_scatter(&pooled_data);
    gavish_donoho_rank(&svs, n_total, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;

    use crate::model::scatter_from_data;

    fn gaussian_matrix(rng: &mut impl Rng, nr: usize, nc: usize) -> DMatrix<f64> {
        DMatrix::from_fn(nr, nc, |_, _| rng.sample(StandardNormal))
    }

    fn spiked_data(
        rng: &mut impl Rng,
        n: usize,
        p: usize,
        lambdas: &[f64],
    ) -> GroupDataset {
        let u = gaussian_matrix(rng, p, lambdas.len()).qr().q();
        let mut y = gaussian_matrix(rng, n, p);
        for i in 0..n {
            let row = y.row(i).transpose();
            let coeff = u.transpose() * &row;
            let mut boost = DVector::zeros(p);
            for (j, lam) in lambdas.iter().enumerate() {
                boost += u.column(j).scale(coeff[j] * ((lam + 1.0).sqrt() - 1.0));
            }
            let new_row = &row + boost;
            y.set_row(i, &new_row.transpose());
        }
        scatter_from_data(&y).unwrap()
    }

    #[test]
    fn omega_coefficient_square_case() {
        assert_relative_eq!(omega_coefficient(1.0), 2.86, epsilon = 1e-12);
    }

    #[test]
    fn threshold_tie_is_excluded() {
        // Values strictly above count, a value exactly at the threshold
        // does not. omega(1) * median = 2.86 * 1 with median forced to 1.
        let svs = [2.86, 1.01, 1.0, 0.99];
        let est = gavish_donoho_rank(&svs, 4, 4).unwrap();
        assert_relative_eq!(est.threshold, 2.86 * median(&svs), epsilon = 1e-12);
        assert_eq!(est.rank, svs.iter().filter(|s| **s > est.threshold).count());

        let exactly_at = [2.0, 2.0, 2.0, 2.0];
        let est = gavish_donoho_rank(&exactly_at, 4, 4).unwrap();
        assert_eq!(est.rank, 0, "value at threshold must not count");
    }

    #[test]
    fn rank_is_scale_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(90);
        let data = spiked_data(&mut rng, 40, 60, &[50.0, 10.0]);
        let est = estimate_group_rank(&data).unwrap();
        let scaled = GroupDataset::from_scatter(data.scatter().scale(7.3), data.n()).unwrap();
        let est_scaled = estimate_group_rank(&scaled).unwrap();
        assert_eq!(est.rank, est_scaled.rank);
        assert_relative_eq!(
            est_scaled.threshold,
            est.threshold * 7.3_f64.sqrt(),
            max_relative = 1e-10
        );
    }

    #[test]
    fn zero_matrix_is_an_error() {
        let data = GroupDataset::from_scatter(DMatrix::zeros(5, 5), 3).unwrap();
        assert!(estimate_group_rank(&data).is_err());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(gavish_donoho_rank(&[], 4, 4).is_err());
    }

    #[test]
    fn pure_noise_mostly_rank_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(91);
        let mut zeros = 0;
        let reps = 40;
        for _ in 0..reps {
            let data = scatter_from_data(&gaussian_matrix(&mut rng, 60, 60)).unwrap();
            if estimate_group_rank(&data).unwrap().rank == 0 {
                zeros += 1;
            }
        }
        assert!(zeros * 100 >= reps * 90, "rank 0 in {zeros}/{reps} noise replicates");
    }

    #[test]
    fn planted_rank_two_is_recovered() {
        let mut rng = ChaCha20Rng::seed_from_u64(92);
        let mut hits = 0;
        let reps = 20;
        for _ in 0..reps {
            let data = spiked_data(&mut rng, 50, 200, &[250.0, 25.0]);
            if estimate_group_rank(&data).unwrap().rank == 2 {
                hits += 1;
            }
        }
        assert!(hits * 100 >= reps * 90, "recovered in {hits}/{reps} replicates");
    }

    #[test]
    fn shared_dimension_single_group_reduces_to_group_rank() {
        let mut rng = ChaCha20Rng::seed_from_u64(93);
        let data = vec![spiked_data(&mut rng, 40, 80, &[60.0, 20.0])];
        let g = estimate_group_rank(&data[0]).unwrap();
        let s = estimate_shared_dimension(&data).unwrap();
        assert_eq!(g.rank, s.rank);
        assert_relative_eq!(g.threshold, s.threshold, max_relative = 1e-12);
    }

    #[test]
    fn shared_dimension_identical_subspaces() {
        let mut rng = ChaCha20Rng::seed_from_u64(94);
        let p = 100;
        let u = gaussian_matrix(&mut rng, p, 2).qr().q();
        let mut hits = 0;
        let reps = 10;
        for _ in 0..reps {
            let data: Vec<GroupDataset> = (0..4)
                .map(|_| {
                    let mut y = gaussian_matrix(&mut rng, 40, p);
                    for i in 0..40 {
                        let row = y.row(i).transpose();
                        let coeff = u.transpose() * &row;
                        let boost = u.column(0).scale(coeff[0] * (81.0_f64.sqrt() - 1.0))
                            + u.column(1).scale(coeff[1] * (26.0_f64.sqrt() - 1.0));
                        let new_row = &row + boost;
                        y.set_row(i, &new_row.transpose());
                    }
                    scatter_from_data(&y).unwrap()
                })
                .collect();
            if estimate_shared_dimension(&data).unwrap().rank == 2 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "shared dimension 2 in {hits}/{reps} replicates");
    }

    #[test]
    fn shared_dimension_independent_subspaces_sees_pooled_structure() {
        // Ten groups with independent 2-dimensional subspaces: the pooled
        // estimate must land far above the per-group rank and at most
        // slightly above the rank bound rK = 20. With the paper's (250, 25)
        // spikes the second tier sits at the detection edge after pooling
        // (effective strength 25/K), so the estimate trails rK.
        let mut rng = ChaCha20Rng::seed_from_u64(95);
        let p = 200;
        let k = 10;
        for _ in 0..5 {
            let data: Vec<GroupDataset> =
                (0..k).map(|_| spiked_data(&mut rng, 50, p, &[250.0, 25.0])).collect();
            let est = estimate_shared_dimension(&data).unwrap();
            assert!(
                est.rank >= k && est.rank <= 2 * k + 3,
                "pooled rank {} outside [{k}, {}]",
                est.rank,
                2 * k + 3
            );
        }
    }

    #[test]
    fn shared_dimension_recovers_rk_when_spikes_survive_pooling() {
        // With a stronger second spike every pooled direction clears the
        // threshold and the estimate concentrates on rK = 20.
        let mut rng = ChaCha20Rng::seed_from_u64(97);
        let p = 200;
        let k = 10;
        let mut within = 0;
        let reps = 5;
        for _ in 0..reps {
            let data: Vec<GroupDataset> =
                (0..k).map(|_| spiked_data(&mut rng, 50, p, &[250.0, 100.0])).collect();
            let est = estimate_shared_dimension(&data).unwrap();
            if (est.rank as i64 - 2 * k as i64).unsigned_abs() <= 3 {
                within += 1;
            }
        }
        assert!(within >= 4, "pooled rank near rK in {within}/{reps} replicates");
    }

    #[test]
    fn inconsistent_p_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(96);
        let a = scatter_from_data(&gaussian_matrix(&mut rng, 10, 5)).unwrap();
        let b = scatter_from_data(&gaussian_matrix(&mut rng, 10, 6)).unwrap();
        assert!(matches!(
            estimate_shared_dimension(&[a, b]),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
