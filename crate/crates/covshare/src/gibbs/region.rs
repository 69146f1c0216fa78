//! Posterior summaries on two-dimensional subspaces: eigenstructure angle
//! and log eigenvalue ratio, convex-hull-peeled credible regions, and
//! Procrustes alignment of estimated bases to a reference.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::GroupSpikeParams;

/// Orientation of the leading eigenvector and log eigenvalue ratio of a
/// rank-2 projected covariance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AngleRatioSummary {
    /// Angle of the first eigenvector against the first subspace coordinate,
    /// folded into `(-pi/2, pi/2]` (eigenvectors are sign-ambiguous).
    pub angle: f64,
    /// `log(lambda_1 / lambda_2) >= 0` (eigenvalues are kept sorted).
    pub log_ratio: f64,
}

/// Fold an angle into `(-pi/2, pi/2]`, identifying antipodal directions.
pub(crate) fn fold_angle(theta: f64) -> f64 {
    let mut t = theta;
    while t <= -FRAC_PI_2 {
        t += PI;
    }
    while t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Angle/log-ratio summary of a rank-2 parameter draw.
pub fn angle_logratio(params: &GroupSpikeParams) -> Result<AngleRatioSummary> {
    if params.r() != 2 {
        return Err(Error::InvalidInput(format!(
            "angle/log-ratio summaries need r = 2, got r = {}",
            params.r()
        )));
    }
    let o = params.eigvecs();
    let angle = fold_angle(o[(1, 0)].atan2(o[(0, 0)]));
    let lam = params.lambdas();
    if lam[1] <= 0.0 {
        return Err(Error::SingularModel(
            "second spike eigenvalue is zero; the eigenvalue ratio is unbounded".into(),
        ));
    }
    Ok(AngleRatioSummary { angle, log_ratio: lam[0].ln() - lam[1].ln() })
}

/// A central credible region formed by peeling convex-hull layers off a
/// planar posterior sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRegion {
    /// Vertices of the convex hull of the surviving points, in
    /// counterclockwise order. May degenerate to two points (a segment) or
    /// one point.
    pub vertices: Vec<(f64, f64)>,
    pub coverage_target: f64,
    /// Number of original points retained inside the peeled region.
    pub retained_count: usize,
}

impl PosteriorRegion {
    /// Whether a point lies in the closed region (boundary inclusive).
    pub fn contains(&self, point: (f64, f64)) -> bool {
        let scale = self
            .vertices
            .iter()
            .flat_map(|v| [v.0.abs(), v.1.abs()])
            .chain([point.0.abs(), point.1.abs()])
            .fold(1.0_f64, f64::max);
        let eps = 1e-9 * scale;
        match self.vertices.len() {
            0 => false,
            1 => {
                let v = self.vertices[0];
                (point.0 - v.0).abs() <= eps && (point.1 - v.1).abs() <= eps
            }
            2 => dist_to_segment(point, self.vertices[0], self.vertices[1]) <= eps,
            _ => {
                for i in 0..self.vertices.len() {
                    let a = self.vertices[i];
                    let b = self.vertices[(i + 1) % self.vertices.len()];
                    if cross(a, b, point) < -eps * scale {
                        return false;
                    }
                }
                true
            }
        }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt();
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Indices of the strict convex-hull vertices of `points` (collinear
/// boundary points are not vertices), in counterclockwise order by
/// Andrew's monotone chain.
pub(crate) fn convex_hull_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .partial_cmp(&points[b])
            .expect("hull points must not contain NaN")
    });
    idx.dedup_by(|a, b| points[*a] == points[*b]);
    if idx.len() <= 2 {
        return idx;
    }
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    // Lower hull, then upper hull; strict right turns are popped.
    for &i in idx.iter() {
        while hull.len() >= 2
            && cross(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0
        {
            hull.pop();
        }
        hull.push(i);
    }
    let lower_len = hull.len() + 1;
    for &i in idx.iter().rev() {
        while hull.len() >= lower_len
            && cross(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0
        {
            hull.pop();
        }
        hull.push(i);
    }
    hull.pop();
    hull
}

/// Peel whole convex-hull layers off a planar sample until removing another
/// layer would drop the retained fraction below `target`, then return the
/// convex hull of the survivors.
pub fn hull_peel_region(points: &[(f64, f64)], target: f64) -> Result<PosteriorRegion> {
    if points.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 points to peel a region, got {}",
            points.len()
        )));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!(
            "coverage target must lie strictly between 0 and 1, got {target}"
        )));
    }
    if points.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::InvalidInput("region points must be finite".into()));
    }
    let total = points.len() as f64;
    let mut survivors: Vec<(f64, f64)> = points.to_vec();
    loop {
        let hull = convex_hull_indices(&survivors);
        if hull.is_empty() {
            break;
        }
        // A layer is every sample sitting at a hull-vertex location, so
        // duplicated draws leave together.
        let vertex_coords: Vec<(f64, f64)> = hull.iter().map(|&i| survivors[i]).collect();
        let drop: Vec<bool> =
            survivors.iter().map(|p| vertex_coords.contains(p)).collect();
        let layer = drop.iter().filter(|d| **d).count();
        let after = survivors.len() - layer;
        if after == 0 || (after as f64) < target * total {
            break;
        }
        survivors = survivors
            .iter()
            .zip(drop.iter())
            .filter(|(_, &d)| !d)
            .map(|(p, _)| *p)
            .collect();
    }
    let hull = convex_hull_indices(&survivors);
    let vertices: Vec<(f64, f64)> = hull.iter().map(|&i| survivors[i]).collect();
    Ok(PosteriorRegion { vertices, coverage_target: target, retained_count: survivors.len() })
}

/// Orthogonal Procrustes rotation: the `s x s` orthogonal `R` minimizing
/// `|v_hat R - v_ref|_F`, i.e. the polar factor of `v_hat' v_ref`.
pub fn procrustes_align(v_hat: &DMatrix<f64>, v_ref: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v_hat.shape() != v_ref.shape() {
        return Err(Error::DimensionMismatch(format!(
            "procrustes inputs differ in shape: {:?} vs {:?}",
            v_hat.shape(),
            v_ref.shape()
        )));
    }
    let m = v_hat.transpose() * v_ref;
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::SingularModel("svd failed to produce U".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::SingularModel("svd failed to produce V'".into()))?;
    Ok(u * v_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_4;

    use crate::model::lambda_to_omega;

    fn params_from(o: DMatrix<f64>, lam: Vec<f64>) -> GroupSpikeParams {
        let omega = lambda_to_omega(&DVector::from_vec(lam)).unwrap();
        GroupSpikeParams::new(1.0, o, omega).unwrap()
    }

    #[test]
    fn angle_logratio_axis_aligned() {
        let p = params_from(DMatrix::identity(2, 2), vec![10.0, 1.0]);
        let s = angle_logratio(&p).unwrap();
        assert_relative_eq!(s.angle, 0.0, epsilon = 1e-14);
        assert_relative_eq!(s.log_ratio, 10.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn angle_logratio_diagonal_direction_and_fold() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let o = DMatrix::from_column_slice(2, 2, &[h, h, -h, h]);
        let s = angle_logratio(&params_from(o, vec![4.0, 2.0])).unwrap();
        assert_relative_eq!(s.angle, FRAC_PI_4, epsilon = 1e-12);

        let o_neg = DMatrix::from_column_slice(2, 2, &[-h, -h, h, -h]);
        let s2 = angle_logratio(&params_from(o_neg, vec![4.0, 2.0])).unwrap();
        assert_relative_eq!(s2.angle, FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn angle_logratio_rejects_other_ranks() {
        let p = params_from(DMatrix::identity(3, 3), vec![4.0, 2.0, 1.0]);
        assert!(angle_logratio(&p).is_err());
    }

    #[test]
    fn hull_of_grid_is_four_corners() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push((i as f64, j as f64));
            }
        }
        let hull = convex_hull_indices(&pts);
        assert_eq!(hull.len(), 4);
    }

    #[test]
    fn grid_peel_keeps_at_least_ninety() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push((i as f64, j as f64));
            }
        }
        let region = hull_peel_region(&pts, 0.95).unwrap();
        // One corner layer (4 points) can come off; the next layer would
        // drop retention below 95%.
        assert_eq!(region.retained_count, 96);
        assert!(region.retained_count >= 90);
    }

    #[test]
    fn identical_points_degenerate_region() {
        let pts = vec![(1.5, -2.0); 25];
        let region = hull_peel_region(&pts, 0.95).unwrap();
        assert_eq!(region.vertices.len(), 1);
        assert_eq!(region.retained_count, 25);
        assert!(region.contains((1.5, -2.0)));
        assert!(!region.contains((1.6, -2.0)));
    }

    #[test]
    fn bad_targets_and_small_samples_are_rejected() {
        let pts = vec![(0.0, 0.0); 25];
        assert!(hull_peel_region(&pts, 1.0).is_err());
        assert!(hull_peel_region(&pts, 0.0).is_err());
        assert!(hull_peel_region(&[(0.0, 0.0); 5], 0.95).is_err());
    }

    #[test]
    fn region_containment_is_boundary_inclusive() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                pts.push((i as f64, j as f64));
            }
        }
        let region = hull_peel_region(&pts, 0.99).unwrap();
        assert!(region.contains((5.0, 5.0)));
        assert!(region.contains((0.0, 1.0))); // on the boundary
        assert!(!region.contains((-1.0, 5.0)));
    }

    #[test]
    fn procrustes_identity_and_rotation_recovery() {
        let mut rng = ChaCha20Rng::seed_from_u64(50);
        let g = DMatrix::from_fn(10, 2, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        });
        let v = g.qr().q();
        let r = procrustes_align(&v, &v).unwrap();
        assert_relative_eq!(&r, &DMatrix::identity(2, 2), epsilon = 1e-10);

        let theta: f64 = 0.73;
        let q = DMatrix::from_row_slice(
            2,
            2,
            &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        );
        let v_rot = &v * &q;
        let r = procrustes_align(&v_rot, &v).unwrap();
        assert_relative_eq!(&r, &q.transpose(), epsilon = 1e-10);
    }

    #[test]
    fn procrustes_beats_rotation_reflection_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let sample = |rng: &mut ChaCha20Rng| {
            DMatrix::from_fn(10, 2, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .qr()
            .q()
        };
        let v_hat = sample(&mut rng);
        let v_ref = sample(&mut rng);
        let r = procrustes_align(&v_hat, &v_ref).unwrap();
        assert!((r.transpose() * &r - DMatrix::identity(2, 2)).norm() <= 1e-10);
        let ours = (&v_hat * &r - &v_ref).norm_squared();

        let mut best = f64::INFINITY;
        let grid = 5000;
        for i in 0..grid {
            let t = i as f64 / grid as f64 * 2.0 * PI;
            for refl in [1.0, -1.0] {
                let cand = DMatrix::from_row_slice(
                    2,
                    2,
                    &[t.cos(), -refl * t.sin(), t.sin(), refl * t.cos()],
                );
                best = best.min((&v_hat * &cand - &v_ref).norm_squared());
            }
        }
        assert!(ours <= best + 1e-6, "procrustes {ours} vs grid best {best}");
    }
}
