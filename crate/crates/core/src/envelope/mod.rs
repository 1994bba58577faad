//! Gaussian envelopes: minimal enclosing ellipsoids with gated, smoothed,
//! zone-tiered updates and near-zone component voxelization.

pub mod mvee;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::partition::Zone;

/// Largest eigenvalue ratio accepted by the gate before Σ counts as singular.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("ill-conditioned covariance (eigenvalues {min:e}..{max:e})")]
    IllConditioned { min: f64, max: f64 },
    #[error("envelope fit needs at least one point")]
    EmptyPointSet,
    #[error("invalid envelope config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    MinVolume,
    MinTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvelopeUpdateConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub delta_mid: f64,
    pub eps_mid: f64,
    pub eps_max: f64,
    pub eps_reg: f64,
    pub voxel_size: f64,
    pub objective: Objective,
    pub solver_tol: f64,
    pub solver_max_iterations: usize,
    pub max_refine_iterations: usize,
    pub stale_after: u32,
}

impl Default for EnvelopeUpdateConfig {
    fn default() -> Self {
        EnvelopeUpdateConfig {
            alpha: 0.7,
            gamma: 9.0,
            delta_mid: 0.005,
            eps_mid: 1e-3,
            eps_max: 1e-5,
            eps_reg: 1e-6,
            voxel_size: 0.001,
            objective: Objective::MinVolume,
            solver_tol: 1e-7,
            solver_max_iterations: 1000,
            max_refine_iterations: 50,
            stale_after: 10,
        }
    }
}

impl EnvelopeUpdateConfig {
    pub fn validate(&self) -> Result<(), EnvelopeError> {
        let bad = |m: &str| Err(EnvelopeError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("delta_mid", self.delta_mid),
            ("eps_mid", self.eps_mid),
            ("eps_max", self.eps_max),
            ("eps_reg", self.eps_reg),
            ("voxel_size", self.voxel_size),
            ("solver_tol", self.solver_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.eps_max >= self.eps_mid {
            return bad("eps_max must be smaller than eps_mid");
        }
        if self.solver_max_iterations == 0 || self.max_refine_iterations == 0 {
            return bad("iteration caps must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnvelope {
    pub mu: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    pub spatial_index: u64,
    /// Consecutive frames without an admitted point.
    pub stale_frames: u32,
}

impl GaussianEnvelope {
    pub fn new(mu: Vector3<f64>, sigma: Matrix3<f64>, spatial_index: u64) -> Self {
        GaussianEnvelope { mu, sigma, spatial_index, stale_frames: 0 }
    }

    /// Unit envelope (Σ = I) used for far-zone objects and first sightings.
    pub fn unit(mu: Vector3<f64>, spatial_index: u64) -> Self {
        Self::new(mu, Matrix3::identity(), spatial_index)
    }

    pub fn with_index(mut self, spatial_index: u64) -> Self {
        self.spatial_index = spatial_index;
        self
    }

    pub fn is_stale(&self, limit: u32) -> bool {
        self.stale_frames >= limit
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vector3<f64> {
        let mut e = SymmetricEigen::new(self.sigma).eigenvalues;
        e.as_mut_slice().sort_by(f64::total_cmp);
        e
    }

    /// Semi-axis lengths of the unit Mahalanobis shell, ascending.
    pub fn semi_axes(&self) -> Vector3<f64> {
        self.eigenvalues().map(|l| l.max(0.0).sqrt())
    }

    /// Proportional to ellipsoid volume.
    pub fn volume_proxy(&self) -> f64 {
        self.sigma.determinant().max(0.0).sqrt()
    }

    pub fn precision(&self) -> Result<Matrix3<f64>, EnvelopeError> {
        let e = self.eigenvalues();
        let (min, max) = (e[0], e[2]);
        if !(min > 0.0 && max.is_finite() && max / min <= MAX_CONDITION) {
            return Err(EnvelopeError::IllConditioned { min, max });
        }
        let chol = self.sigma.cholesky().ok_or(EnvelopeError::IllConditioned { min, max })?;
        Ok(chol.inverse())
    }

    pub fn mahalanobis_sq(&self, p: &Vector3<f64>) -> Result<f64, EnvelopeError> {
        let inv = self.precision()?;
        let d = p - self.mu;
        Ok(d.dot(&(inv * d)))
    }

    pub fn record(&self) -> EnvelopeRecord {
        let s = &self.sigma;
        EnvelopeRecord {
            id: self.spatial_index,
            mu: [self.mu.x, self.mu.y, self.mu.z],
            sigma: std::array::from_fn(|i| s[(i / 3, i % 3)]),
        }
    }
}

/// Dump format for one envelope; `sigma` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRecord {
    pub id: u64,
    pub mu: [f64; 3],
    pub sigma: [f64; 9],
}

impl From<&EnvelopeRecord> for GaussianEnvelope {
    fn from(r: &EnvelopeRecord) -> Self {
        GaussianEnvelope::new(Vector3::from(r.mu), Matrix3::from_row_slice(&r.sigma), r.id)
    }
}

/// Clamps eigenvalues to at least `eps_reg` and forces exact symmetry.
pub fn regularize(sigma: &Matrix3<f64>, eps_reg: f64) -> Matrix3<f64> {
    let sym = mvee::symmetrize(sigma);
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= eps_reg {
        return sym;
    }
    let v = eig.eigenvectors;
    let clamped = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(eps_reg)));
    mvee::symmetrize(&(v * clamped * v.transpose()))
}

/// Points with squared Mahalanobis distance at most `gamma`, in input order.
pub fn mahalanobis_gate(points: &[Vector3<f64>], env: &GaussianEnvelope, gamma: f64) -> Result<Vec<Vector3<f64>>, EnvelopeError> {
    let inv = env.precision()?;
    Ok(points
        .iter()
        .filter(|p| {
            let d = *p - env.mu;
            d.dot(&(inv * d)) <= gamma
        })
        .copied()
        .collect())
}

/// Exponentially smoothed mean; `None` when there is nothing to average.
pub fn update_mean(env: &GaussianEnvelope, new_points: &[Vector3<f64>], alpha: f64) -> Option<Vector3<f64>> {
    if new_points.is_empty() {
        return None;
    }
    let centroid = new_points.iter().sum::<Vector3<f64>>() / new_points.len() as f64;
    Some(env.mu * alpha + centroid * (1.0 - alpha))
}

/// Enclosing envelope under the configured objective. A fixed `center`
/// yields the smallest envelope centered there.
pub fn fit_envelope(
    points: &[Vector3<f64>],
    center: Option<&Vector3<f64>>,
    cfg: &EnvelopeUpdateConfig,
) -> Result<(GaussianEnvelope, mvee::SolveStats), EnvelopeError> {
    if points.is_empty() {
        return Err(EnvelopeError::EmptyPointSet);
    }
    let (tol, iters) = (cfg.solver_tol, cfg.solver_max_iterations);
    let fit = match (cfg.objective, center) {
        (Objective::MinVolume, None) => mvee::min_volume(points, tol, iters),
        (Objective::MinVolume, Some(c)) => mvee::min_volume_centered(points, c, tol, iters),
        (Objective::MinTrace, c) => mvee::min_trace(points, c, tol, iters),
    };
    let env = GaussianEnvelope::new(fit.center, regularize(&fit.shape, cfg.eps_reg), 0);
    Ok((env, fit.stats))
}

/// Minimum-volume enclosing envelope with default solver settings.
pub fn fit_min_envelope(points: &[Vector3<f64>], eps_reg: f64) -> Result<GaussianEnvelope, EnvelopeError> {
    let cfg = EnvelopeUpdateConfig { eps_reg, ..EnvelopeUpdateConfig::default() };
    fit_envelope(points, None, &cfg).map(|(env, _)| env)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZonedUpdate {
    pub envelope: GaussianEnvelope,
    /// Refinement rounds executed (0 for the far zone or when nothing was gated).
    pub iterations: usize,
    pub converged: bool,
    /// Whether any point was admitted.
    pub updated: bool,
    /// Mean after each refinement round.
    pub mean_path: Vec<Vector3<f64>>,
}

/// One frame of the zone-tiered envelope policy.
///
/// Far: unit envelope at `centroid_hint`. Mid and Near: gate, smooth the mean,
/// refit the covariance about it, and repeat until the mean moves at most
/// `delta_mid` and Σ moves at most `eps_mid` (Mid) or `eps_max` (Near) in
/// Frobenius norm.
pub fn update_envelope_zoned(
    env: &GaussianEnvelope,
    points: &[Vector3<f64>],
    zone: Zone,
    centroid_hint: &Vector3<f64>,
    cfg: &EnvelopeUpdateConfig,
) -> Result<ZonedUpdate, EnvelopeError> {
    if zone == Zone::Far {
        let envelope = GaussianEnvelope::unit(*centroid_hint, env.spatial_index);
        return Ok(ZonedUpdate { envelope, iterations: 0, converged: true, updated: true, mean_path: vec![*centroid_hint] });
    }
    let eps_sigma = if zone == Zone::Near { cfg.eps_max } else { cfg.eps_mid };
    let mut cur = env.clone();
    let mut mean_path = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_refine_iterations {
        let gated = mahalanobis_gate(points, &cur, cfg.gamma)?;
        let Some(mu) = update_mean(&cur, &gated, cfg.alpha) else {
            break;
        };
        let (fit, _) = fit_envelope(&gated, Some(&mu), cfg)?;
        let d_mu = (mu - cur.mu).norm();
        let d_sigma = (fit.sigma - cur.sigma).norm();
        cur.mu = mu;
        cur.sigma = fit.sigma;
        mean_path.push(mu);
        if d_mu <= cfg.delta_mid && d_sigma <= eps_sigma {
            converged = true;
            break;
        }
    }
    let iterations = mean_path.len();
    if iterations == 0 {
        let mut envelope = env.clone();
        envelope.stale_frames += 1;
        return Ok(ZonedUpdate { envelope, iterations, converged: false, updated: false, mean_path });
    }
    cur.stale_frames = 0;
    Ok(ZonedUpdate { envelope: cur, iterations, converged, updated: true, mean_path })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentVoxels {
    pub component_id: u32,
    pub voxels: BTreeSet<[i64; 3]>,
}

impl ComponentVoxels {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Inclusive integer bounds of the occupied cells.
    pub fn bounds(&self) -> Option<([i64; 3], [i64; 3])> {
        let first = *self.voxels.first()?;
        let (mut lo, mut hi) = (first, first);
        for v in &self.voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    /// Bounding-box size in meters, counting whole cells.
    pub fn extent(&self, voxel_size: f64) -> Vector3<f64> {
        match self.bounds() {
            Some((lo, hi)) => Vector3::from_fn(|a, _| (hi[a] - lo[a] + 1) as f64 * voxel_size),
            None => Vector3::zeros(),
        }
    }
}

/// Groups labeled points by sub-label and quantizes each group to unique cells.
pub fn voxelize_components(points: &[(Vector3<f64>, u32)], voxel_size: f64) -> Vec<ComponentVoxels> {
    let mut groups: BTreeMap<u32, BTreeSet<[i64; 3]>> = BTreeMap::new();
    for (p, label) in points {
        let cell = [0, 1, 2].map(|a| (p[a] / voxel_size).floor() as i64);
        groups.entry(*label).or_default().insert(cell);
    }
    groups.into_iter().map(|(component_id, voxels)| ComponentVoxels { component_id, voxels }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn gate_examples() {
        let env = GaussianEnvelope::unit(Vector3::zeros(), 0);
        let kept = mahalanobis_gate(&[v(3.0, 0.0, 0.0), v(3.1, 0.0, 0.0)], &env, 9.0).unwrap();
        assert_eq!(kept, vec![v(3.0, 0.0, 0.0)]);
        let wide = GaussianEnvelope::new(Vector3::zeros(), Matrix3::from_diagonal(&v(4.0, 1.0, 1.0)), 0);
        assert_eq!(wide.mahalanobis_sq(&v(4.0, 0.0, 0.0)).unwrap(), 4.0);
        assert_eq!(mahalanobis_gate(&[v(4.0, 0.0, 0.0)], &wide, 9.0).unwrap().len(), 1);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let env = GaussianEnvelope::new(Vector3::zeros(), Matrix3::from_diagonal(&v(1.0, 1.0, 0.0)), 0);
        assert!(matches!(mahalanobis_gate(&[v(0.0, 0.0, 0.0)], &env, 9.0), Err(EnvelopeError::IllConditioned { .. })));
    }

    #[test]
    fn mean_update_examples() {
        let env = GaussianEnvelope::unit(v(1.0, 2.0, 3.0), 0);
        let pts = [v(5.0, 5.0, 5.0)];
        assert_eq!(update_mean(&env, &pts, 1.0), Some(v(1.0, 2.0, 3.0)));
        assert_eq!(update_mean(&env, &pts, 0.0), Some(v(5.0, 5.0, 5.0)));
        let origin = GaussianEnvelope::unit(Vector3::zeros(), 0);
        assert_eq!(update_mean(&origin, &[v(2.0, 0.0, 0.0)], 0.5), Some(v(1.0, 0.0, 0.0)));
        assert_eq!(update_mean(&origin, &[], 0.5), None);
    }

    #[test]
    fn single_point_fit_is_floor() {
        let q = v(0.3, -0.2, 1.0);
        let env = fit_min_envelope(&[q], 1e-6).unwrap();
        assert_eq!(env.mu, q);
        assert!((env.sigma - Matrix3::identity() * 1e-6).abs().max() < 1e-18);
    }

    #[test]
    fn far_zone_is_exact_unit() {
        let env = GaussianEnvelope::new(v(0.0, 0.0, 0.0), Matrix3::identity() * 0.01, 7);
        let out = update_envelope_zoned(&env, &[v(1.0, 1.0, 1.0)], Zone::Far, &v(2.0, 0.0, 1.0), &Default::default()).unwrap();
        assert_eq!(out.envelope.mu, v(2.0, 0.0, 1.0));
        assert_eq!(out.envelope.sigma, Matrix3::identity());
        assert_eq!(out.envelope.spatial_index, 7);
    }

    #[test]
    fn nothing_gated_marks_stale() {
        let env = GaussianEnvelope::new(Vector3::zeros(), Matrix3::identity() * 1e-4, 1);
        let out = update_envelope_zoned(&env, &[v(1.0, 0.0, 0.0)], Zone::Mid, &Vector3::zeros(), &Default::default()).unwrap();
        assert!(!out.updated);
        assert_eq!(out.envelope.mu, env.mu);
        assert_eq!(out.envelope.sigma, env.sigma);
        assert_eq!(out.envelope.stale_frames, 1);
    }

    #[test]
    fn voxel_examples() {
        assert!(voxelize_components(&[], 0.001).is_empty());
        let same = voxelize_components(&[(v(0.0001, 0.0, 0.0), 3), (v(0.0002, 0.0005, 0.0), 3)], 0.001);
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].len(), 1);
        let two = voxelize_components(&[(v(0.0, 0.0, 0.0), 1), (v(0.0011, 0.0, 0.0), 1)], 0.001);
        assert_eq!(two[0].voxels.iter().copied().collect::<Vec<_>>(), vec![[0, 0, 0], [1, 0, 0]]);
        assert!((two[0].extent(0.001) - v(0.002, 0.001, 0.001)).norm() < 1e-15);
    }

    #[test]
    fn record_round_trip() {
        let sigma = Matrix3::new(2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0);
        let env = GaussianEnvelope::new(v(1.0, 2.0, 3.0), sigma, 4);
        let rec = env.record();
        assert_eq!(rec.sigma[1], 0.1);
        assert_eq!(GaussianEnvelope::from(&rec), env);
    }

    #[test]
    fn config_validation() {
        assert!(EnvelopeUpdateConfig::default().validate().is_ok());
        let bad = EnvelopeUpdateConfig { alpha: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EnvelopeUpdateConfig { eps_max: 1e-2, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
