//! Enclosing-ellipsoid solvers.
//!
//! The minimum-volume solver is a Khachiyan iteration with Todd–Yıldırım away
//! steps over the lifted points, run in a whitened principal basis. MVEE is
//! affine-equivariant, so whitening changes conditioning but not the answer.
//! Rank-deficient inputs are solved inside their affine hull; the caller
//! inflates the missing directions.
//!
//! The minimum-trace solver is Frank–Wolfe on the dual
//! `max_w tr(C_w^{1/2})`, whose optimum gives `Σ = tr(C^{1/2}) · C^{1/2}`.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

/// Axes whose extent falls below this fraction of the largest extent are
/// treated as degenerate.
const RANK_TOLERANCE: f64 = 1e-9;
const REFRESH_EVERY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub converged: bool,
    /// Largest normalized Mahalanobis distance before the containment rescale.
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidFit {
    pub center: Vector3<f64>,
    /// Shape matrix: points satisfy `(p-c)ᵀ Σ⁻¹ (p-c) ≤ 1`. May be singular.
    pub shape: Matrix3<f64>,
    pub stats: SolveStats,
}

/// Principal basis of a point set restricted to its non-degenerate directions.
struct Basis {
    axes: Vec<Vector3<f64>>,
    extents: Vec<f64>,
}

impl Basis {
    fn of(vectors: &[Vector3<f64>]) -> Basis {
        let mut m = Matrix3::zeros();
        for v in vectors {
            m += v * v.transpose();
        }
        let eig = SymmetricEigen::new(m);
        let mut cols: Vec<(Vector3<f64>, f64)> = (0..3)
            .map(|a| {
                let axis: Vector3<f64> = eig.eigenvectors.column(a).into();
                let ext = vectors.iter().map(|v| v.dot(&axis).abs()).fold(0.0, f64::max);
                (axis, ext)
            })
            .collect();
        cols.sort_by(|a, b| b.1.total_cmp(&a.1));
        let max_ext = cols[0].1;
        cols.retain(|(_, e)| *e > RANK_TOLERANCE * max_ext && *e > 1e-300);
        Basis { axes: cols.iter().map(|c| c.0).collect(), extents: cols.iter().map(|c| c.1).collect() }
    }

    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn coords(&self, v: &Vector3<f64>, whiten: bool) -> Vec<f64> {
        self.axes
            .iter()
            .zip(&self.extents)
            .map(|(a, e)| if whiten { v.dot(a) / e } else { v.dot(a) })
            .collect()
    }

    /// Maps a point and a shape matrix from basis coordinates back to 3-D.
    fn lift(&self, c: &DVector<f64>, s: &DMatrix<f64>, whiten: bool) -> (Vector3<f64>, Matrix3<f64>) {
        let k = self.dim();
        let mut b = DMatrix::<f64>::zeros(3, k);
        for j in 0..k {
            let col = if whiten { self.axes[j] * self.extents[j] } else { self.axes[j] };
            b.set_column(j, &col);
        }
        let center = &b * c;
        let shape = &b * s * b.transpose();
        (Vector3::new(center[0], center[1], center[2]), Matrix3::from_iterator(shape.iter().copied()))
    }
}

/// Maximizes `log det(Σ uᵢ qᵢ qᵢᵀ)` over the simplex. Rows of `q` are the
/// vectors; they must span the column space.
fn centered_khachiyan(q: &DMatrix<f64>, tol: f64, max_iter: usize) -> (DVector<f64>, SolveStats) {
    let (n, k) = q.shape();
    let kf = k as f64;
    let mut u = DVector::from_element(n, 1.0 / n as f64);

    let refresh = |u: &DVector<f64>| -> Option<(DMatrix<f64>, DVector<f64>)> {
        let mut x = DMatrix::<f64>::zeros(k, k);
        for i in 0..n {
            if u[i] > 0.0 {
                let row = q.row(i);
                x += row.transpose() * row * u[i];
            }
        }
        let x_inv = x.cholesky()?.inverse();
        let qx = q * &x_inv;
        let m = DVector::from_iterator(n, (0..n).map(|i| qx.row(i).dot(&q.row(i))));
        Some((x_inv, m))
    };

    let Some((mut x_inv, mut m)) = refresh(&u) else {
        return (u, SolveStats { iterations: 0, converged: false, max_ratio: f64::INFINITY });
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let (j_add, m_max) = m.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        let (j_away, m_min) = m
            .iter()
            .enumerate()
            .filter(|(i, _)| u[*i] > 0.0)
            .fold((0, f64::INFINITY), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
        let eps_plus = m_max / kf - 1.0;
        let eps_minus = 1.0 - m_min / kf;
        if eps_plus <= tol && eps_minus <= tol {
            converged = true;
            break;
        }
        let (j, beta) = if eps_plus >= eps_minus {
            (j_add, (m_max - kf) / (kf * (m_max - 1.0)))
        } else {
            let uj = u[j_away];
            let beta = if m_min > 1.0 { (m_min - kf) / (kf * (m_min - 1.0)) } else { f64::NEG_INFINITY };
            (j_away, beta.max(-uj / (1.0 - uj)))
        };
        if !beta.is_finite() || beta == 0.0 {
            break;
        }
        iterations += 1;

        u *= 1.0 - beta;
        u[j] += beta;
        if u[j] < 1e-14 {
            u[j] = 0.0;
        }

        if iterations % REFRESH_EVERY == 0 {
            match refresh(&u) {
                Some((xi, mi)) => {
                    x_inv = xi;
                    m = mi;
                }
                None => break,
            }
            continue;
        }
        // Sherman–Morrison update of X⁻¹ and of every mᵢ = qᵢᵀ X⁻¹ qᵢ.
        let mj = m[j];
        let denom = (1.0 - beta) + beta * mj;
        let w = &x_inv * q.row(j).transpose();
        let g = q * &w;
        let scale = 1.0 / (1.0 - beta);
        x_inv = (&x_inv - (&w * w.transpose()) * (beta / denom)) * scale;
        for i in 0..n {
            m[i] = (m[i] - beta * g[i] * g[i] / denom) * scale;
        }
    }
    let max_ratio = m.max() / kf;
    (u, SolveStats { iterations, converged, max_ratio })
}

/// Minimum-volume ellipsoid enclosing `points` (free center).
pub fn min_volume(points: &[Vector3<f64>], tol: f64, max_iter: usize) -> EllipsoidFit {
    assert!(!points.is_empty(), "min_volume needs at least one point");
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - mean).collect();
    let basis = Basis::of(&centered);
    let k = basis.dim();
    let done = SolveStats { iterations: 0, converged: true, max_ratio: 1.0 };
    if k == 0 {
        return EllipsoidFit { center: mean, shape: Matrix3::zeros(), stats: done };
    }
    let n = points.len();
    let mut q = DMatrix::<f64>::zeros(n, k + 1);
    for (i, v) in centered.iter().enumerate() {
        for (a, x) in basis.coords(v, true).into_iter().enumerate() {
            q[(i, a)] = x;
        }
        q[(i, k)] = 1.0;
    }
    let (u, mut stats) = centered_khachiyan(&q, tol, max_iter);
    let y = q.columns(0, k);
    let c: DVector<f64> = y.transpose() * &u;
    let mut second = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let row = y.row(i);
        second += row.transpose() * row * u[i];
    }
    let mut s = (second - &c * c.transpose()) * k as f64;
    let ratio = max_mahalanobis(&y.into_owned(), &c, &s);
    stats.max_ratio = ratio;
    if ratio > 1.0 {
        s *= ratio;
    }
    let (center, shape) = basis.lift(&c, &s, true);
    EllipsoidFit { center: center + mean, shape: symmetrize(&shape), stats }
}

/// Minimum-volume ellipsoid centered at `center` enclosing `points`.
pub fn min_volume_centered(points: &[Vector3<f64>], center: &Vector3<f64>, tol: f64, max_iter: usize) -> EllipsoidFit {
    let vectors: Vec<Vector3<f64>> = points.iter().map(|p| p - center).collect();
    let basis = Basis::of(&vectors);
    let k = basis.dim();
    if k == 0 {
        let stats = SolveStats { iterations: 0, converged: true, max_ratio: 1.0 };
        return EllipsoidFit { center: *center, shape: Matrix3::zeros(), stats };
    }
    let n = vectors.len();
    let mut q = DMatrix::<f64>::zeros(n, k);
    for (i, v) in vectors.iter().enumerate() {
        for (a, x) in basis.coords(v, true).into_iter().enumerate() {
            q[(i, a)] = x;
        }
    }
    let (u, mut stats) = centered_khachiyan(&q, tol, max_iter);
    let mut second = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let row = q.row(i);
        second += row.transpose() * row * u[i];
    }
    let mut s = second * k as f64;
    let zero = DVector::zeros(k);
    let ratio = max_mahalanobis(&q, &zero, &s);
    stats.max_ratio = ratio;
    if ratio > 1.0 {
        s *= ratio;
    }
    let (_, shape) = basis.lift(&zero, &s, true);
    EllipsoidFit { center: *center, shape: symmetrize(&shape), stats }
}

/// Minimum-trace enclosing ellipsoid; `center = None` frees the center.
pub fn min_trace(points: &[Vector3<f64>], center: Option<&Vector3<f64>>, tol: f64, max_iter: usize) -> EllipsoidFit {
    assert!(!points.is_empty(), "min_trace needs at least one point");
    let anchor = center.copied().unwrap_or_else(|| points.iter().sum::<Vector3<f64>>() / points.len() as f64);
    let vectors: Vec<Vector3<f64>> = points.iter().map(|p| p - anchor).collect();
    let basis = Basis::of(&vectors);
    let k = basis.dim();
    if k == 0 {
        let stats = SolveStats { iterations: 0, converged: true, max_ratio: 1.0 };
        return EllipsoidFit { center: anchor, shape: Matrix3::zeros(), stats };
    }
    let n = vectors.len();
    let y: Vec<DVector<f64>> = vectors.iter().map(|v| DVector::from_vec(basis.coords(v, false))).collect();
    let free = center.is_none();

    let moments = |w: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut mu = DVector::zeros(k);
        if free {
            for i in 0..n {
                mu += &y[i] * w[i];
            }
        }
        let mut c = DMatrix::zeros(k, k);
        for i in 0..n {
            let d = &y[i] - &mu;
            c += &d * d.transpose() * w[i];
        }
        (mu, c)
    };
    let sqrt_parts = |c: &DMatrix<f64>| -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new(c.clone());
        let lmax = eig.eigenvalues.max().max(1e-300);
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let inv_root = eig.eigenvalues.map(|l| 1.0 / l.max(1e-18 * lmax).sqrt());
        let v = &eig.eigenvectors;
        let sqrt_c = v * DMatrix::from_diagonal(&root) * v.transpose();
        let inv_sqrt_c = v * DMatrix::from_diagonal(&inv_root) * v.transpose();
        (root.sum(), sqrt_c, inv_sqrt_c)
    };
    let objective = |w: &DVector<f64>| sqrt_parts(&moments(w).1).0;

    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let (mu, c) = moments(&w);
        let (tr_root, _, inv_sqrt) = sqrt_parts(&c);
        let g: Vec<f64> = y
            .iter()
            .map(|yi| {
                let d = yi - &mu;
                (d.transpose() * &inv_sqrt * &d)[0]
            })
            .collect();
        let (j, gmax) = g.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        if gmax <= (1.0 + tol) * tr_root {
            converged = true;
            break;
        }
        iterations += 1;
        // Golden-section line search toward vertex j.
        let mix = |gamma: f64| {
            let mut t = &w * (1.0 - gamma);
            t[j] += gamma;
            t
        };
        let (mut lo, mut hi) = (0.0f64, 1.0 - 1e-9);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let (mut fa, mut fb) = (objective(&mix(a)), objective(&mix(b)));
        for _ in 0..40 {
            if fa < fb {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = objective(&mix(b));
            } else {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = objective(&mix(a));
            }
        }
        w = mix(0.5 * (lo + hi));
    }
    let (mu, c) = moments(&w);
    let (tr_root, sqrt_c, _) = sqrt_parts(&c);
    let mut s = sqrt_c * tr_root;
    let ys = DMatrix::from_fn(n, k, |i, a| y[i][a]);
    let ratio = max_mahalanobis(&ys, &mu, &s);
    if ratio > 1.0 {
        s *= ratio;
    }
    let (c3, shape) = basis.lift(&mu, &s, false);
    let stats = SolveStats { iterations, converged, max_ratio: ratio };
    EllipsoidFit { center: anchor + c3, shape: symmetrize(&shape), stats }
}

/// Largest `(yᵢ-c)ᵀ S⁻¹ (yᵢ-c)` over the rows of `y`.
fn max_mahalanobis(y: &DMatrix<f64>, c: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let Some(chol) = s.clone().cholesky() else {
        return f64::INFINITY;
    };
    let inv = chol.inverse();
    (0..y.nrows())
        .map(|i| {
            let d = y.row(i).transpose() - c;
            (d.transpose() * &inv * &d)[0]
        })
        .fold(0.0, f64::max)
}

pub(crate) fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corners() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    v.push(Vector3::new(x, y, z));
                }
            }
        }
        v
    }

    #[test]
    fn cube_corners_give_three_identity() {
        let fit = min_volume(&corners(), 1e-7, 1000);
        assert!(fit.center.norm() < 1e-9);
        assert!((fit.shape - Matrix3::identity() * 3.0).abs().max() < 1e-6);
        let fit = min_trace(&corners(), None, 1e-7, 1000);
        assert!((fit.shape - Matrix3::identity() * 3.0).abs().max() < 1e-6);
    }

    #[test]
    fn octahedron_is_unit_sphere() {
        let mut pts = Vec::new();
        for a in 0..3 {
            let mut e = Vector3::zeros();
            e[a] = 1.0;
            pts.push(e);
            pts.push(-e);
        }
        let fit = min_volume(&pts, 1e-9, 1000);
        assert!((fit.shape - Matrix3::identity()).abs().max() < 1e-6);
    }

    #[test]
    fn segment_is_rank_one() {
        let fit = min_volume(&[Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)], 1e-9, 1000);
        assert!(fit.center.norm() < 1e-12);
        assert!((fit.shape[(0, 0)] - 1.0).abs() < 1e-9);
        assert!(fit.shape.iter().enumerate().filter(|(i, _)| *i != 0).all(|(_, v)| v.abs() < 1e-9));
    }

    #[test]
    fn planar_square_in_plane() {
        let pts = [
            Vector3::new(1.0, 1.0, 0.5),
            Vector3::new(-1.0, 1.0, 0.5),
            Vector3::new(1.0, -1.0, 0.5),
            Vector3::new(-1.0, -1.0, 0.5),
        ];
        let fit = min_volume(&pts, 1e-9, 1000);
        assert!((fit.center - Vector3::new(0.0, 0.0, 0.5)).norm() < 1e-9);
        assert!((fit.shape[(0, 0)] - 2.0).abs() < 1e-6);
        assert!((fit.shape[(1, 1)] - 2.0).abs() < 1e-6);
        assert!(fit.shape[(2, 2)].abs() < 1e-9);
    }

    #[test]
    fn centered_fit_of_symmetric_set() {
        let fit = min_volume_centered(&corners(), &Vector3::zeros(), 1e-9, 1000);
        assert!((fit.shape - Matrix3::identity() * 3.0).abs().max() < 1e-6);
        // Off-center anchor still encloses everything.
        let c = Vector3::new(0.2, -0.1, 0.05);
        let fit = min_volume_centered(&corners(), &c, 1e-7, 1000);
        let inv = fit.shape.try_inverse().unwrap();
        for p in corners() {
            let d = p - c;
            assert!((d.transpose() * inv * d)[0] <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn interior_points_near_center_keep_weights_feasible() {
        let mut pts = corners();
        pts.extend([Vector3::zeros(), Vector3::new(0.05, 0.0, 0.0), Vector3::new(0.0, -0.1, 0.02)]);
        let fit = min_volume_centered(&pts, &Vector3::zeros(), 1e-9, 1000);
        assert!(fit.stats.converged);
        assert!((fit.shape - Matrix3::identity() * 3.0).abs().max() < 1e-6);
    }

    #[test]
    fn trace_objective_never_exceeds_volume_objective_trace() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(3.0, 0.1, 0.0),
            Vector3::new(0.2, 1.0, 0.3),
            Vector3::new(1.0, 0.5, 2.0),
            Vector3::new(2.0, 2.0, 0.5),
        ];
        let vol = min_volume(&pts, 1e-9, 1000);
        let tr = min_trace(&pts, None, 1e-9, 1000);
        assert!(tr.shape.trace() <= vol.shape.trace() * (1.0 + 1e-6));
        let inv = tr.shape.try_inverse().unwrap();
        for p in pts {
            let d = p - tr.center;
            assert!((d.transpose() * inv * d)[0] <= 1.0 + 1e-9);
        }
    }
}
