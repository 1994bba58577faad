#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use provlm::geometry::RigidTransform;
use provlm::sim::SimScene;
use rand::Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn scenario_path(name: &str) -> PathBuf {
    repo_root().join("scenarios").join(format!("{name}.json"))
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn load_scenario(name: &str) -> SimScene {
    SimScene::load(&scenario_path(name)).expect("scenario loads")
}

pub fn load_fixture(name: &str) -> SimScene {
    SimScene::load(&fixture_path(name)).expect("fixture loads")
}

pub fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_rigid<R: Rng>(rng: &mut R, reach: f64) -> RigidTransform {
    let axis = random_unit(rng);
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let t = Vector3::new(rng.random_range(-reach..reach), rng.random_range(-reach..reach), rng.random_range(-reach..reach));
    RigidTransform::from_axis_angle(axis, angle, t)
}

/// Minimum-volume enclosing ellipsoid by Titterington's multiplicative
/// iteration on the lifted points, rescaled to contain every point.
/// Returns `(center, shape)` with `(p-c)ᵀ shape⁻¹ (p-c) ≤ 1`.
pub fn titterington_mvee(points: &[Vector3<f64>], iterations: usize) -> (Vector3<f64>, Matrix3<f64>) {
    let n = points.len();
    let q: Vec<Vector4<f64>> = points.iter().map(|p| Vector4::new(p.x, p.y, p.z, 1.0)).collect();
    let mut u = vec![1.0 / n as f64; n];
    for _ in 0..iterations {
        let mut x = Matrix4::zeros();
        for (qi, w) in q.iter().zip(&u) {
            x += qi * qi.transpose() * *w;
        }
        let xi = x.try_inverse().expect("lifted points span");
        for (qi, w) in q.iter().zip(u.iter_mut()) {
            *w *= qi.dot(&(xi * qi)) / 4.0;
        }
        let s: f64 = u.iter().sum();
        u.iter_mut().for_each(|w| *w /= s);
    }
    let c: Vector3<f64> = points.iter().zip(u.iter()).map(|(p, w)| p * *w).sum();
    let mut cov = Matrix3::zeros();
    for (p, w) in points.iter().zip(u.iter()) {
        let d = p - c;
        cov += d * d.transpose() * *w;
    }
    let mut shape = cov * 3.0;
    let inv = shape.try_inverse().expect("full rank");
    let worst = points.iter().map(|p| ((p - c).transpose() * inv * (p - c))[0]).fold(0.0, f64::max);
    if worst > 1.0 {
        shape *= worst;
    }
    (c, shape)
}

/// Raises every eigenvalue of a symmetric shape matrix to at least `floor`.
pub fn floor_eigenvalues(shape: &Matrix3<f64>, floor: f64) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*shape);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor)));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn ellipsoid_volume(shape: &Matrix3<f64>) -> f64 {
    4.0 / 3.0 * std::f64::consts::PI * shape.determinant().max(0.0).sqrt()
}

/// Keys of every region a segment passes through, found by sampling at
/// `samples` evenly spaced parameters and bisecting between any two
/// neighbouring samples whose keys differ until the interval is below `floor`.
pub fn sampled_keys<K: Ord + Clone>(key: impl Fn(f64) -> K, t0: f64, t1: f64, samples: usize, floor: f64) -> BTreeSet<K> {
    fn refine<K: Ord + Clone>(key: &dyn Fn(f64) -> K, a: f64, ka: &K, b: f64, kb: &K, floor: f64, out: &mut BTreeSet<K>) {
        if ka == kb || b - a < floor {
            return;
        }
        let m = 0.5 * (a + b);
        let km = key(m);
        out.insert(km.clone());
        refine(key, a, ka, m, &km, floor, out);
        refine(key, m, &km, b, kb, floor, out);
    }
    let mut out = BTreeSet::new();
    let ts: Vec<f64> = (0..samples).map(|i| t0 + (t1 - t0) * (i as f64 + 0.5) / samples as f64).collect();
    let keys: Vec<K> = ts.iter().map(|&t| key(t)).collect();
    out.extend(keys.iter().cloned());
    for i in 1..ts.len() {
        refine(&key, ts[i - 1], &keys[i - 1], ts[i], &keys[i], floor, &mut out);
    }
    // The half-sample slivers at both ends.
    refine(&key, t0 + floor, &key(t0 + floor), ts[0], &keys[0], floor, &mut out);
    out.insert(key(t0 + floor));
    let last = ts.len() - 1;
    refine(&key, ts[last], &keys[last], t1 - floor, &key(t1 - floor), floor, &mut out);
    out.insert(key(t1 - floor));
    out
}

/// Parameter interval where `origin + t·dir` lies inside the box `[lo, hi]³`.
pub fn clip_to_box(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t1 > t0).then_some((t0, t1))
}
