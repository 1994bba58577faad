//! Analytic primitives in their local frame: ray intervals, signed distance,
//! support function and surface sampling. Cylinders run along local z.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Smallest accepted dimension in meters.
pub const MIN_DIMENSION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn is_valid(&self) -> bool {
        let ok = |x: f64| x.is_finite() && x > MIN_DIMENSION;
        match *self {
            Shape::Box { half_extents } => half_extents.iter().all(|&h| ok(h)),
            Shape::Sphere { radius } => ok(radius),
            Shape::Cylinder { radius, half_height } => ok(radius) && ok(half_height),
        }
    }

    /// Parameter interval `[t_in, t_out]` where `o + t·d` is inside the shape.
    pub fn ray_interval(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        match *self {
            Shape::Box { half_extents } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for a in 0..3 {
                    let h = half_extents[a];
                    if d[a] == 0.0 {
                        if o[a].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-h - o[a]) / d[a];
                    let t2 = (h - o[a]) / d[a];
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
                (lo <= hi).then_some((lo, hi))
            }
            Shape::Sphere { radius } => quadratic_interval(d.dot(d), 2.0 * o.dot(d), o.dot(o) - radius * radius),
            Shape::Cylinder { radius, half_height } => {
                let a = d.x * d.x + d.y * d.y;
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let (mut lo, mut hi) = if a == 0.0 {
                    if c > 0.0 {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    quadratic_interval(a, 2.0 * (o.x * d.x + o.y * d.y), c)?
                };
                if d.z == 0.0 {
                    if o.z.abs() > half_height {
                        return None;
                    }
                } else {
                    let t1 = (-half_height - o.z) / d.z;
                    let t2 = (half_height - o.z) / d.z;
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    /// First positive crossing of the surface along the ray.
    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (lo, hi) = self.ray_interval(o, d)?;
        if lo > 0.0 {
            Some(lo)
        } else if hi > 0.0 {
            Some(hi)
        } else {
            None
        }
    }

    /// Exact Euclidean signed distance (negative inside).
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Box { half_extents } => {
                let q = p.abs() - Vector3::from(half_extents);
                q.map(|x| x.max(0.0)).norm() + q.max().min(0.0)
            }
            Shape::Sphere { radius } => p.norm() - radius,
            Shape::Cylinder { radius, half_height } => {
                let dr = p.xy().norm() - radius;
                let dz = p.z.abs() - half_height;
                (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt() + dr.max(dz).min(0.0)
            }
        }
    }

    /// `max_{x ∈ shape} x·dir`.
    pub fn support(&self, dir: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Box { half_extents } => (0..3).map(|a| dir[a].abs() * half_extents[a]).sum(),
            Shape::Sphere { radius } => radius * dir.norm(),
            Shape::Cylinder { radius, half_height } => dir.z.abs() * half_height + radius * dir.xy().norm(),
        }
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        match *self {
            Shape::Box { half_extents } => Vector3::from(half_extents),
            Shape::Sphere { radius } => Vector3::repeat(radius),
            Shape::Cylinder { radius, half_height } => Vector3::new(radius, radius, half_height),
        }
    }

    /// Points on the surface no farther than `spacing` from their neighbours.
    pub fn surface_samples(&self, spacing: f64) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        match *self {
            Shape::Box { half_extents: h } => {
                for a in 0..3 {
                    let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                    let nb = steps(2.0 * h[b], spacing);
                    let nc = steps(2.0 * h[c], spacing);
                    for sign in [-1.0, 1.0] {
                        for i in 0..=nb {
                            for j in 0..=nc {
                                let mut p = Vector3::zeros();
                                p[a] = sign * h[a];
                                p[b] = -h[b] + 2.0 * h[b] * i as f64 / nb as f64;
                                p[c] = -h[c] + 2.0 * h[c] * j as f64 / nc as f64;
                                out.push(p);
                            }
                        }
                    }
                }
            }
            Shape::Sphere { radius } => {
                let n = ((4.0 * PI * radius * radius) / (spacing * spacing)).ceil().max(64.0) as usize;
                let golden = PI * (3.0 - 5f64.sqrt());
                for i in 0..n {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * i as f64;
                    out.push(Vector3::new(r * th.cos(), r * th.sin(), z) * radius);
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let nt = ring_count(radius, spacing);
                let nz = steps(2.0 * half_height, spacing);
                for k in 0..=nz {
                    let z = -half_height + 2.0 * half_height * k as f64 / nz as f64;
                    for i in 0..nt {
                        let th = 2.0 * PI * i as f64 / nt as f64;
                        out.push(Vector3::new(radius * th.cos(), radius * th.sin(), z));
                    }
                }
                let nr = steps(radius, spacing);
                for z in [-half_height, half_height] {
                    out.push(Vector3::new(0.0, 0.0, z));
                    for k in 1..nr {
                        let rho = radius * k as f64 / nr as f64;
                        let n = ring_count(rho, spacing).min(nt);
                        for i in 0..n {
                            let th = 2.0 * PI * i as f64 / n as f64;
                            out.push(Vector3::new(rho * th.cos(), rho * th.sin(), z));
                        }
                    }
                }
            }
        }
        out
    }
}

fn steps(length: f64, spacing: f64) -> usize {
    (length / spacing).ceil().max(1.0) as usize
}

fn ring_count(radius: f64, spacing: f64) -> usize {
    ((2.0 * PI * radius / spacing).ceil() as usize).max(64)
}

/// Real-root interval of `a t² + b t + c ≤ 0` with `a > 0`.
fn quadratic_interval(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return Some((0.0, 0.0));
    }
    let (t1, t2) = (q / a, c / q);
    Some((t1.min(t2), t1.max(t2)))
}
