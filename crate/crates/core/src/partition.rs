//! Three-zone cubic discretization of the workspace and ray-based pixel
//! registration.
//!
//! Cube boundaries sit at integer multiples of the zone's edge length measured
//! from `origin`; intervals are half-open, so a point on a boundary belongs to
//! the higher cube. Elements are identified by `(zone, integer cell)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Observation;

/// A cell counts as traversed when the ray spends more than this fraction of
/// an edge length inside it.
pub const MIN_SEGMENT_FRACTION: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid zone config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Zone {
    Near,
    Mid,
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoneConfig {
    pub r1: f64,
    pub r2: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub max_range: f64,
    pub origin: [f64; 3],
}

impl Default for ZoneConfig {
    fn default() -> Self {
        Self { r1: 0.3, r2: 1.0, l1: 0.005, l2: 0.02, l3: 0.08, max_range: 3.0, origin: [0.0; 3] }
    }
}

impl ZoneConfig {
    pub fn validate(&self) -> Result<(), PartitionError> {
        let err = |m: &str| Err(PartitionError::InvalidConfig(m.to_string()));
        if !(self.r1 > 0.0 && self.r1 < self.r2) {
            return err("require 0 < r1 < r2");
        }
        if !(self.l1 > 0.0 && self.l1 < self.l2 && self.l2 < self.l3) {
            return err("require 0 < l1 < l2 < l3");
        }
        if self.l1 > self.r1 {
            return err("require l1 <= r1");
        }
        if !(self.max_range > 0.0) {
            return err("max_range must be positive");
        }
        if !self.origin.iter().all(|x| x.is_finite()) {
            return err("origin must be finite");
        }
        Ok(())
    }

    pub fn with_origin(&self, origin: Vector3<f64>) -> Self {
        Self { origin: origin.into(), ..self.clone() }
    }

    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.origin)
    }

    pub fn edge(&self, zone: Zone) -> f64 {
        match zone {
            Zone::Near => self.l1,
            Zone::Mid => self.l2,
            Zone::Far => self.l3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ElementKey {
    pub zone: Zone,
    pub cell: [i64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialElement {
    pub key: ElementKey,
    pub center: Vector3<f64>,
    pub edge: f64,
}

impl SpatialElement {
    pub fn zone(&self) -> Zone {
        self.key.zone
    }

    fn from_cell(zone: Zone, cell: [i64; 3], cfg: &ZoneConfig) -> Self {
        let edge = cfg.edge(zone);
        let center = cfg.origin() + Vector3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + 0.5) * edge;
        Self { key: ElementKey { zone, cell }, center, edge }
    }
}

pub fn classify_zone(p: &Vector3<f64>, cfg: &ZoneConfig) -> Zone {
    let d = (p - cfg.origin()).norm();
    if d < cfg.r1 {
        Zone::Near
    } else if d < cfg.r2 {
        Zone::Mid
    } else {
        Zone::Far
    }
}

/// Integer cube coordinates of `p` on a lattice of edge `edge` anchored at `origin`.
pub fn lattice_cell(p: &Vector3<f64>, origin: &Vector3<f64>, edge: f64) -> [i64; 3] {
    let q = (p - origin) / edge;
    [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
}

pub fn element_of(p: &Vector3<f64>, cfg: &ZoneConfig) -> SpatialElement {
    let zone = classify_zone(p, cfg);
    SpatialElement::from_cell(zone, lattice_cell(p, &cfg.origin(), cfg.edge(zone)), cfg)
}

pub fn snap_cloud(points: &[Vector3<f64>], cfg: &ZoneConfig) -> Vec<Vector3<f64>> {
    points.iter().map(|p| element_of(p, cfg).center).collect()
}

/// A lattice cell crossed by a ray, with the ray parameters where it enters and leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellCrossing {
    pub cell: [i64; 3],
    pub t_entry: f64,
    pub t_exit: f64,
}

/// Incremental grid walk over a uniform lattice for `t ∈ (t0, t1)`.
///
/// `dir` need not be unit length; `t` is in units of `dir`. Cells the ray only
/// grazes (a corner or an edge) are skipped.
pub fn traverse_uniform(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t0: f64,
    t1: f64,
    lattice_origin: &Vector3<f64>,
    edge: f64,
) -> Vec<CellCrossing> {
    let mut out = Vec::new();
    if !(t1 > t0) {
        return out;
    }
    let start = origin + dir * t0;
    let local = (start - lattice_origin) / edge;
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = local[a].floor();
        cell[a] = f as i64;
        // Starting exactly on a boundary while moving down: the segment lies in the lower cube.
        if dir[a] < 0.0 && local[a] == f {
            cell[a] -= 1;
        }
        if dir[a] > 0.0 {
            step[a] = 1;
        } else if dir[a] < 0.0 {
            step[a] = -1;
        }
    }
    let boundary_t = |a: usize, c: i64, s: i64| -> f64 {
        if s == 0 {
            return f64::INFINITY;
        }
        let k = if s > 0 { c + 1 } else { c };
        (lattice_origin[a] + k as f64 * edge - origin[a]) / dir[a]
    };
    for a in 0..3 {
        t_max[a] = boundary_t(a, cell[a], step[a]);
    }
    let min_len = MIN_SEGMENT_FRACTION * edge / dir.norm();
    let budget = (((t1 - t0) * dir.norm() / edge).ceil() as usize + 2) * 3 + 8;
    let mut entry = t0;
    for _ in 0..budget {
        let (axis, next) = (0..3).map(|a| (a, t_max[a])).fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        let exit = next.min(t1);
        if exit - entry > min_len {
            out.push(CellCrossing { cell, t_entry: entry, t_exit: exit });
        }
        if next >= t1 {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] = boundary_t(axis, cell[axis], step[axis]);
        entry = entry.max(next);
    }
    out
}

/// Ray parameter intervals `(t_start, t_end, zone)` covering `(0, max_range)`.
pub fn zone_segments(origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64, cfg: &ZoneConfig) -> Vec<(f64, f64, Zone)> {
    let w = origin - cfg.origin();
    let a = dir.norm_squared();
    let b = dir.dot(&w);
    let mut cuts = vec![0.0, max_range];
    for r in [cfg.r1, cfg.r2] {
        let disc = b * b - a * (w.norm_squared() - r * r);
        if disc > 0.0 {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                if t > 0.0 && t < max_range {
                    cuts.push(t);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let mid = origin + dir * (0.5 * (w[0] + w[1]));
            (w[0], w[1], classify_zone(&mid, cfg))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraversedElement {
    pub element: SpatialElement,
    pub t_entry: f64,
}

/// All elements crossed by the ray `origin + t·dir`, `t ∈ (0, max_range)`,
/// deduplicated by key and ordered by first entry. The walk restarts at every
/// zone-boundary crossing because the cube size changes there.
pub fn traverse_ray(origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64, cfg: &ZoneConfig) -> Vec<TraversedElement> {
    let mut out: Vec<TraversedElement> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let lattice_origin = cfg.origin();
    for (t0, t1, zone) in zone_segments(origin, dir, max_range, cfg) {
        for c in traverse_uniform(origin, dir, t0, t1, &lattice_origin, cfg.edge(zone)) {
            let element = SpatialElement::from_cell(zone, c.cell, cfg);
            if seen.insert(element.key) {
                out.push(TraversedElement { element, t_entry: c.t_entry });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelRegistration {
    pub pixel: (u32, u32),
    pub traversed: Vec<TraversedElement>,
    /// Element holding the backprojected depth point; absent for invalid depth
    /// or hits beyond `max_range`.
    pub occupied: Option<SpatialElement>,
}

pub fn register_pixel(u: u32, v: u32, obs: &Observation, cfg: &ZoneConfig, max_range: f64) -> PixelRegistration {
    let ray_cam = obs.intrinsics.unproject(u as f64, v as f64);
    let dir = obs.cam_to_base.transform_vector(&ray_cam).normalize();
    let origin = obs.camera_center();
    let traversed = traverse_ray(&origin, &dir, max_range, cfg);
    let occupied = obs.depth_at(u, v).and_then(|d| {
        let p = obs.cam_to_base.transform_point(&(ray_cam * d));
        if (p - origin).norm() > max_range {
            return None;
        }
        let e = element_of(&p, cfg);
        traversed.iter().any(|t| t.element.key == e.key).then_some(e)
    });
    PixelRegistration { pixel: (u, v), traversed, occupied }
}
