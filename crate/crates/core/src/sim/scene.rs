use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::shapes::Shape;
use super::SimError;
use crate::geometry::{CalibrationFile, CameraIntrinsics, RigidTransform};
use crate::scene_graph::Relation;
use crate::task_memory::SubtaskNode;

pub const SCENE_VERSION: u32 = 1;
/// Surface sample spacing for contact checks.
pub const CONTACT_RESOLUTION: f64 = 0.001;
/// Gap below which two objects are in contact.
pub const CONTACT_GAP: f64 = 0.002;
/// Gap below which two objects are nearby.
pub const NEARBY_GAP: f64 = 0.1;
/// How far a bore extends outward past its mouth.
const BORE_OVERSHOOT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Part {
    pub label: u32,
    pub shape: Shape,
    /// Pose relative to the owning primitive.
    #[serde(default)]
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub id: String,
    pub category: String,
    pub shape: Shape,
    #[serde(default)]
    pub pose: RigidTransform,
    #[serde(default)]
    pub body_label: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_components: Vec<Part>,
    #[serde(default)]
    pub graspable: bool,
    #[serde(default = "yes")]
    pub task_relevant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<[u8; 3]>,
    #[serde(skip)]
    samples: OnceLock<Vec<Vector3<f64>>>,
}

fn yes() -> bool {
    true
}

impl PartialEq for Primitive {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.category == other.category
            && self.shape == other.shape
            && self.pose == other.pose
            && self.body_label == other.body_label
            && self.sub_components == other.sub_components
            && self.graspable == other.graspable
            && self.task_relevant == other.task_relevant
            && self.color == other.color
    }
}

impl Primitive {
    pub fn new(id: &str, category: &str, shape: Shape, pose: RigidTransform) -> Self {
        Primitive {
            id: id.to_string(),
            category: category.to_string(),
            shape,
            pose,
            body_label: 0,
            sub_components: Vec::new(),
            graspable: false,
            task_relevant: true,
            color: None,
            samples: OnceLock::new(),
        }
    }

    pub fn graspable(mut self) -> Self {
        self.graspable = true;
        self
    }

    pub fn background(mut self) -> Self {
        self.task_relevant = false;
        self
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// `(label, shape, world pose)` for the body and every sub-component.
    pub fn parts(&self) -> impl Iterator<Item = (u32, &Shape, RigidTransform)> + '_ {
        std::iter::once((self.body_label, &self.shape, self.pose))
            .chain(self.sub_components.iter().map(|p| (p.label, &p.shape, self.pose.compose(&p.pose))))
    }

    /// Nearest hit `(t, sub_label)` along a world ray.
    pub fn ray_hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u32)> {
        let mut best: Option<(f64, u32)> = None;
        for (label, shape, pose) in self.parts() {
            let inv = pose.inverse();
            if let Some(t) = shape.ray_hit(&inv.transform_point(o), &inv.transform_vector(d)) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, label));
                }
            }
        }
        best
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.parts().map(|(_, s, pose)| s.sdf(&pose.inverse().transform_point(p))).fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.sdf(p) < 0.0
    }

    /// `max_{x ∈ primitive} x·dir` in world coordinates.
    pub fn support(&self, dir: &Vector3<f64>) -> f64 {
        self.parts()
            .map(|(_, s, pose)| pose.translation.dot(dir) + s.support(&(pose.rotation.transpose() * dir)))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// World axis-aligned bounding box.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for (_, s, pose) in self.parts() {
            let h = pose.rotation.abs() * s.half_extents();
            lo = lo.inf(&(pose.translation - h));
            hi = hi.sup(&(pose.translation + h));
        }
        (lo, hi)
    }

    /// Surface samples in the primitive's own frame, cached.
    pub fn local_samples(&self) -> &[Vector3<f64>] {
        self.samples.get_or_init(|| {
            let mut out = self.shape.surface_samples(CONTACT_RESOLUTION);
            for p in &self.sub_components {
                out.extend(p.shape.surface_samples(CONTACT_RESOLUTION).iter().map(|x| p.pose.transform_point(x)));
            }
            out
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.id.is_empty() || self.category.is_empty() {
            return Err(SimError::InvalidScene("primitive needs id and category".into()));
        }
        if !self.shape.is_valid() || self.sub_components.iter().any(|p| !p.shape.is_valid()) {
            return Err(SimError::InvalidScene(format!("primitive {:?} has a degenerate shape", self.id)));
        }
        self.pose.validate().map_err(|e| SimError::InvalidScene(format!("{}: {e}", self.id)))?;
        for p in &self.sub_components {
            p.pose.validate().map_err(|e| SimError::InvalidScene(format!("{}: {e}", self.id)))?;
        }
        Ok(())
    }
}

/// A cylindrical bore cut into a host primitive. Bores affect contact only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Socket {
    pub id: String,
    pub host: String,
    /// Center of the bore opening.
    pub mouth: [f64; 3],
    /// Insertion direction, pointing into the bore.
    pub axis: [f64; 3],
    pub radius: f64,
    pub depth: f64,
    /// Accepted distance between the inserted part's center and its seat.
    pub tolerance: f64,
}

impl Socket {
    pub fn mouth(&self) -> Vector3<f64> {
        Vector3::from(self.mouth)
    }

    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.axis).normalize()
    }

    /// Signed distance to the bore solid (extended outward past the mouth).
    pub fn bore_sdf(&self, p: &Vector3<f64>) -> f64 {
        let a = self.axis();
        let rel = p - self.mouth();
        let s = rel.dot(&a);
        let radial = (rel - a * s).norm();
        let mid = 0.5 * (self.depth - BORE_OVERSHOOT);
        let half = 0.5 * (self.depth + BORE_OVERSHOOT);
        let dr = radial - self.radius;
        let dz = (s - mid).abs() - half;
        (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt() + dr.max(dz).min(0.0)
    }

    /// Center position of a fully seated part.
    pub fn seat_for(&self, part: &Primitive) -> Vector3<f64> {
        let a = self.axis();
        let reach = part.support(&a) - part.center().dot(&a);
        self.mouth() + a * (self.depth - reach)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub id: String,
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
}

impl Region {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half_extents[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Insertion {
    pub object: String,
    pub socket: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Placement {
    pub object: String,
    pub region: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub description: String,
    #[serde(default)]
    pub insertions: Vec<Insertion>,
    #[serde(default)]
    pub placements: Vec<Placement>,
    /// Explicit plan; when absent one is derived from insertions and placements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<SubtaskNode>>,
}

impl TaskSpec {
    /// Objects and goals named by the task.
    pub fn named_objects(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for i in &self.insertions {
            out.insert(i.object.clone());
        }
        for p in &self.placements {
            out.insert(p.object.clone());
        }
        for n in self.plan.iter().flatten() {
            out.insert(n.target_object.clone());
        }
        out
    }
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub version: u32,
    pub name: String,
    pub camera: CalibrationFile,
    pub effector: [f64; 3],
    pub safe_height: f64,
    #[serde(default)]
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub sockets: Vec<Socket>,
    #[serde(default)]
    pub regions: Vec<Region>,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub index: usize,
    /// Primitive pose in the effector frame.
    pub relative: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub effector_pose: RigidTransform,
    pub camera_mount: RigidTransform,
    pub intrinsics: CameraIntrinsics,
    pub rng_seed: u64,
    pub sockets: Vec<Socket>,
    pub regions: Vec<Region>,
    pub task: TaskSpec,
    pub safe_height: f64,
    pub attached: Option<Attachment>,
}

impl SimScene {
    pub fn from_file(file: SceneFile) -> Result<Self, SimError> {
        if file.version != SCENE_VERSION {
            return Err(SimError::InvalidScene(format!("unsupported scene version {}", file.version)));
        }
        let intrinsics = file.camera.intrinsics().map_err(|e| SimError::InvalidScene(e.to_string()))?;
        let camera_mount = file.camera.mount().map_err(|e| SimError::InvalidScene(e.to_string()))?;
        let scene = SimScene {
            name: file.name,
            primitives: file.primitives,
            effector_pose: RigidTransform::from_translation(file.effector[0], file.effector[1], file.effector[2]),
            camera_mount,
            intrinsics,
            rng_seed: file.seed,
            sockets: file.sockets,
            regions: file.regions,
            task: file.task,
            safe_height: file.safe_height,
            attached: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let file: SceneFile = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_file(&self) -> SceneFile {
        let e = self.effector();
        SceneFile {
            version: SCENE_VERSION,
            name: self.name.clone(),
            camera: CalibrationFile::from_parts(&self.intrinsics, &self.camera_mount),
            effector: [e.x, e.y, e.z],
            safe_height: self.safe_height,
            seed: self.rng_seed,
            primitives: self.primitives.clone(),
            sockets: self.sockets.clone(),
            regions: self.regions.clone(),
            task: self.task.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut ids = BTreeSet::new();
        for p in &self.primitives {
            p.validate()?;
            if !ids.insert(p.id.as_str()) {
                return Err(SimError::InvalidScene(format!("duplicate primitive id {:?}", p.id)));
            }
        }
        for s in &self.sockets {
            if self.index_of(&s.host).is_none() {
                return Err(SimError::InvalidScene(format!("socket {:?} names unknown host {:?}", s.id, s.host)));
            }
            let axis = Vector3::from(s.axis);
            if !(axis.norm() > 1e-9 && s.radius > 0.0 && s.depth > 0.0 && s.tolerance > 0.0) {
                return Err(SimError::InvalidScene(format!("socket {:?} has invalid geometry", s.id)));
            }
        }
        for i in &self.task.insertions {
            if self.index_of(&i.object).is_none() || self.socket(&i.socket).is_none() {
                return Err(SimError::InvalidScene(format!("insertion {:?} → {:?} does not resolve", i.object, i.socket)));
            }
        }
        for p in &self.task.placements {
            if self.index_of(&p.object).is_none() || self.region(&p.region).is_none() {
                return Err(SimError::InvalidScene(format!("placement {:?} → {:?} does not resolve", p.object, p.region)));
            }
        }
        if !(self.safe_height.is_finite() && self.effector().iter().all(|x| x.is_finite())) {
            return Err(SimError::InvalidScene("non-finite effector or safe height".into()));
        }
        Ok(())
    }

    pub fn effector(&self) -> Vector3<f64> {
        self.effector_pose.translation
    }

    pub fn camera_pose(&self) -> RigidTransform {
        self.effector_pose.compose(&self.camera_mount)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.primitives.iter().position(|p| p.id == id)
    }

    pub fn primitive(&self, id: &str) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }

    pub fn socket(&self, id: &str) -> Option<&Socket> {
        self.sockets.iter().find(|s| s.id == id)
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    pub fn attached_id(&self) -> Option<&str> {
        self.attached.as_ref().map(|a| self.primitives[a.index].id.as_str())
    }

    /// Signed distance used for contact: the primitive minus its bores.
    pub fn collision_sdf(&self, index: usize, p: &Vector3<f64>) -> f64 {
        let prim = &self.primitives[index];
        let mut d = prim.sdf(p);
        for s in self.sockets.iter().filter(|s| s.host == prim.id) {
            d = d.max(-s.bore_sdf(p));
        }
        d
    }

    /// Ground-truth relation between two primitives.
    pub fn relation_truth(&self, a: &str, b: &str) -> Option<Relation> {
        let (pa, pb) = (self.primitive(a)?, self.primitive(b)?);
        if pb.contains(&pa.center()) || pa.contains(&pb.center()) {
            return Some(Relation::Containing);
        }
        let gap = gap_between(pa, pb);
        Some(if gap <= CONTACT_GAP {
            Relation::Contact
        } else if gap <= NEARBY_GAP {
            Relation::Nearby
        } else {
            Relation::Separate
        })
    }
}

fn aabb_gap(a: &(Vector3<f64>, Vector3<f64>), b: &(Vector3<f64>, Vector3<f64>)) -> f64 {
    let d = Vector3::from_fn(|i, _| (a.0[i] - b.1[i]).max(b.0[i] - a.1[i]).max(0.0));
    d.norm()
}

/// Surface gap between two primitives, sampled on the smaller one.
pub fn gap_between(a: &Primitive, b: &Primitive) -> f64 {
    let (ba, bb) = (a.aabb(), b.aabb());
    let coarse = aabb_gap(&ba, &bb);
    if coarse > NEARBY_GAP {
        return coarse;
    }
    let size = |bx: &(Vector3<f64>, Vector3<f64>)| (bx.1 - bx.0).norm();
    let (small, large) = if size(&ba) <= size(&bb) { (a, b) } else { (b, a) };
    small
        .local_samples()
        .iter()
        .map(|s| large.sdf(&small.pose.transform_point(s)))
        .fold(f64::INFINITY, f64::min)
        .max(0.0)
}
