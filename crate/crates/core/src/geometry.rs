//! Pinhole camera model, rigid transforms and pixel backprojection.
//!
//! Depth maps store z-depth along the optical axis (not ray length) and use
//! `0.0` to mark invalid pixels. Every consumer skips zero-depth pixels.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality / determinant tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth {0} (must be > 0 and finite)")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("no pixel in the set has a valid depth")]
    NoDepth,
    #[error("empty pixel set")]
    EmptyPixelSet,
    #[error("image dimensions do not match: {0}")]
    DimensionMismatch(String),
    #[error("calibration file: {0}")]
    Calibration(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    fn check_bounds(&self, u: f64, v: f64) -> Result<()> {
        if self.contains(u, v) {
            Ok(())
        } else {
            Err(GeometryError::OutOfBounds { u, v, width: self.width, height: self.height })
        }
    }

    /// `K⁻¹ [u, v, 1]ᵀ`, the camera-frame direction with unit z component.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rotation + translation, maps points from a child frame into a parent frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::new(x, y, z) }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
        Self { rotation, translation }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(Vector3::z(), angle, Vector3::zeros())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite entry".into()));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation not orthonormal (max |RᵀR - I| = {off:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidTransform(format!("det(R) = {det}, expected 1")));
        }
        Ok(())
    }

    /// `self · other` (apply `other` first).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Wire form: `{rotation: 9 floats row-major, translation: 3 floats}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    #[serde(default = "identity_rows")]
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

fn identity_rows() -> [f64; 9] {
    [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
}

impl From<&RigidTransform> for TransformRecord {
    fn from(t: &RigidTransform) -> Self {
        Self { rotation: t.rotation_row_major(), translation: t.translation.into() }
    }
}

impl TryFrom<&TransformRecord> for RigidTransform {
    type Error = GeometryError;

    fn try_from(rec: &TransformRecord) -> Result<Self> {
        RigidTransform::new(Matrix3::from_row_slice(&rec.rotation), Vector3::from(rec.translation))
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TransformRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = TransformRecord::deserialize(d)?;
        RigidTransform::try_from(&rec).map_err(serde::de::Error::custom)
    }
}

/// Row-major single-channel or multi-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<T>,
}

impl<T: Clone> ImageBuf<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }
}

impl<T> ImageBuf<T> {
    pub fn get(&self, u: u32, v: u32) -> &T {
        &self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, value: T) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = value;
    }

    pub fn in_bounds(&self, u: i64, v: i64) -> bool {
        u >= 0 && v >= 0 && u < self.width as i64 && v < self.height as i64
    }
}

pub type DepthMap = ImageBuf<f64>;
pub type RgbImage = ImageBuf<[u8; 3]>;

/// One RGB-D frame with its camera model and pose in the robot base frame.
#[derive(Debug, Clone)]
pub struct Observation {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub cam_to_base: RigidTransform,
    pub timestamp: u64,
}

impl Observation {
    pub fn new(
        rgb: RgbImage,
        depth: DepthMap,
        intrinsics: CameraIntrinsics,
        cam_to_base: RigidTransform,
        timestamp: u64,
    ) -> Result<Self> {
        if rgb.width != depth.width || rgb.height != depth.height {
            return Err(GeometryError::DimensionMismatch(format!(
                "rgb {}x{} vs depth {}x{}",
                rgb.width, rgb.height, depth.width, depth.height
            )));
        }
        if depth.width != intrinsics.width || depth.height != intrinsics.height {
            return Err(GeometryError::DimensionMismatch("depth map vs intrinsics".into()));
        }
        if let Some(bad) = depth.data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(GeometryError::InvalidDepth(*bad));
        }
        Ok(Self { rgb, depth, intrinsics, cam_to_base, timestamp })
    }

    /// Camera center in the base frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.cam_to_base.translation
    }

    pub fn depth_at(&self, u: u32, v: u32) -> Option<f64> {
        let d = *self.depth.get(u, v);
        (d > 0.0).then_some(d)
    }
}

/// `ᵇT_c = ᵇT_e · ᵉT_c`.
pub fn compose_extrinsics(base_to_ee: &RigidTransform, ee_to_cam: &RigidTransform) -> Result<RigidTransform> {
    base_to_ee.validate()?;
    ee_to_cam.validate()?;
    Ok(base_to_ee.compose(ee_to_cam))
}

/// `p_b = ᵇT_c · (d · K⁻¹ [u, v, 1]ᵀ)`.
pub fn backproject_pixel(
    u: f64,
    v: f64,
    d: f64,
    intr: &CameraIntrinsics,
    cam_to_base: &RigidTransform,
) -> Result<Vector3<f64>> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(GeometryError::InvalidDepth(d));
    }
    intr.check_bounds(u, v)?;
    Ok(cam_to_base.transform_point(&(intr.unproject(u, v) * d)))
}

/// Inverse of [`backproject_pixel`]: base-frame point to `(u, v, z-depth)`.
/// Returns `None` for points at or behind the camera plane.
pub fn project_point(p: &Vector3<f64>, intr: &CameraIntrinsics, cam_to_base: &RigidTransform) -> Option<(f64, f64, f64)> {
    let pc = cam_to_base.inverse().transform_point(p);
    if pc.z <= 0.0 {
        return None;
    }
    Some((intr.fx * pc.x / pc.z + intr.cx, intr.fy * pc.y / pc.z + intr.cy, pc.z))
}

/// Unit camera-frame direction of the ray through pixel `(u, v)`.
pub fn pixel_ray(u: f64, v: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>> {
    intr.check_bounds(u, v)?;
    Ok(intr.unproject(u, v).normalize())
}

/// Rounded mean pixel (ties round half-up).
pub fn centroid_pixel(pixels: &[(u32, u32)]) -> Option<(i64, i64)> {
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let (su, sv) = pixels.iter().fold((0.0, 0.0), |(a, b), &(u, v)| (a + u as f64, b + v as f64));
    Some(((su / n + 0.5).floor() as i64, (sv / n + 0.5).floor() as i64))
}

/// Backprojection of the centroid pixel of a pixel set.
///
/// When the centroid pixel has no valid depth, the nearest set pixel (squared
/// pixel distance, first in set order on ties) with valid depth is used instead.
pub fn centroid_to_space(
    pixels: &[(u32, u32)],
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    cam_to_base: &RigidTransform,
) -> Result<Vector3<f64>> {
    let (cu, cv) = centroid_pixel(pixels).ok_or(GeometryError::EmptyPixelSet)?;
    if depth.in_bounds(cu, cv) {
        let d = *depth.get(cu as u32, cv as u32);
        if d > 0.0 {
            return backproject_pixel(cu as f64, cv as f64, d, intr, cam_to_base);
        }
    }
    let mut best: Option<((u32, u32), i64)> = None;
    for &(u, v) in pixels {
        if !depth.in_bounds(u as i64, v as i64) || *depth.get(u, v) <= 0.0 {
            continue;
        }
        let dist = (u as i64 - cu).pow(2) + (v as i64 - cv).pow(2);
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some(((u, v), dist));
        }
    }
    let ((u, v), _) = best.ok_or(GeometryError::NoDepth)?;
    backproject_pixel(u as f64, v as f64, *depth.get(u, v), intr, cam_to_base)
}

/// Calibration file: intrinsics plus the camera-to-effector mount.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub ee_to_cam: TransformRecord,
}

impl CalibrationFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let cal: CalibrationFile = serde_json::from_str(text).map_err(|e| GeometryError::Calibration(e.to_string()))?;
        cal.intrinsics()?;
        cal.mount()?;
        Ok(cal)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Calibration(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn mount(&self) -> Result<RigidTransform> {
        RigidTransform::try_from(&self.ee_to_cam)
    }

    pub fn from_parts(intr: &CameraIntrinsics, ee_to_cam: &RigidTransform) -> Self {
        Self {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            ee_to_cam: TransformRecord::from(ee_to_cam),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn intr(fx: f64, cx: f64, cy: f64, w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, cx, cy, w, h).unwrap()
    }

    fn close(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    #[test]
    fn compose_identity_and_translations() {
        let id = RigidTransform::identity();
        assert_eq!(compose_extrinsics(&id, &id).unwrap(), id);
        let t = compose_extrinsics(
            &RigidTransform::from_translation(1.0, 0.0, 0.0),
            &RigidTransform::from_translation(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::new(1.0, 1.0, 0.0));
    }

    #[test]
    fn compose_rotation_then_translation_matches_homogeneous_product() {
        let rz = RigidTransform::rot_z(FRAC_PI_2);
        let tx = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let t = compose_extrinsics(&rz, &tx).unwrap();

        // Reference: explicit 4x4 homogeneous product.
        let to_h = |t: &RigidTransform| {
            let mut m = nalgebra::Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
            m
        };
        let h = to_h(&rz) * to_h(&tx);
        assert!((h.fixed_view::<3, 3>(0, 0) - t.rotation).abs().max() < 1e-15);
        assert!(close(&t.translation, &Vector3::new(0.0, 1.0, 0.0), 1e-15));
        assert!((t.rotation - rz.rotation).abs().max() < 1e-15);
    }

    #[test]
    fn compose_rejects_non_orthonormal() {
        let bad = RigidTransform { rotation: Matrix3::identity() * 1.01, translation: Vector3::zeros() };
        assert!(matches!(
            compose_extrinsics(&bad, &RigidTransform::identity()),
            Err(GeometryError::InvalidTransform(_))
        ));
        let reflect = RigidTransform {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            translation: Vector3::zeros(),
        };
        assert!(reflect.validate().is_err());
    }

    #[test]
    fn backproject_examples() {
        let id = RigidTransform::identity();
        let k = intr(500.0, 320.0, 240.0, 1280, 480);
        let p = backproject_pixel(320.0, 240.0, 2.0, &k, &id).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        let p = backproject_pixel(820.0, 240.0, 2.0, &k, &id).unwrap();
        // Pinhole oracle: x = (u - cx) d / fx.
        assert!(close(&p, &Vector3::new((820.0 - 320.0) * 2.0 / 500.0, 0.0, 2.0), 1e-15));
        assert!(close(&p, &Vector3::new(2.0, 0.0, 2.0), 1e-15));

        let unit = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 4, height: 4 };
        assert_eq!(backproject_pixel(0.0, 0.0, 1.0, &unit, &id).unwrap(), Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn backproject_errors() {
        let id = RigidTransform::identity();
        let k = intr(500.0, 320.0, 240.0, 640, 480);
        assert!(matches!(backproject_pixel(1.0, 1.0, 0.0, &k, &id), Err(GeometryError::InvalidDepth(_))));
        assert!(matches!(backproject_pixel(1.0, 1.0, -1.0, &k, &id), Err(GeometryError::InvalidDepth(_))));
        assert!(matches!(backproject_pixel(640.0, 1.0, 1.0, &k, &id), Err(GeometryError::OutOfBounds { .. })));
        assert!(matches!(backproject_pixel(-0.5, 1.0, 1.0, &k, &id), Err(GeometryError::OutOfBounds { .. })));
    }

    #[test]
    fn pixel_ray_examples() {
        let k = intr(500.0, 320.0, 240.0, 640, 480);
        assert_eq!(pixel_ray(320.0, 240.0, &k).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        let unit = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 4, height: 4 };
        let r = pixel_ray(1.0, 0.0, &unit).unwrap();
        assert!(close(&r, &(Vector3::new(1.0, 0.0, 1.0) / 2f64.sqrt()), 1e-12));
        let two = CameraIntrinsics { fx: 2.0, fy: 2.0, cx: 0.0, cy: 0.0, width: 4, height: 4 };
        let r = pixel_ray(2.0, 2.0, &two).unwrap();
        assert!(close(&r, &(Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt()), 1e-12));
        let r = pixel_ray(1.0, 1.0, &two).unwrap();
        assert!(close(&r, &(Vector3::new(1.0, 1.0, 2.0) / 6f64.sqrt()), 1e-12));
        assert!(pixel_ray(4.0, 0.0, &two).is_err());
    }

    #[test]
    fn centroid_examples() {
        let id = RigidTransform::identity();
        let k = intr(100.0, 10.0, 10.0, 21, 21);
        let mut depth = DepthMap::filled(21, 21, 1.0);
        let p = centroid_to_space(&[(10, 10)], &depth, &k, &id).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 1.0));
        let square = [(9, 9), (11, 9), (9, 11), (11, 11)];
        assert_eq!(centroid_to_space(&square, &depth, &k, &id).unwrap(), Vector3::new(0.0, 0.0, 1.0));

        // Ties round half-up: mean (9.5, 9.5) -> (10, 10).
        assert_eq!(centroid_pixel(&[(9, 9), (10, 10)]), Some((10, 10)));

        // Centroid pixel without depth falls back to the nearest valid set pixel.
        depth.set(10, 10, 0.0);
        depth.set(9, 9, 0.0);
        let p = centroid_to_space(&[(9, 9), (10, 10), (12, 10), (13, 10)], &depth, &k, &id).unwrap();
        // Centroid (11, 10) has depth 1; fallback is not triggered.
        assert!(close(&p, &Vector3::new(0.01, 0.0, 1.0), 1e-15));
        depth.set(11, 10, 0.0);
        let p = centroid_to_space(&[(9, 9), (10, 10), (12, 10), (13, 10)], &depth, &k, &id).unwrap();
        assert!(close(&p, &Vector3::new(0.02, 0.0, 1.0), 1e-15));

        let empty = DepthMap::filled(21, 21, 0.0);
        assert_eq!(centroid_to_space(&square, &empty, &k, &id), Err(GeometryError::NoDepth));
        assert_eq!(centroid_to_space(&[], &empty, &k, &id), Err(GeometryError::EmptyPixelSet));
    }

    #[test]
    fn calibration_round_trip() {
        let text = r#"{"fx": 200, "fy": 200, "cx": 100, "cy": 75, "width": 200, "height": 150,
            "ee_to_cam": {"rotation": [1,0,0, 0,-1,0, 0,0,-1], "translation": [0, 0, 0.2]}}"#;
        let cal = CalibrationFile::from_json(text).unwrap();
        let mount = cal.mount().unwrap();
        assert_eq!(mount.transform_vector(&Vector3::z()), Vector3::new(0.0, 0.0, -1.0));
        let back = serde_json::to_string(&cal).unwrap();
        let again = CalibrationFile::from_json(&back).unwrap();
        assert_eq!(again.mount().unwrap(), mount);

        let bad = text.replace("0,0,-1]", "0,0,1]");
        assert!(CalibrationFile::from_json(&bad).is_err());
    }
}
