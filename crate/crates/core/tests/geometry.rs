mod common;

use nalgebra::{Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use provlm::geometry::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 520.0, 319.5, 239.5, 640, 480).unwrap()
}

fn homogeneous(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
    m
}

fn arb_transform() -> impl Strategy<Value = RigidTransform> {
    any::<u64>().prop_map(|s| common::random_rigid(&mut ChaCha8Rng::seed_from_u64(s), 2.0))
}

proptest! {
    #[test]
    fn compose_matches_matrix_product(a in arb_transform(), b in arb_transform(), p in prop::array::uniform3(-3.0f64..3.0)) {
        let p = Vector3::from(p);
        let c = a.compose(&b);
        let h = homogeneous(&a) * homogeneous(&b) * Vector4::new(p.x, p.y, p.z, 1.0);
        prop_assert!((c.transform_point(&p) - h.xyz()).norm() < 1e-12);
        prop_assert!(c.validate().is_ok());
    }

    #[test]
    fn inverse_undoes_transform(a in arb_transform(), p in prop::array::uniform3(-3.0f64..3.0)) {
        let p = Vector3::from(p);
        prop_assert!((a.inverse().transform_point(&a.transform_point(&p)) - p).norm() < 1e-12);
    }

    #[test]
    fn backprojection_round_trips(u in 0.0f64..639.99, v in 0.0f64..479.99, d in 0.05f64..10.0, t in arb_transform()) {
        let p = backproject_pixel(u, v, d, &intr(), &t).unwrap();
        let (pu, pv, pd) = project_point(&p, &intr(), &t).unwrap();
        prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pd - d).abs() < 1e-9);
    }

    #[test]
    fn backprojection_is_linear_in_depth(u in 0.0f64..639.0, v in 0.0f64..479.0, d in 0.05f64..10.0) {
        let id = RigidTransform::identity();
        let unit = backproject_pixel(u, v, 1.0, &intr(), &id).unwrap();
        let scaled = backproject_pixel(u, v, d, &intr(), &id).unwrap();
        prop_assert!((scaled - unit * d).norm() < 1e-12 * d.max(1.0));
    }

    #[test]
    fn pixel_ray_is_unit_and_points_forward(u in 0.0f64..639.0, v in 0.0f64..479.0) {
        let r = pixel_ray(u, v, &intr()).unwrap();
        prop_assert!((r.norm() - 1.0).abs() < 1e-12);
        prop_assert!(r.z > 0.0);
    }

    #[test]
    fn centroid_lies_in_bounding_box(px in prop::collection::vec((0u32..640, 0u32..480), 1..50)) {
        let (cu, cv) = centroid_pixel(&px).unwrap();
        let (umin, umax) = (px.iter().map(|p| p.0).min().unwrap(), px.iter().map(|p| p.0).max().unwrap());
        let (vmin, vmax) = (px.iter().map(|p| p.1).min().unwrap(), px.iter().map(|p| p.1).max().unwrap());
        prop_assert!(cu >= umin as i64 && cu <= umax as i64 && cv >= vmin as i64 && cv <= vmax as i64);
    }
}

#[test]
fn rot_z_then_translate_example() {
    let r = RigidTransform::rot_z(std::f64::consts::FRAC_PI_2);
    let t = RigidTransform::from_translation(1.0, 0.0, 0.0);
    let c = r.compose(&t);
    assert!((c.translation - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    assert!((c.rotation - r.rotation).norm() < 1e-15);
}

#[test]
fn centroid_falls_back_to_nearest_valid_depth() {
    let intr = CameraIntrinsics::new(2.0, 2.0, 1.0, 1.0, 4, 4).unwrap();
    let mut depth = DepthMap::filled(4, 4, 0.0);
    depth.set(0, 0, 2.0);
    depth.set(3, 3, 4.0);
    let px = [(0, 0), (1, 1), (2, 2), (3, 3)];
    // Centroid (2, 2) has no depth; (3, 3) is the nearest pixel that does.
    let p = centroid_to_space(&px, &depth, &intr, &RigidTransform::identity()).unwrap();
    assert!((p - Vector3::new(4.0, 4.0, 4.0)).norm() < 1e-12);
    let none = DepthMap::filled(4, 4, 0.0);
    assert_eq!(centroid_to_space(&px, &none, &intr, &RigidTransform::identity()), Err(GeometryError::NoDepth));
    assert_eq!(centroid_to_space(&[], &none, &intr, &RigidTransform::identity()), Err(GeometryError::EmptyPixelSet));
}

#[test]
fn calibration_file_loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calib.json");
    let cal = CalibrationFile::from_parts(&intr(), &RigidTransform::from_translation(0.0, 0.0, 0.1));
    std::fs::write(&path, serde_json::to_string(&cal).unwrap()).unwrap();
    let back = CalibrationFile::load(&path).unwrap();
    assert_eq!(back.intrinsics().unwrap(), intr());
    assert_eq!(back.mount().unwrap().translation, Vector3::new(0.0, 0.0, 0.1));
    std::fs::write(&path, r#"{"fx":1}"#).unwrap();
    assert!(CalibrationFile::load(&path).is_err());
}
