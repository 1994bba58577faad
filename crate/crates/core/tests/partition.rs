mod common;

use std::collections::BTreeSet;

use nalgebra::Vector3;
use proptest::prelude::*;
use provlm::geometry::{CameraIntrinsics, DepthMap, Observation, RgbImage, RigidTransform};
use provlm::partition::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ZoneConfig {
    ZoneConfig::default()
}

fn arb_point(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

proptest! {
    #[test]
    fn snapped_point_lies_in_its_cube(p in arb_point(1.5)) {
        let e = element_of(&p, &cfg());
        let half = e.edge / 2.0;
        prop_assert!((p - e.center).iter().all(|d| d.abs() <= half + 1e-12));
        prop_assert_eq!(e.edge, cfg().edge(classify_zone(&p, &cfg())));
    }

    #[test]
    fn snapping_is_idempotent_within_a_zone(p in arb_point(1.5)) {
        let c = cfg();
        let e = element_of(&p, &c);
        let again = lattice_cell(&e.center, &c.origin(), e.edge);
        prop_assert_eq!(again, e.key.cell);
        if classify_zone(&e.center, &c) == e.zone() {
            prop_assert_eq!(element_of(&e.center, &c).key, e.key);
        }
    }

    #[test]
    fn near_points_snap_within_half_diagonal(p in arb_point(0.17)) {
        let c = cfg();
        prop_assume!(classify_zone(&p, &c) == Zone::Near);
        prop_assert!((element_of(&p, &c).center - p).norm() <= c.l1 * 3f64.sqrt() / 2.0 + 1e-12);
    }

    #[test]
    fn traversal_matches_sampling_across_zones(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = ZoneConfig { r1: 0.1, r2: 0.25, l1: 0.01, l2: 0.03, l3: 0.07, ..cfg() };
        let o = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
        let dir = common::random_unit(&mut rng);
        let range = rng.random_range(0.05..0.8);
        let got: BTreeSet<ElementKey> = traverse_ray(&o, &dir, range, &c).into_iter().map(|t| t.element.key).collect();
        let want = common::sampled_keys(|t| element_of(&(o + dir * t), &c).key, 0.0, range, 256, 1e-13);
        prop_assert_eq!(got, want);
    }
}

#[test]
fn boundary_distances_go_to_the_outer_zone() {
    let c = cfg();
    assert_eq!(classify_zone(&Vector3::new(0.1, 0.0, 0.0), &c), Zone::Near);
    assert_eq!(classify_zone(&Vector3::new(0.3, 0.0, 0.0), &c), Zone::Mid);
    assert_eq!(classify_zone(&Vector3::new(0.0, 1.0, 0.0), &c), Zone::Far);
}

#[test]
fn element_example() {
    let e = element_of(&Vector3::new(0.05, 0.05, 0.05), &cfg());
    assert_eq!(e.zone(), Zone::Near);
    assert_eq!(e.edge, 0.005);
    assert!((e.center - Vector3::new(0.0525, 0.0525, 0.0525)).norm() < 1e-12);
}

#[test]
fn traversal_is_ordered_and_unique() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let o = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let dir = common::random_unit(&mut rng);
        let out = traverse_ray(&o, &dir, 2.0, &cfg());
        assert!(out.windows(2).all(|w| w[0].t_entry <= w[1].t_entry));
        let keys: BTreeSet<_> = out.iter().map(|t| t.element.key).collect();
        assert_eq!(keys.len(), out.len());
    }
}

fn flat_observation(depth: f64) -> Observation {
    let intr = CameraIntrinsics::new(100.0, 100.0, 10.0, 10.0, 20, 20).unwrap();
    let cam = RigidTransform::from_translation(0.0, 0.0, 0.0);
    Observation::new(RgbImage::filled(20, 20, [0; 3]), DepthMap::filled(20, 20, depth), intr, cam, 0).unwrap()
}

#[test]
fn pixel_registration_marks_hit_and_traversed() {
    let obs = flat_observation(0.5);
    let c = cfg();
    let r = register_pixel(10, 10, &obs, &c, 3.0);
    let hit = r.occupied.expect("depth is valid");
    assert_eq!(hit.key, element_of(&Vector3::new(0.0, 0.0, 0.5), &c).key);
    assert!(r.traversed.iter().any(|t| t.element.key == hit.key));
    assert!(r.traversed.last().unwrap().t_entry > 2.9);
}

#[test]
fn pixel_registration_without_depth_or_beyond_range() {
    let c = cfg();
    let r = register_pixel(3, 4, &flat_observation(0.0), &c, 3.0);
    assert!(r.occupied.is_none());
    let r = register_pixel(10, 10, &flat_observation(5.0), &c, 3.0);
    assert!(r.occupied.is_none());
    assert!(!r.traversed.is_empty());
}
