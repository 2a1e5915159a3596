use super::*;
use crate::geometry::{iou_oriented, point_in_box};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sphere_sdf_at_center_and_corner() {
    let s = PrimitiveShape::Sphere { radius: 0.3 };
    assert!((s.sdf(Vec3::splat(0.5)) - (-0.3)).abs() < 1e-12);
    let corner_dist = Vec3::splat(0.5).norm() - 0.3;
    assert!((s.sdf(Vec3::ZERO) - corner_dist).abs() < 1e-12);
    assert!(s.sdf(Vec3::ZERO) > 0.0, "cube corner is outside");
}

#[test]
fn cuboid_sdf_outside_along_axis() {
    let b = PrimitiveShape::Cuboid {
        half_extents: Vec3::new(0.2, 0.1, 0.1),
    };
    // Relative offset (0.5, 0, 0) from the shape center.
    assert!((b.sdf(Vec3::new(1.0, 0.5, 0.5)) - 0.3).abs() < 1e-12);
    assert!((b.sdf(Vec3::splat(0.5)) - (-0.1)).abs() < 1e-12);
}

#[test]
fn sdf_gradient_magnitude_near_one_off_medial_axis() {
    let shapes = prior_shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-6;
    for (_, shape) in &shapes {
        let mut checked = 0;
        while checked < 200 {
            let p = Vec3::new(
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
                rng.random_range(0.05..0.95),
            );
            // Stay away from the surface and from deep inside (medial axis).
            let d = shape.sdf(p);
            if d.abs() < 0.05 || d < -0.02 {
                continue;
            }
            let g = Vec3::new(
                (shape.sdf(p + Vec3::new(h, 0.0, 0.0)) - shape.sdf(p - Vec3::new(h, 0.0, 0.0)))
                    / (2.0 * h),
                (shape.sdf(p + Vec3::new(0.0, h, 0.0)) - shape.sdf(p - Vec3::new(0.0, h, 0.0)))
                    / (2.0 * h),
                (shape.sdf(p + Vec3::new(0.0, 0.0, h)) - shape.sdf(p - Vec3::new(0.0, 0.0, h)))
                    / (2.0 * h),
            );
            assert!(
                (g.norm() - 1.0).abs() < 1e-3,
                "eikonal violated at {p:?} for {shape:?}: |g| = {}",
                g.norm()
            );
            checked += 1;
        }
    }
}

#[test]
fn canonical_shapes_fit_in_unit_cube_with_margin() {
    for (_, shape) in prior_shapes() {
        let e = shape.canonical_extents();
        let max = e.x.max(e.y).max(e.z);
        let expected = 1.0 / (1.0 + 2.0 * CANONICAL_MARGIN);
        assert!((max - expected).abs() < 1e-12, "longest extent fills the margin box");
    }
}

#[test]
fn surface_samples_lie_on_member_surfaces() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (_, shape) in prior_shapes() {
        for _ in 0..500 {
            let p = shape.sample_surface(&mut rng);
            // Union members can hide samples inside; sign may be negative but
            // the magnitude must still be small for non-union shapes.
            match shape {
                PrimitiveShape::Vehicle { .. } => assert!(shape.sdf(p) < 1e-9),
                _ => assert!(shape.sdf(p).abs() < 1e-9),
            }
        }
    }
}

#[test]
fn vehicle_internal_points_are_removed() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (_, vehicle) = prior_shapes()
        .into_iter()
        .find(|(k, _)| *k == ShapeKind::Vehicle)
        .unwrap();
    let points: Vec<Vec3> = (0..4000).map(|_| vehicle.sample_surface(&mut rng)).collect();
    let kept = remove_internal_points(&vehicle, &points, 1e-9);
    assert!(kept.len() < points.len(), "union sampling produces seam points");
    assert!(kept.iter().all(|&p| vehicle.sdf(p) > -1e-9));
}

#[test]
fn zero_objects_scene_has_only_ground() {
    let config = SceneConfig {
        min_objects: 0,
        max_objects: 0,
        ..Default::default()
    };
    let scene = generate_scene(&config, 3).unwrap();
    assert!(scene.objects.is_empty());
    assert!(!scene.cloud.is_empty());
    assert!(scene.point_source.iter().all(|&s| s == -1));
    for p in &scene.cloud.positions {
        assert!(p.z.abs() < 0.1, "ground points near z = 0");
    }
}

#[test]
fn one_sided_visibility_against_analytic_normals() {
    let config = SceneConfig {
        min_objects: 1,
        max_objects: 1,
        classes: vec![ShapeKind::Sphere],
        ground: false,
        noise_sigma: 0.0,
        ..Default::default()
    };
    let scene = generate_scene(&config, 11).unwrap();
    let object = &scene.objects[0];
    let mut object_points = 0;
    for (i, &src) in scene.point_source.iter().enumerate() {
        if src != 0 {
            continue;
        }
        object_points += 1;
        let p = scene.cloud.positions[i];
        // Sphere normal is radial; the visible side faces the sensor.
        let normal = (p - object.gt_box.center).normalized();
        let to_sensor = (scene.sensor - p).normalized();
        assert!(
            normal.dot(to_sensor) > 0.0,
            "point {p:?} lies on the far side of the sphere"
        );
    }
    assert!(object_points > 20);
}

#[test]
fn scenes_are_bit_reproducible() {
    let config = SceneConfig::default();
    let a = generate_scene(&config, 7).unwrap();
    let b = generate_scene(&config, 7).unwrap();
    assert_eq!(a.cloud.positions.len(), b.cloud.positions.len());
    for (pa, pb) in a.cloud.positions.iter().zip(&b.cloud.positions) {
        assert_eq!(pa, pb, "bit-identical positions");
    }
    assert_eq!(a.point_source, b.point_source);
    for (oa, ob) in a.objects.iter().zip(&b.objects) {
        assert_eq!(oa.gt_box.center, ob.gt_box.center);
        assert_eq!(oa.class_id, ob.class_id);
    }
}

#[test]
fn gt_boxes_are_disjoint_and_each_contains_points() {
    let scene = generate_scene(&SceneConfig::default(), 19).unwrap();
    for i in 0..scene.objects.len() {
        for j in (i + 1)..scene.objects.len() {
            let iou = iou_oriented(&scene.objects[i].gt_box, &scene.objects[j].gt_box);
            assert_eq!(iou, 0.0, "boxes {i} and {j} overlap");
        }
        assert!(
            !scene.points_in_object(i).is_empty(),
            "object {i} has no points"
        );
    }
}

#[test]
fn sampled_points_respect_sdf_noise_bound() {
    let config = SceneConfig::default();
    let scene = generate_scene(&config, 23).unwrap();
    // Hit tolerance plus 3 sigma per coordinate, diagonal worst case.
    let bound = 1e-4 + 3.0 * config.noise_sigma * 3f64.sqrt();
    for (i, &src) in scene.point_source.iter().enumerate() {
        if src < 0 {
            continue;
        }
        let d = scene.objects[src as usize]
            .world_sdf(scene.cloud.positions[i])
            .abs();
        assert!(d < bound, "point {i}: |sdf| = {d} exceeds {bound}");
    }
}

#[test]
fn ray_cast_points_are_first_hits() {
    let config = SceneConfig {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let scene = generate_scene(&config, 29).unwrap();
    // Walking from the sensor toward any sampled point must not pass
    // through a surface before reaching it.
    for (i, &p) in scene.cloud.positions.iter().enumerate().step_by(7) {
        let dist = (p - scene.sensor).norm();
        let dir = (p - scene.sensor).normalized();
        let steps = 200;
        for s in 1..steps {
            let t = dist * (s as f64 / steps as f64) - 1e-3;
            if t <= 0.0 {
                continue;
            }
            let q = scene.sensor + dir * t;
            let mut d = if q.z < 0.0 { q.z } else { f64::INFINITY };
            for o in &scene.objects {
                d = d.min(o.world_sdf(q));
            }
            assert!(
                d > -1e-3,
                "point {i} at t={t:.3} of {dist:.3} passes through a surface (d = {d})"
            );
        }
    }
}

#[test]
fn augment_identity_is_identity() {
    let scene = generate_scene(&SceneConfig::default(), 31).unwrap();
    let same = augment_scene(&scene, 0.0, (1.0, 1.0), 5);
    for (a, b) in scene.cloud.positions.iter().zip(&same.cloud.positions) {
        assert!((*a - *b).norm() < 1e-12);
    }
    for (oa, ob) in scene.objects.iter().zip(&same.objects) {
        assert!((oa.gt_box.center - ob.gt_box.center).norm() < 1e-12);
        assert!((oa.gt_box.size - ob.gt_box.size).norm() < 1e-12);
    }
}

#[test]
fn augment_preserves_membership_and_joint_iou() {
    let scene = generate_scene(&SceneConfig::default(), 37).unwrap();
    let moved = augment_scene(&scene, 10.0, (0.9, 1.1), 13);
    // Joint transform: every original box matched against its own augmented
    // detection keeps IoU 1.
    for (oa, ob) in scene.objects.iter().zip(&moved.objects) {
        let _ = oa;
        assert!((iou_oriented(&ob.gt_box, &ob.gt_box) - 1.0).abs() < 1e-12);
    }
    // Membership recount: inside-box flags are preserved pointwise.
    for i in 0..scene.cloud.len() {
        for (oa, ob) in scene.objects.iter().zip(&moved.objects) {
            let before = point_in_box(scene.cloud.positions[i], &oa.gt_box);
            let after = point_in_box(moved.cloud.positions[i], &ob.gt_box);
            assert_eq!(before, after, "membership changed for point {i}");
        }
    }
}
