use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b}");
}

fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
    assert!((a - b).norm() <= tol, "{a:?} vs {b:?}");
}

fn random_params(rng: &mut ChaCha8Rng) -> RotationParams6 {
    let mut v = [0.0; 6];
    for x in &mut v {
        *x = rng.random_range(-2.0..2.0);
    }
    RotationParams6(v)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxParams {
    BoxParams {
        center: Vec3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ),
        size: Vec3::new(
            rng.random_range(0.3..2.5),
            rng.random_range(0.3..2.5),
            rng.random_range(0.3..2.5),
        ),
        rot6: random_params(rng),
    }
}

#[test]
fn rotation_identity_params() {
    let r = rotation_from_params(&RotationParams6::identity());
    assert!(r.is_identity(1e-15));
}

#[test]
fn rotation_quarter_turn_about_z() {
    let r = rotation_from_params(&RotationParams6([1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
    assert_vec_close(r.apply(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 1.0, 0.0), 1e-12);
}

#[test]
fn rotation_normalizes_pairs_against_trig_oracle() {
    // (2,0,0,2,1,1) normalizes to angles (0, 90deg, 45deg); compose the
    // oracle from scalar trig directly.
    let r = rotation_from_params(&RotationParams6([2.0, 0.0, 0.0, 2.0, 1.0, 1.0]));
    let angles = [0.0f64, std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_4];
    let oracle = rot_x(angles[0].cos(), angles[0].sin())
        .mul(&rot_y(angles[1].cos(), angles[1].sin()))
        .mul(&rot_z(angles[2].cos(), angles[2].sin()));
    for row in 0..3 {
        for col in 0..3 {
            assert_close(
                r.matrix().at(row, col),
                oracle.at(row, col),
                1e-12,
                "rotation entry",
            );
        }
    }
}

#[test]
fn rotation_degenerate_pair_becomes_identity_angle() {
    let r = rotation_from_params(&RotationParams6([0.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
    assert!(r.is_identity(1e-15));
}

#[test]
fn rotation_always_orthonormal_det_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100_000 {
        let r = rotation_from_params(&random_params(&mut rng));
        assert!(r.matrix().is_orthonormal(1e-6));
        assert_close(r.matrix().det(), 1.0, 1e-6, "det");
    }
}

#[test]
fn corners_unit_box_at_origin() {
    let b = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    let corners = box_corners(&b);
    for (j, c) in corners.0.iter().enumerate() {
        let s = corner_signs(j);
        assert_vec_close(*c, s * 0.5, 1e-15);
    }
}

#[test]
fn corners_quarter_yaw_permutes_unit_cube() {
    let b = Box3D::with_yaw(Vec3::ZERO, Vec3::splat(1.0), std::f64::consts::FRAC_PI_2);
    let rotated = box_corners(&b);
    let plain = box_corners(&Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0)));
    // Same point set, different per-index assignment.
    for rc in &rotated.0 {
        assert!(plain.0.iter().any(|pc| (*pc - *rc).norm() < 1e-12));
    }
    // Corner 0 = R * (-0.5,-0.5,-0.5) = (0.5,-0.5,-0.5): a permutation, not identity.
    assert_vec_close(rotated.0[0], Vec3::new(0.5, -0.5, -0.5), 1e-12);
}

#[test]
fn corners_offset_box_extents() {
    let b = Box3D::axis_aligned(Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 1.0, 1.0));
    let corners = box_corners(&b);
    for c in &corners.0 {
        assert!(c.x.abs() < 1e-12 || (c.x - 2.0).abs() < 1e-12);
        assert!((c.y.abs() - 0.5).abs() < 1e-12);
        assert!((c.z.abs() - 0.5).abs() < 1e-12);
    }
}

#[test]
fn corners_centroid_and_edge_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let p = random_box(&mut rng);
        let b = p.to_box();
        let corners = box_corners(&b);
        assert_vec_close(corners.centroid(), b.center, 1e-9);
        // Edges along x: corner pairs differing only in bit 0, etc.
        for j in 0..8usize {
            for (bit, len) in [(1usize, b.size.x), (2, b.size.y), (4, b.size.z)] {
                if j & bit == 0 {
                    let d = (corners.0[j | bit] - corners.0[j]).norm();
                    assert_close(d, len, 1e-9, "edge length");
                }
            }
        }
    }
}

/// Independent scalar re-implementation of the corner loss used as oracle.
fn corner_loss_oracle(pred: &[BoxParams], gt: &[CornerSet], mask: &[bool]) -> f64 {
    let active: usize = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let corners = box_corners(&pred[i].to_box());
        for j in 0..8 {
            let d = (corners.0[j] - gt[i].0[j]).norm();
            total += if d <= CORNER_HUBER_DELTA {
                0.5 * d * d
            } else {
                CORNER_HUBER_DELTA * (d - 0.5 * CORNER_HUBER_DELTA)
            };
        }
    }
    total / (8.0 * active as f64)
}

#[test]
fn corner_loss_zero_for_exact_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred: Vec<BoxParams> = (0..5).map(|_| random_box(&mut rng)).collect();
    let gt: Vec<CornerSet> = pred.iter().map(|p| box_corners(&p.to_box())).collect();
    let mask = vec![true; 5];
    let (loss, grads) = corner_huber_loss(&pred, &gt, &mask).unwrap();
    assert_close(loss, 0.0, 1e-12, "exact loss");
    for g in grads {
        assert!(g.center.norm() < 1e-9 && g.size.norm() < 1e-9);
    }
}

#[test]
fn corner_loss_single_offset_corner_analytic() {
    let p = BoxParams {
        center: Vec3::ZERO,
        size: Vec3::splat(1.0),
        rot6: RotationParams6::identity(),
    };
    let mut gt = box_corners(&p.to_box());
    gt.0[3].x += 0.5;
    let (loss, _) = corner_huber_loss(&[p], &[gt], &[true]).unwrap();
    // Quadratic Huber branch: (1/8) * 0.5 * 0.5^2
    assert_close(loss, 0.015625, 1e-12, "analytic offset loss");
}

#[test]
fn corner_loss_empty_mask_is_zero_with_zero_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pred = vec![random_box(&mut rng)];
    let gt = vec![box_corners(&random_box(&mut rng).to_box())];
    let (loss, grads) = corner_huber_loss(&pred, &gt, &[false]).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads[0].center.norm(), 0.0);
}

#[test]
fn corner_loss_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..50 {
        let n = rng.random_range(1..8);
        let pred: Vec<BoxParams> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<CornerSet> = (0..n)
            .map(|_| box_corners(&random_box(&mut rng).to_box()))
            .collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let (loss, _) = corner_huber_loss(&pred, &gt, &mask).unwrap();
        assert_close(loss, corner_loss_oracle(&pred, &gt, &mask), 1e-12, "oracle");
    }
}

#[test]
fn corner_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let h = 1e-5;
    for _ in 0..10 {
        let n = rng.random_range(1..4);
        let mut pred: Vec<BoxParams> = (0..n).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<CornerSet> = (0..n)
            .map(|_| box_corners(&random_box(&mut rng).to_box()))
            .collect();
        let mask = vec![true; n];
        let (_, grads) = corner_huber_loss(&pred, &gt, &mask).unwrap();

        let mut check = |analytic: f64, poke: &mut dyn FnMut(&mut Vec<BoxParams>, f64)| {
            let mut eval = |delta: f64, pred: &mut Vec<BoxParams>| {
                poke(pred, delta);
                let (l, _) = corner_huber_loss(pred, &gt, &mask).unwrap();
                poke(pred, -delta);
                l
            };
            let numeric = (eval(h, &mut pred) - eval(-h, &mut pred)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "grad mismatch: analytic {analytic}, numeric {numeric}"
            );
        };

        for i in 0..n {
            for k in 0..3 {
                let g = grads[i].center.component(k);
                check(g, &mut |p, d| match k {
                    0 => p[i].center.x += d,
                    1 => p[i].center.y += d,
                    _ => p[i].center.z += d,
                });
                let g = grads[i].size.component(k);
                check(g, &mut |p, d| match k {
                    0 => p[i].size.x += d,
                    1 => p[i].size.y += d,
                    _ => p[i].size.z += d,
                });
            }
            for k in 0..6 {
                let g = grads[i].rot6[k];
                check(g, &mut |p, d| p[i].rot6.0[k] += d);
            }
        }
    }
}

#[test]
fn iou_axis_aligned_cases() {
    let unit = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    assert_close(iou_axis_aligned(&unit, &unit).unwrap(), 1.0, 1e-12, "self");
    let far = Box3D::axis_aligned(Vec3::new(5.0, 0.0, 0.0), Vec3::splat(1.0));
    assert_close(iou_axis_aligned(&unit, &far).unwrap(), 0.0, 1e-12, "disjoint");
    let shifted = Box3D::axis_aligned(Vec3::new(0.5, 0.0, 0.0), Vec3::splat(1.0));
    assert_close(
        iou_axis_aligned(&unit, &shifted).unwrap(),
        1.0 / 3.0,
        1e-12,
        "half overlap",
    );
    let rotated = Box3D::with_yaw(Vec3::ZERO, Vec3::splat(1.0), 0.3);
    assert!(iou_axis_aligned(&unit, &rotated).is_err());
}

#[test]
fn iou_oriented_identical_at_yaw() {
    let b = Box3D::with_yaw(Vec3::new(1.0, 2.0, 0.5), Vec3::new(2.0, 1.0, 1.0), 37f64.to_radians());
    let (v, exact) = iou_oriented_flagged(&b, &b);
    assert!(exact);
    assert_close(v, 1.0, 1e-12, "self");
}

#[test]
fn iou_oriented_forty_five_degree_octagon() {
    // Two unit squares at relative 45deg: intersection is a regular octagon
    // of area 2(sqrt(2)-1); IoU = sqrt(2)/2.
    let a = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    let b = Box3D::with_yaw(Vec3::ZERO, Vec3::splat(1.0), std::f64::consts::FRAC_PI_4);
    let expected = std::f64::consts::SQRT_2 / 2.0;
    assert_close(iou_oriented(&a, &b), expected, 1e-12, "octagon IoU");
    // Cross-check against the sampled oracle.
    assert_close(iou_sampled(&a, &b, 1_000_000), expected, 1e-2, "MC oracle");
}

#[test]
fn iou_oriented_touching_faces() {
    let a = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    let b = Box3D::axis_aligned(Vec3::new(1.0, 0.0, 0.0), Vec3::splat(1.0));
    assert_close(iou_oriented(&a, &b), 0.0, 1e-12, "touching");
}

#[test]
fn iou_oriented_symmetry_and_rigid_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let a = Box3D::with_yaw(
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
            Vec3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ),
            rng.random_range(-3.14..3.14),
        );
        let b = Box3D::with_yaw(
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0),
            Vec3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ),
            rng.random_range(-3.14..3.14),
        );
        let ab = iou_oriented(&a, &b);
        let ba = iou_oriented(&b, &a);
        assert_close(ab, ba, 1e-12, "symmetry");

        // Apply the same yaw + translation to both boxes.
        let dyaw = rng.random_range(-3.14..3.14);
        let shift = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.7);
        let rot = Rotation3::from_yaw(dyaw);
        let xform = |b: &Box3D| {
            Box3D::with_yaw(rot.apply(b.center) + shift, b.size, b.rotation.yaw() + dyaw)
        };
        let moved = iou_oriented(&xform(&a), &xform(&b));
        assert_close(ab, moved, 1e-9, "rigid invariance");
    }
}

#[test]
fn iou_oriented_general_rotation_falls_back_to_sampled() {
    let a = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    let tilted = Box3D::new(
        Vec3::ZERO,
        Vec3::splat(1.0),
        rotation_from_params(&RotationParams6([1.0, 0.4, 1.0, 0.0, 1.0, 0.0])),
    );
    let (v, exact) = iou_oriented_flagged(&a, &tilted);
    assert!(!exact);
    assert!(v > 0.5 && v < 1.0);
}

#[test]
fn iou_sampled_trivial_cases() {
    let unit = Box3D::axis_aligned(Vec3::ZERO, Vec3::splat(1.0));
    assert_close(iou_sampled(&unit, &unit, 1000), 1.0, 1e-12, "self");
    let far = Box3D::axis_aligned(Vec3::new(9.0, 0.0, 0.0), Vec3::splat(1.0));
    assert_close(iou_sampled(&unit, &far, 1000), 0.0, 1e-12, "disjoint");
}

#[test]
fn iou_sampled_agrees_with_axis_aligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let a = Box3D::axis_aligned(
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0),
            Vec3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ),
        );
        let b = Box3D::axis_aligned(
            Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0),
            Vec3::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
            ),
        );
        let exact = iou_axis_aligned(&a, &b).unwrap();
        let sampled = iou_sampled(&a, &b, 1_000_000);
        assert_close(exact, sampled, 1e-2, "cross oracle");
    }
}

#[test]
fn point_in_box_cases() {
    let b = Box3D::with_yaw(Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 1.0, 0.5), 0.4);
    assert!(point_in_box(b.center, &b));
    for c in &box_corners(&b).0 {
        assert!(point_in_box(*c, &b), "corner inclusive");
    }
    let outside = b.center + b.rotation.apply(Vec3::new(1.01 * 1.0, 0.0, 0.0));
    assert!(!point_in_box(outside, &b));
}

#[test]
fn canonicalize_center_and_corner() {
    let b = Box3D::with_yaw(Vec3::new(2.0, -1.0, 0.5), Vec3::new(4.0, 2.0, 1.5), 0.8);
    let (canon, _) = canonicalize_points(&[b.center], &b, 0.05).unwrap();
    assert_vec_close(canon[0], Vec3::splat(0.5), 1e-12);

    // Margin 0: a corner reaches the cube boundary along the longest axis.
    let corner = box_corners(&b).0[7];
    let (canon, _) = canonicalize_points(&[corner], &b, 0.0).unwrap();
    assert_close(canon[0].x, 1.0, 1e-12, "longest axis on boundary");
    assert!(canon[0].y < 1.0 && canon[0].z < 1.0);
}

#[test]
fn canonicalize_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let b = random_box(&mut rng).to_box();
    let frame = CanonicalFrame::new(&b, 0.05).unwrap();
    for _ in 0..100 {
        let p = Vec3::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
        );
        assert_vec_close(frame.to_scene(frame.to_canonical(p)), p, 1e-9);
    }
}
