use super::*;
use crate::geometry::{box_corners, point_in_box, Box3D, Vec3};
use crate::nn::{gradcheck, BnMode, DenseTensor, HasParams, GRADCHECK_H, GRADCHECK_TOL};
use crate::synth::{prior_shapes, PrimitiveShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_decoder(r: &mut ChaCha8Rng) -> SdfDecoder {
    SdfDecoder::new(
        DecoderConfig {
            embed_dim: 4,
            hidden: 8,
            blocks: 2,
        },
        r,
    )
}

fn random_tensor(shape: Vec<usize>, r: &mut ChaCha8Rng) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
}

/// Flattens all trainable parameters of a model into one vector.
fn flatten_params(model: &mut impl HasParams) -> Vec<f64> {
    let mut out = Vec::new();
    for p in model.params_mut() {
        out.extend_from_slice(p.value.data());
    }
    out
}

fn write_params(model: &mut impl HasParams, flat: &[f64]) {
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    assert_eq!(off, flat.len());
}

fn flatten_grads(model: &mut impl HasParams) -> Vec<f64> {
    let mut out = Vec::new();
    for p in model.params_mut() {
        out.extend_from_slice(p.grad.data());
    }
    out
}

#[test]
fn decoder_outputs_in_open_interval_and_deterministic() {
    let mut r = rng(1);
    let mut decoder = tiny_decoder(&mut r);
    let queries = DenseTensor::from_vec(vec![2, 3], vec![0.3, 0.4, 0.5, 0.3, 0.4, 0.5]);
    let e = random_tensor(vec![1, 4], &mut r);
    let (out, _) = decoder.forward(&queries, &e, BnMode::Eval).unwrap();
    assert!((out.at2(0, 0) - out.at2(1, 0)).abs() < 1e-15, "duplicated query");
    assert!(out.data().iter().all(|v| v.abs() < 1.0), "tanh range");

    let (again, _) = decoder.forward(&queries, &e, BnMode::Eval).unwrap();
    assert_eq!(out, again, "eval mode is deterministic");
}

#[test]
fn decoder_gradcheck_queries_embedding_params() {
    let mut r = rng(2);
    let decoder = tiny_decoder(&mut r);
    let n = 5;
    let queries = random_tensor(vec![n, 3], &mut r);
    let e = random_tensor(vec![n, 4], &mut r);
    let probe = random_tensor(vec![n, 1], &mut r);

    let scalar = |dec: &SdfDecoder, q: &DenseTensor, e: &DenseTensor| {
        let mut work = dec.clone();
        let (out, _) = work.forward(q, e, BnMode::Train).unwrap();
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut work = decoder.clone();
    work.zero_grads();
    let (_, tape) = work.forward(&queries, &e, BnMode::Train).unwrap();
    let (dq, de) = work.backward(&tape, &probe).unwrap();

    let mut q_flat = queries.data().to_vec();
    let report = gradcheck(
        |qv| scalar(&decoder, &DenseTensor::from_vec(vec![n, 3], qv.to_vec()), &e),
        &mut q_flat,
        dq.data(),
        GRADCHECK_H,
    );
    assert!(report.passes(GRADCHECK_TOL), "decoder dq: {report:?}");

    let mut e_flat = e.data().to_vec();
    let report = gradcheck(
        |ev| scalar(&decoder, &queries, &DenseTensor::from_vec(vec![n, 4], ev.to_vec())),
        &mut e_flat,
        de.data(),
        GRADCHECK_H,
    );
    assert!(report.passes(GRADCHECK_TOL), "decoder de: {report:?}");

    // All parameters at once.
    let analytic = flatten_grads(&mut work);
    let mut flat = flatten_params(&mut decoder.clone());
    let report = gradcheck(
        |pv| {
            let mut probe_dec = decoder.clone();
            write_params(&mut probe_dec, pv);
            scalar(&probe_dec, &queries, &e)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    assert!(report.passes(GRADCHECK_TOL), "decoder dparams: {report:?}");
}

#[test]
fn decoder_broadcast_embedding_matches_repeated_rows() {
    let mut r = rng(3);
    let mut decoder = tiny_decoder(&mut r);
    let n = 4;
    let queries = random_tensor(vec![n, 3], &mut r);
    let e1 = random_tensor(vec![1, 4], &mut r);
    let mut e_rep = DenseTensor::zeros(vec![n, 4]);
    for row in 0..n {
        e_rep.row_mut(row).copy_from_slice(e1.row(0));
    }
    let (a, _) = decoder.forward(&queries, &e1, BnMode::Eval).unwrap();
    let (b, _) = decoder.forward(&queries, &e_rep, BnMode::Eval).unwrap();
    assert_eq!(a, b);

    // Broadcast backward sums the per-row gradients.
    let probe = random_tensor(vec![n, 1], &mut r);
    let (_, t1) = decoder.forward(&queries, &e1, BnMode::Eval).unwrap();
    let (_, de1) = decoder.backward(&t1, &probe).unwrap();
    let (_, t2) = decoder.forward(&queries, &e_rep, BnMode::Eval).unwrap();
    let (_, de2) = decoder.backward(&t2, &probe).unwrap();
    for c in 0..4 {
        let summed: f64 = (0..n).map(|row| de2.at2(row, c)).sum();
        assert!((de1.at2(0, c) - summed).abs() < 1e-9);
    }
}

#[test]
fn decoder_checkpoint_round_trip_preserves_outputs() {
    let mut r = rng(4);
    let mut decoder = tiny_decoder(&mut r);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decoder.ckpt");
    let mut ckpt = crate::nn::Checkpoint::new();
    decoder.save(&mut ckpt);
    ckpt.save(&path).unwrap();

    let mut loaded = SdfDecoder::load(&crate::nn::Checkpoint::load(&path).unwrap()).unwrap();
    let queries = random_tensor(vec![6, 3], &mut r);
    let e = random_tensor(vec![1, 4], &mut r);
    let (a, _) = decoder.forward(&queries, &e, BnMode::Eval).unwrap();
    let (b, _) = loaded.forward(&queries, &e, BnMode::Eval).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-6, "f32 checkpoint round trip");
    }
}

fn tiny_encoder(r: &mut ChaCha8Rng) -> ShapeEncoder {
    ShapeEncoder::new(
        EncoderConfig {
            channel_plan: vec![(2, 3), (3, 4)],
            embed_dim: 3,
            grid_resolution: 8,
            fc_before_pool: true,
        },
        r,
    )
}

#[test]
fn encoder_is_permutation_invariant() {
    let mut r = rng(5);
    let mut encoder = tiny_encoder(&mut r);
    let points: Vec<Vec3> = (0..60)
        .map(|_| {
            Vec3::new(
                r.random_range(0.1..0.9),
                r.random_range(0.1..0.9),
                r.random_range(0.1..0.9),
            )
        })
        .collect();
    let mut shuffled = points.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    let (a, _) = encoder.forward(&points, BnMode::Eval).unwrap();
    let (b, _) = encoder.forward(&shuffled, BnMode::Eval).unwrap();
    assert_eq!(a, b, "embedding must not depend on point order");
}

#[test]
fn encoder_rejects_empty_input() {
    let mut r = rng(6);
    let mut encoder = tiny_encoder(&mut r);
    assert!(encoder.forward(&[], BnMode::Eval).is_err());
}

#[test]
fn encoder_gradcheck_all_params() {
    let mut r = rng(7);
    let encoder = tiny_encoder(&mut r);
    let points: Vec<Vec3> = (0..40)
        .map(|_| {
            Vec3::new(
                r.random_range(0.1..0.9),
                r.random_range(0.1..0.9),
                r.random_range(0.1..0.9),
            )
        })
        .collect();
    let probe = random_tensor(vec![1, 3], &mut r);

    let scalar = |enc: &ShapeEncoder| {
        let mut work = enc.clone();
        let (e, _) = work.forward(&points, BnMode::Train).unwrap();
        e.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut work = encoder.clone();
    work.zero_grads();
    let (_, tape) = work.forward(&points, BnMode::Train).unwrap();
    work.backward(&tape, &probe).unwrap();
    let analytic = flatten_grads(&mut work);

    let mut flat = flatten_params(&mut encoder.clone());
    let report = gradcheck(
        |pv| {
            let mut probe_enc = encoder.clone();
            write_params(&mut probe_enc, pv);
            scalar(&probe_enc)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    assert!(report.passes(GRADCHECK_TOL), "encoder dparams: {report:?}");
}

#[test]
fn encoder_pool_order_switch_changes_path_not_shape() {
    let mut r = rng(8);
    let mut literal = tiny_encoder(&mut r);
    let mut swapped = literal.clone();
    swapped.cfg.fc_before_pool = false;
    let points: Vec<Vec3> = (0..50)
        .map(|_| {
            Vec3::new(
                r.random_range(0.2..0.8),
                r.random_range(0.2..0.8),
                r.random_range(0.2..0.8),
            )
        })
        .collect();
    let (a, _) = literal.forward(&points, BnMode::Eval).unwrap();
    let (b, _) = swapped.forward(&points, BnMode::Eval).unwrap();
    assert_eq!(a.shape(), b.shape());
    // fc-then-average and average-then-fc agree exactly for a linear fc.
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-9, "linear fc commutes with averaging");
    }
}

#[test]
fn prior_query_targets_match_analytic_signs() {
    let shape = PrimitiveShape::Sphere { radius: 0.3 };
    let mut r = rng(9);
    let queries = sample_prior_queries(&shape, 200, 200, 0.05, &mut r);
    assert_eq!(queries.len(), 400);
    for q in &queries {
        assert_eq!(q.target, if shape.sdf(q.position) < 0.0 { -1.0 } else { 1.0 });
        assert!(q.position.x >= 0.0 && q.position.x <= 1.0);
    }
    // Center is inside, cube corner is outside.
    assert_eq!(if shape.sdf(Vec3::splat(0.5)) < 0.0 { -1.0 } else { 1.0 }, -1.0);
    assert_eq!(if shape.sdf(Vec3::ZERO) < 0.0 { -1.0 } else { 1.0 }, 1.0);
}

#[test]
fn uniform_query_inside_fraction_matches_volume() {
    let shape = PrimitiveShape::Sphere { radius: 0.3 };
    let mut r = rng(10);
    let n = 20_000;
    let queries = sample_prior_queries(&shape, 0, n, 0.05, &mut r);
    let inside = queries.iter().filter(|q| q.target < 0.0).count();
    let volume = 4.0 / 3.0 * std::f64::consts::PI * 0.3f64.powi(3);
    let p = volume / 1.0;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    let observed = inside as f64 / n as f64;
    assert!(
        (observed - p).abs() < 3.0 * sigma + 1e-9,
        "inside fraction {observed} vs volume {p} (3 sigma = {})",
        3.0 * sigma
    );
}

#[test]
fn ray_augment_analytic_case() {
    let queries = ray_augment(&[Vec3::new(0.9, 0.5, 0.5)], 0.1);
    assert_eq!(queries.len(), 2);
    assert!((queries[0].position - Vec3::new(0.8, 0.5, 0.5)).norm() < 1e-12);
    assert_eq!(queries[0].target, -1.0);
    assert!((queries[1].position - Vec3::new(1.0, 0.5, 0.5)).norm() < 1e-12);
    assert_eq!(queries[1].target, 1.0);
}

#[test]
fn ray_augment_properties() {
    let mut r = rng(11);
    let center = Vec3::splat(0.5);
    let points: Vec<Vec3> = (0..100)
        .map(|_| {
            Vec3::new(
                r.random_range(0.05..0.95),
                r.random_range(0.05..0.95),
                r.random_range(0.05..0.95),
            )
        })
        .collect();
    let queries = ray_augment(&points, 0.1);
    assert_eq!(queries.len(), points.len() * 2, "two queries per valid point");
    for (i, p) in points.iter().enumerate() {
        let inside = &queries[2 * i];
        assert!(inside.target == -1.0);
        assert!(
            (inside.position - center).norm() < (*p - center).norm(),
            "inside query strictly closer to center"
        );
    }
    // A point at the center is skipped.
    assert_eq!(ray_augment(&[center], 0.1).len(), 0);
}

#[test]
fn prior_loss_analytic_values_and_bound() {
    let targets = vec![1.0, -1.0, 1.0];
    let exact = DenseTensor::from_vec(vec![3, 1], targets.clone());
    let (loss, _) = prior_loss(&exact, &targets).unwrap();
    assert_eq!(loss, 0.0);

    let zeros = DenseTensor::zeros(vec![3, 1]);
    let (loss, _) = prior_loss(&zeros, &targets).unwrap();
    assert!((loss - 1.0).abs() < 1e-12, "sign^2 = 1");

    // Bounded by 4 for tanh outputs.
    let worst = DenseTensor::from_vec(vec![2, 1], vec![-0.999999, 0.999999]);
    let (loss, _) = prior_loss(&worst, &[1.0, -1.0]).unwrap();
    assert!(loss < 4.0);
}

#[test]
fn prior_loss_gradcheck() {
    let mut r = rng(12);
    let pred = random_tensor(vec![8, 1], &mut r);
    let targets: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let (_, grad) = prior_loss(&pred, &targets).unwrap();
    let mut flat = pred.data().to_vec();
    let report = gradcheck(
        |pv| {
            let pt = DenseTensor::from_vec(vec![8, 1], pv.to_vec());
            prior_loss(&pt, &targets).unwrap().0
        },
        &mut flat,
        grad.data(),
        GRADCHECK_H,
    );
    assert!(report.passes(GRADCHECK_TOL), "prior loss: {report:?}");
}

#[test]
fn preprocess_removes_ground_and_mirrors() {
    let b = Box3D::axis_aligned(Vec3::new(0.0, 0.0, 0.5), Vec3::new(2.0, 1.0, 1.0));
    let points = vec![
        Vec3::new(0.0, 0.2, 0.01),  // ground-level: dropped (below 5% of height)
        Vec3::new(0.3, 0.3, 0.6),   // kept
        Vec3::new(-0.4, 0.0, 0.9),  // kept, on the mirror plane
    ];
    let (no_sym, frame) = preprocess_observed(&points, &b, 0.0, false).unwrap();
    assert_eq!(no_sym.len(), 2);
    // Pure canonicalization for the kept points.
    assert!((no_sym[0] - frame.to_canonical(points[1])).norm() < 1e-12);

    let (with_sym, _) = preprocess_observed(&points, &b, 0.0, true).unwrap();
    assert_eq!(with_sym.len(), 4);
    // The plane point maps to itself under mirroring.
    let plane_point = frame.to_canonical(points[2]);
    assert!((with_sym[3] - plane_point).norm() < 1e-12);

    // Mirroring the augmented set again leaves it invariant (as a set).
    let mirrored_again: Vec<Vec3> = with_sym
        .iter()
        .map(|&p| Vec3::new(p.x, 1.0 - p.y, p.z))
        .collect();
    for p in &mirrored_again {
        assert!(
            with_sym.iter().any(|q| (*q - *p).norm() < 1e-12),
            "mirror involution"
        );
    }

    // All points removed -> error.
    let low = vec![Vec3::new(0.0, 0.0, 0.01)];
    assert!(preprocess_observed(&low, &b, 0.0, false).is_err());
}

#[test]
fn pool_embeddings_matches_scalar_oracle() {
    let mut r = rng(13);
    let per_point = random_tensor(vec![10, 4], &mut r);
    let membership = vec![vec![0, 3, 7], vec![2], vec![1, 1, 4, 9]];
    let pooled = pool_embeddings(&per_point, &membership).unwrap();
    for (obj, members) in membership.iter().enumerate() {
        for c in 0..4 {
            let mean: f64 = members.iter().map(|&i| per_point.at2(i, c)).sum::<f64>()
                / members.len() as f64;
            assert!((pooled.at2(obj, c) - mean).abs() < 1e-12);
        }
    }
    // Permutation invariance over members.
    let shuffled = vec![vec![7, 0, 3], vec![2], vec![9, 4, 1, 1]];
    let pooled2 = pool_embeddings(&per_point, &shuffled).unwrap();
    for (a, b) in pooled.data().iter().zip(pooled2.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    assert!(pool_embeddings(&per_point, &[vec![]]).is_err());

    // Backward distributes uniformly.
    let dout = random_tensor(vec![3, 4], &mut r);
    let dper = pool_embeddings_backward(&dout, &membership, 10);
    assert!((dper.at2(3, 2) - dout.at2(0, 2) / 3.0).abs() < 1e-12);
    assert!((dper.at2(2, 0) - dout.at2(1, 0)).abs() < 1e-12);
}

#[test]
fn marching_cubes_sphere_vertices_and_area() {
    let center = Vec3::splat(0.5);
    let mesh = marching_cubes(|p| (p - center).norm() - 0.3, 64);
    assert!(!mesh.is_empty());
    let tol = 1.5 / 64.0;
    for v in &mesh.vertices {
        let r = (*v - center).norm();
        assert!((r - 0.3).abs() <= tol, "vertex radius {r}");
    }
    let expected_area = 4.0 * std::f64::consts::PI * 0.3 * 0.3;
    let area = mesh.area();
    assert!(
        (area - expected_area).abs() / expected_area < 0.05,
        "area {area} vs {expected_area}"
    );
}

#[test]
fn marching_cubes_constant_field_is_empty() {
    let mesh = marching_cubes(|_| 1.0, 16);
    assert!(mesh.is_empty());
    let mesh = marching_cubes(|_| -1.0, 16);
    assert!(mesh.is_empty());
}

#[test]
fn marching_cubes_box_respects_analytic_sdf() {
    let shape = PrimitiveShape::Cuboid {
        half_extents: Vec3::new(0.3, 0.25, 0.2),
    };
    let mesh = marching_cubes(|p| shape.sdf(p), 48);
    assert!(!mesh.is_empty());
    let tol = 1.5 / 48.0;
    for v in &mesh.vertices {
        assert!(shape.sdf(*v).abs() <= tol);
    }
    // Vertices of the level set stay inside the gt box of the shape.
    let b = Box3D::axis_aligned(Vec3::splat(0.5), Vec3::new(0.62, 0.52, 0.42));
    for v in &mesh.vertices {
        assert!(point_in_box(*v, &b));
    }
    let _ = box_corners(&b);
}

#[test]
fn mesh_export_formats() {
    let mesh = marching_cubes(|p| (p - Vec3::splat(0.5)).norm() - 0.25, 12);
    let dir = tempfile::tempdir().unwrap();
    let obj_path = dir.path().join("m.obj");
    write_obj(&obj_path, &mesh).unwrap();
    let text = std::fs::read_to_string(&obj_path).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), mesh.vertices.len());
    assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), mesh.triangles.len());
    // OBJ indices are 1-based.
    assert!(!text.contains("f 0 "));

    let ply_path = dir.path().join("m.ply");
    write_ply(&ply_path, &mesh).unwrap();
    let bytes = std::fs::read(&ply_path).unwrap();
    assert!(bytes.starts_with(b"ply\nformat binary_little_endian"));
}

#[test]
fn chamfer_distance_basics() {
    let a = vec![Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)];
    assert_eq!(chamfer_distance(&a, &a), 0.0);
    let b = vec![Vec3::new(0.0, 0.5, 0.0), Vec3::new(1.0, 0.5, 0.0)];
    assert!((chamfer_distance(&a, &b) - 0.5).abs() < 1e-12);
    // Symmetry.
    assert_eq!(chamfer_distance(&a, &b), chamfer_distance(&b, &a));
}

#[test]
fn fit_shape_requires_minimum_points() {
    let mut r = rng(14);
    let mut decoder = tiny_decoder(&mut r);
    let few = vec![Vec3::splat(0.6); 3];
    let result = fit_shape(&few, &mut decoder, None, &FitConfig::default());
    assert!(result.is_err());
}

#[test]
fn fit_shape_decoder_params_stay_frozen() {
    let mut r = rng(15);
    let mut decoder = tiny_decoder(&mut r);
    let before = flatten_params(&mut decoder);
    let points: Vec<Vec3> = (0..40)
        .map(|_| {
            let d = Vec3::new(
                crate::nn::normal_sample(&mut r),
                crate::nn::normal_sample(&mut r),
                crate::nn::normal_sample(&mut r),
            )
            .normalized();
            Vec3::splat(0.5) + d * 0.3
        })
        .collect();
    let cfg = FitConfig {
        iterations: 10,
        ..Default::default()
    };
    let (embedding, losses) = fit_shape(&points, &mut decoder, None, &cfg).unwrap();
    assert_eq!(embedding.shape(), &[1, 4]);
    assert_eq!(losses.len(), 10);
    let after = flatten_params(&mut decoder);
    assert_eq!(before, after, "decoder must stay frozen");
}
