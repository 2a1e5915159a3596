//! The gradient-check suite behind `gradcheck --all`: every layer's
//! backward pass and every composite loss compared against central finite
//! differences, in double precision at h = 1e-5.

use crate::detect::{
    build_vote_graph, graph_consolidate, graph_consolidate_backward, BackboneConfig,
    DetectionConfig, Detector, GtObject, SceneSample, ShapeSupervision,
};
use crate::geometry::{box_corners, corner_huber_loss, BoxParams, RotationParams6, Vec3};
use crate::nn::{
    gradcheck, relu_backward, relu_forward, softmax_cross_entropy, tanh_backward, tanh_forward,
    BatchNorm, BnMode, ConditionalBatchNorm, DenseTensor, HasParams, Linear, GRADCHECK_H,
    GRADCHECK_TOL,
};
use crate::shape::{prior_loss, DecoderConfig, EncoderConfig, SdfDecoder, ShapeEncoder};
use crate::sparse::{precompute_neighbors, SparseTensor, SubmanifoldConv, VoxelKey};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl CheckResult {
    pub fn passes(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

fn result(name: &str, report: crate::nn::GradCheckReport) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.checked,
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor {
    let n = shape.iter().product();
    DenseTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn probe_weights(shape: &[usize]) -> DenseTensor {
    let n: usize = shape.iter().product();
    DenseTensor::from_vec(
        shape.to_vec(),
        (0..n).map(|i| ((i as f64) * 0.43 + 0.17).sin()).collect(),
    )
}

fn dot(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central-difference check of every trainable coordinate of a cloneable
/// model against analytic gradients, parallel over coordinates. `stride`
/// subsamples (1 = every coordinate).
pub fn parallel_param_gradcheck<M, F>(
    model: &M,
    analytic: &[f64],
    stride: usize,
    eval: F,
) -> CheckResult
where
    M: HasParams + Clone + Sync,
    F: Fn(&M) -> f64 + Sync,
{
    let n = analytic.len();
    let indices: Vec<usize> = (0..n).step_by(stride.max(1)).collect();
    let errs: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let perturbed = |delta: f64| -> f64 {
                let mut work = model.clone();
                let mut off = 0;
                for p in work.params_mut() {
                    let len = p.value.len();
                    if i < off + len {
                        p.value.data_mut()[i - off] += delta;
                        break;
                    }
                    off += len;
                }
                eval(&work)
            };
            let numeric = (perturbed(GRADCHECK_H) - perturbed(-GRADCHECK_H)) / (2.0 * GRADCHECK_H);
            let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
            (analytic[i] - numeric).abs() / denom
        })
        .collect();
    CheckResult {
        name: String::new(),
        max_rel_err: errs.iter().cloned().fold(0.0, f64::max),
        coords_checked: indices.len(),
    }
}

/// Moves zero-initialized tensors (biases) off exactly zero so the loss is
/// differentiable at the probe point: with zero biases, conv outputs at
/// voxels whose whole neighborhood carries zero features sit exactly on the
/// ReLU kink and central differences straddle it.
fn randomize_zero_params(model: &mut impl HasParams, rng: &mut ChaCha8Rng) {
    for p in model.params_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn flatten_grads(model: &mut impl HasParams) -> Vec<f64> {
    let mut out = Vec::new();
    for p in model.params_mut() {
        out.extend_from_slice(p.grad.data());
    }
    out
}

fn check_linear(rng: &mut ChaCha8Rng) -> CheckResult {
    let fc = Linear::new("fc", 5, 4, rng);
    let x = random_tensor(vec![6, 5], rng);
    let c = probe_weights(&[6, 4]);
    let mut work = fc.clone();
    work.zero_grads();
    let (_, cache) = work.forward(&x).unwrap();
    let dx = work.backward(&cache, &c).unwrap();

    let mut flat: Vec<f64> = Vec::new();
    flat.extend_from_slice(work.w.value.data());
    flat.extend_from_slice(work.b.value.data());
    flat.extend_from_slice(x.data());
    let mut analytic: Vec<f64> = Vec::new();
    analytic.extend_from_slice(work.w.grad.data());
    analytic.extend_from_slice(work.b.grad.data());
    analytic.extend_from_slice(dx.data());
    let report = gradcheck(
        |v| {
            let mut probe = fc.clone();
            probe.w.value = DenseTensor::from_vec(vec![5, 4], v[..20].to_vec());
            probe.b.value = DenseTensor::from_vec(vec![4], v[20..24].to_vec());
            let xt = DenseTensor::from_vec(vec![6, 5], v[24..].to_vec());
            dot(&probe.forward(&xt).unwrap().0, &c)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("fc", report)
}

fn check_activations(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let x = random_tensor(vec![4, 6], rng);
    let c = probe_weights(&[4, 6]);
    let mut out = Vec::new();

    let dx = relu_backward(&x, &c);
    let mut flat = x.data().to_vec();
    let report = gradcheck(
        |v| dot(&relu_forward(&DenseTensor::from_vec(vec![4, 6], v.to_vec())), &c),
        &mut flat,
        dx.data(),
        GRADCHECK_H,
    );
    out.push(result("relu", report));

    let y = tanh_forward(&x);
    let dx = tanh_backward(&y, &c);
    let mut flat = x.data().to_vec();
    let report = gradcheck(
        |v| dot(&tanh_forward(&DenseTensor::from_vec(vec![4, 6], v.to_vec())), &c),
        &mut flat,
        dx.data(),
        GRADCHECK_H,
    );
    out.push(result("tanh", report));
    out
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut bn = BatchNorm::new("bn", 3);
    bn.gamma.value = random_tensor(vec![3], rng);
    bn.beta.value = random_tensor(vec![3], rng);
    let x = random_tensor(vec![7, 3], rng);
    let c = probe_weights(&[7, 3]);
    let mut work = bn.clone();
    work.zero_grads();
    let (_, cache) = work.forward(&x, BnMode::Train).unwrap();
    let dx = work.backward(&cache, &c).unwrap();
    let mut flat: Vec<f64> = Vec::new();
    flat.extend_from_slice(work.gamma.value.data());
    flat.extend_from_slice(work.beta.value.data());
    flat.extend_from_slice(x.data());
    let mut analytic: Vec<f64> = Vec::new();
    analytic.extend_from_slice(work.gamma.grad.data());
    analytic.extend_from_slice(work.beta.grad.data());
    analytic.extend_from_slice(dx.data());
    let report = gradcheck(
        |v| {
            let mut probe = bn.clone();
            probe.gamma.value = DenseTensor::from_vec(vec![3], v[..3].to_vec());
            probe.beta.value = DenseTensor::from_vec(vec![3], v[3..6].to_vec());
            let xt = DenseTensor::from_vec(vec![7, 3], v[6..].to_vec());
            dot(&probe.forward(&xt, BnMode::Train).unwrap().0, &c)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("batchnorm", report)
}

fn check_conditional_batchnorm(rng: &mut ChaCha8Rng) -> CheckResult {
    let cbn = ConditionalBatchNorm::new("cbn", 3, 2, rng);
    let x = random_tensor(vec![6, 3], rng);
    let e = random_tensor(vec![6, 2], rng);
    let c = probe_weights(&[6, 3]);
    let mut work = cbn.clone();
    work.zero_grads();
    let (_, cache) = work.forward(&x, &e, BnMode::Train).unwrap();
    let (_, de) = work.backward(&cache, &c).unwrap();
    let mut flat = e.data().to_vec();
    let report = gradcheck(
        |v| {
            let mut probe = cbn.clone();
            let et = DenseTensor::from_vec(vec![6, 2], v.to_vec());
            dot(&probe.forward(&x, &et, BnMode::Train).unwrap().0, &c)
        },
        &mut flat,
        de.data(),
        GRADCHECK_H,
    );
    result("conditional_batchnorm(embedding)", report)
}

fn check_softmax(rng: &mut ChaCha8Rng) -> CheckResult {
    let logits = random_tensor(vec![5, 4], rng);
    let labels: Vec<usize> = (0..5).map(|i| i % 4).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    let mut flat = logits.data().to_vec();
    let report = gradcheck(
        |v| {
            softmax_cross_entropy(&DenseTensor::from_vec(vec![5, 4], v.to_vec()), &labels)
                .unwrap()
                .0
        },
        &mut flat,
        grad.data(),
        GRADCHECK_H,
    );
    result("softmax_cross_entropy", report)
}

fn check_sparse_conv(rng: &mut ChaCha8Rng) -> CheckResult {
    let keys: Vec<VoxelKey> = {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        while out.len() < 25 {
            let k = VoxelKey::new(
                rng.random_range(-3..3),
                rng.random_range(-3..3),
                rng.random_range(-3..3),
            );
            if seen.insert(k) {
                out.push(k);
            }
        }
        out
    };
    let m = keys.len();
    let features = random_tensor(vec![m, 2], rng);
    let tensor = SparseTensor {
        coords: keys,
        features: features.clone(),
        stride: 1,
        origin: Vec3::ZERO,
        voxel_size: 0.5,
    };
    let nbrs = precompute_neighbors(&tensor);
    let conv = SubmanifoldConv::new("conv", 2, 3, rng);
    let c = probe_weights(&[m, 3]);

    let mut work = conv.clone();
    work.zero_grads();
    let dx = work.backward(&features, &nbrs, &c).unwrap();
    let mut flat: Vec<f64> = Vec::new();
    flat.extend_from_slice(work.weights.value.data());
    flat.extend_from_slice(work.bias.value.data());
    flat.extend_from_slice(features.data());
    let mut analytic: Vec<f64> = Vec::new();
    analytic.extend_from_slice(work.weights.grad.data());
    analytic.extend_from_slice(work.bias.grad.data());
    analytic.extend_from_slice(dx.data());
    let w_len = 27 * 2 * 3;
    let report = gradcheck(
        |v| {
            let mut probe = conv.clone();
            probe.weights.value = DenseTensor::from_vec(vec![27, 2, 3], v[..w_len].to_vec());
            probe.bias.value = DenseTensor::from_vec(vec![3], v[w_len..w_len + 3].to_vec());
            let xt = DenseTensor::from_vec(vec![m, 2], v[w_len + 3..].to_vec());
            dot(&probe.forward(&xt, &nbrs).unwrap(), &c)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("submanifold_conv", report)
}

/// Corner Huber loss (Eq.-1 style) through the rotation/corner chain.
fn check_corner_loss(rng: &mut ChaCha8Rng) -> CheckResult {
    let n = 4;
    let make = |rng: &mut ChaCha8Rng| BoxParams {
        center: Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
        size: Vec3::new(
            rng.random_range(0.4..2.0),
            rng.random_range(0.4..2.0),
            rng.random_range(0.4..2.0),
        ),
        rot6: RotationParams6([
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ]),
    };
    let pred: Vec<BoxParams> = (0..n).map(|_| make(rng)).collect();
    let gt: Vec<crate::geometry::CornerSet> =
        (0..n).map(|_| box_corners(&make(rng).to_box())).collect();
    let mask = vec![true; n];
    let (_, grads) = corner_huber_loss(&pred, &gt, &mask).unwrap();

    let to_flat = |params: &[BoxParams]| -> Vec<f64> {
        params
            .iter()
            .flat_map(|p| {
                let mut v = p.center.to_array().to_vec();
                v.extend_from_slice(&p.size.to_array());
                v.extend_from_slice(&p.rot6.0);
                v
            })
            .collect()
    };
    let from_flat = |flat: &[f64]| -> Vec<BoxParams> {
        flat.chunks(12)
            .map(|c| BoxParams {
                center: Vec3::new(c[0], c[1], c[2]),
                size: Vec3::new(c[3], c[4], c[5]),
                rot6: RotationParams6(c[6..12].try_into().unwrap()),
            })
            .collect()
    };
    let mut flat = to_flat(&pred);
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| {
            let mut v = g.center.to_array().to_vec();
            v.extend_from_slice(&g.size.to_array());
            v.extend_from_slice(&g.rot6);
            v
        })
        .collect();
    let report = gradcheck(
        |v| corner_huber_loss(&from_flat(v), &gt, &mask).unwrap().0,
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("corner_huber_loss(chain)", report)
}

fn check_consolidation(rng: &mut ChaCha8Rng) -> CheckResult {
    let n = 10;
    let centers: Vec<Vec3> = (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            )
        })
        .collect();
    let graph = build_vote_graph(&centers, 4).unwrap();
    let attrs = random_tensor(vec![n, 3], rng);
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
    let c = probe_weights(&[n, 3]);
    let (_, tape) = graph_consolidate(&attrs, &graph, &weights, 2).unwrap();
    let (dattrs, dweights) = graph_consolidate_backward(&tape, &graph, &weights, &c).unwrap();

    let mut flat: Vec<f64> = attrs.data().to_vec();
    flat.extend_from_slice(&weights);
    let mut analytic = dattrs.data().to_vec();
    analytic.extend_from_slice(&dweights);
    let report = gradcheck(
        |v| {
            let at = DenseTensor::from_vec(vec![n, 3], v[..n * 3].to_vec());
            let wt = v[n * 3..].to_vec();
            let (out, _) = graph_consolidate(&at, &graph, &wt, 2).unwrap();
            dot(&out, &c)
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("graph_consolidation", report)
}

fn check_sign_loss_through_decoder(rng: &mut ChaCha8Rng) -> CheckResult {
    let decoder = SdfDecoder::new(
        DecoderConfig {
            embed_dim: 4,
            hidden: 8,
            blocks: 2,
        },
        rng,
    );
    let n = 6;
    let queries = DenseTensor::from_vec(
        vec![n, 3],
        (0..n * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let e = random_tensor(vec![n, 4], rng);
    let targets: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();

    let mut work = decoder.clone();
    work.zero_grads();
    let (pred, tape) = work.forward(&queries, &e, BnMode::Train).unwrap();
    let (_, dpred) = prior_loss(&pred, &targets).unwrap();
    let (_, de) = work.backward(&tape, &dpred).unwrap();

    let mut analytic = flatten_grads(&mut work);
    analytic.extend_from_slice(de.data());
    let param_count = analytic.len() - e.len();
    let mut flat: Vec<f64> = Vec::new();
    {
        let mut me = decoder.clone();
        for p in me.params_mut() {
            flat.extend_from_slice(p.value.data());
        }
    }
    flat.extend_from_slice(e.data());
    let report = gradcheck(
        |v| {
            let mut probe = decoder.clone();
            let mut off = 0;
            for p in probe.params_mut() {
                let len = p.value.len();
                p.value.data_mut().copy_from_slice(&v[off..off + len]);
                off += len;
            }
            let et = DenseTensor::from_vec(vec![n, 4], v[param_count..].to_vec());
            let (pred, _) = probe.forward(&queries, &et, BnMode::Train).unwrap();
            prior_loss(&pred, &targets).unwrap().0
        },
        &mut flat,
        &analytic,
        GRADCHECK_H,
    );
    result("sign_loss(decoder+embedding)", report)
}

fn check_encoder(rng: &mut ChaCha8Rng, stride: usize) -> CheckResult {
    let encoder = ShapeEncoder::new(
        EncoderConfig {
            channel_plan: vec![(2, 3), (3, 4)],
            embed_dim: 3,
            grid_resolution: 8,
            fc_before_pool: true,
        },
        rng,
    );
    let points: Vec<Vec3> = (0..40)
        .map(|_| {
            Vec3::new(
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            )
        })
        .collect();
    let probe = probe_weights(&[1, 3]);
    let mut work = encoder.clone();
    work.zero_grads();
    let (_, tape) = work.forward(&points, BnMode::Train).unwrap();
    work.backward(&tape, &probe).unwrap();
    let analytic = flatten_grads(&mut work);
    let mut check = parallel_param_gradcheck(&encoder, &analytic, stride, |enc| {
        let mut probe_enc = enc.clone();
        let (e, _) = probe_enc.forward(&points, BnMode::Train).unwrap();
        dot(&e, &probe)
    });
    check.name = "shape_encoder(params)".into();
    check
}

/// Fixed tiny scene for the end-to-end detection check.
fn gradcheck_scene() -> SceneSample {
    let gt = vec![
        GtObject {
            box3d: crate::geometry::Box3D::with_yaw(
                Vec3::new(0.6, 0.4, 0.5),
                Vec3::new(1.6, 1.1, 1.0),
                0.4,
            ),
            class_id: 1,
        },
        GtObject {
            box3d: crate::geometry::Box3D::with_yaw(
                Vec3::new(4.0, 3.0, 0.45),
                Vec3::new(1.2, 0.9, 0.9),
                -0.8,
            ),
            class_id: 2,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut positions = Vec::new();
    // A few points inside each box, a few in the background.
    for object in &gt {
        for _ in 0..5 {
            let local = Vec3::new(
                rng.random_range(-0.4..0.4) * object.box3d.size.x,
                rng.random_range(-0.4..0.4) * object.box3d.size.y,
                rng.random_range(-0.4..0.4) * object.box3d.size.z,
            );
            positions.push(object.box3d.center + object.box3d.rotation.apply(local));
        }
    }
    for _ in 0..6 {
        positions.push(Vec3::new(
            rng.random_range(-2.0..6.0),
            rng.random_range(-2.0..6.0),
            rng.random_range(0.0..0.1),
        ));
    }
    SceneSample { positions, gt }
}

/// End-to-end detection loss gradcheck (corner pre/post, classification,
/// and the shape sign term) over every detector parameter at the given
/// subsampling stride.
pub fn check_detection_end_to_end(stride: usize, with_shape: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = DetectionConfig {
        num_classes: 2,
        // Activate the shape term on the tiny scene.
        min_shape_points: if with_shape { 3 } else { usize::MAX },
        ..Default::default()
    };
    let mut detector = Detector::new(BackboneConfig::desk(), cfg, &mut rng);
    randomize_zero_params(&mut detector, &mut rng);
    let scene = gradcheck_scene();
    let shape_ctx = if with_shape {
        let mut decoder = SdfDecoder::new(DecoderConfig::desk(), &mut rng);
        randomize_zero_params(&mut decoder, &mut rng);
        Some(ShapeSupervision {
            decoder,
            delta: 0.1,
            symmetry_classes: vec![2],
            ground_z: 0.0,
        })
    } else {
        None
    };

    // Labels and graph topology are per-iteration constants; pin them so
    // finite differences probe the smooth function the gradient describes.
    let pinned = detector.pin_discrete(&scene, BnMode::Eval)?;
    let mut work = detector.clone();
    work.zero_grads();
    let mut shape_work = shape_ctx.as_ref().map(|s| ShapeSupervision {
        decoder: s.decoder.clone(),
        delta: s.delta,
        symmetry_classes: s.symmetry_classes.clone(),
        ground_z: s.ground_z,
    });
    work.loss_and_backward_pinned(&scene, shape_work.as_mut(), BnMode::Eval, Some(&pinned))?;
    let analytic = flatten_grads(&mut work);

    let mut check = parallel_param_gradcheck(&detector, &analytic, stride, |det| {
        det.loss_only(&scene, shape_ctx.as_ref(), BnMode::Eval, Some(&pinned))
            .expect("loss evaluation")
            .total
    });
    check.name = if with_shape {
        "detection_loss_e2e(+shape)".into()
    } else {
        "detection_loss_e2e".into()
    };
    Ok(check)
}

/// Runs the whole suite. `thorough` checks every coordinate of the
/// end-to-end losses; otherwise large parameter sets are subsampled.
pub fn run_gradcheck_suite(thorough: bool) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut results = vec![check_linear(&mut rng)];
    results.extend(check_activations(&mut rng));
    results.push(check_batchnorm(&mut rng));
    results.push(check_conditional_batchnorm(&mut rng));
    results.push(check_softmax(&mut rng));
    results.push(check_sparse_conv(&mut rng));
    results.push(check_corner_loss(&mut rng));
    results.push(check_consolidation(&mut rng));
    results.push(check_sign_loss_through_decoder(&mut rng));
    results.push(check_encoder(&mut rng, if thorough { 1 } else { 7 }));
    results.push(check_detection_end_to_end(if thorough { 1 } else { 53 }, false)?);
    results.push(check_detection_end_to_end(if thorough { 13 } else { 97 }, true)?);
    Ok(results)
}
