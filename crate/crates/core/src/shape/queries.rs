//! Supervision queries for the SDF prior and the weakly supervised fitting
//! path: near-surface/uniform sampling with sign targets, ray augmentation
//! around observed points, LIDAR-side preprocessing, and embedding pooling.

use crate::geometry::{canonicalize_points, Box3D, CanonicalFrame, Vec3};
use crate::nn::DenseTensor;
use crate::synth::{PrimitiveShape, CANONICAL_MARGIN};
use crate::{Error, Result};
use rand::Rng;

/// A canonical-cube query position with its supervision target (+-1 sign,
/// or 0 for surface-only constraints).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfQuery {
    pub position: Vec3,
    pub target: f64,
}

fn clamp_cube(p: Vec3) -> Vec3 {
    Vec3::new(p.x.clamp(0.0, 1.0), p.y.clamp(0.0, 1.0), p.z.clamp(0.0, 1.0))
}

fn sign_target(d: f64) -> f64 {
    if d < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Training queries for a shape with an exact SDF: `n_near` surface samples
/// with isotropic Gaussian jitter (sigma = `near_sigma`) plus `n_uniform`
/// uniform cube samples, each labeled with the sign of the analytic SDF at
/// its final (clamped) position.
pub fn sample_prior_queries(
    shape: &PrimitiveShape,
    n_near: usize,
    n_uniform: usize,
    near_sigma: f64,
    rng: &mut impl Rng,
) -> Vec<SdfQuery> {
    let mut queries = Vec::with_capacity(n_near + n_uniform);
    for _ in 0..n_near {
        let p = shape.sample_surface(rng)
            + Vec3::new(
                crate::nn::normal_sample(rng) * near_sigma,
                crate::nn::normal_sample(rng) * near_sigma,
                crate::nn::normal_sample(rng) * near_sigma,
            );
        let p = clamp_cube(p);
        queries.push(SdfQuery {
            position: p,
            target: sign_target(shape.sdf(p)),
        });
    }
    for _ in 0..n_uniform {
        let p = Vec3::new(
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        );
        queries.push(SdfQuery {
            position: p,
            target: sign_target(shape.sdf(p)),
        });
    }
    queries
}

/// Ray augmentation: for each observed canonical point `p`, emit a -1 query
/// at distance `delta` toward the cube center and a +1 query at `delta`
/// beyond it, along the center-to-point ray. Queries leaving the cube are
/// clamped and kept; points coincident with the center are skipped.
pub fn ray_augment(points: &[Vec3], delta: f64) -> Vec<SdfQuery> {
    assert!(delta > 0.0, "delta must be positive");
    let center = Vec3::splat(0.5);
    let mut out = Vec::with_capacity(points.len() * 2);
    for &p in points {
        let radial = p - center;
        let dist = radial.norm();
        if dist < 1e-12 {
            continue;
        }
        let u = radial * (1.0 / dist);
        out.push(SdfQuery {
            position: clamp_cube(p - u * delta),
            target: -1.0,
        });
        out.push(SdfQuery {
            position: clamp_cube(p + u * delta),
            target: 1.0,
        });
    }
    out
}

/// Surface-only constraints: each observed point as a zero-SDF target (the
/// regime ray augmentation exists to fix).
pub fn surface_queries(points: &[Vec3]) -> Vec<SdfQuery> {
    points
        .iter()
        .map(|&p| SdfQuery {
            position: clamp_cube(p),
            target: 0.0,
        })
        .collect()
}

/// Prepares observed world points of one object for shape supervision:
/// drops points lower than `ground_fraction` of the box height above
/// `ground_z`, optionally mirrors across the object's longitudinal plane,
/// and canonicalizes into the unit cube.
pub fn preprocess_observed(
    points: &[Vec3],
    object_box: &Box3D,
    ground_z: f64,
    symmetry: bool,
) -> Result<(Vec<Vec3>, CanonicalFrame)> {
    const GROUND_FRACTION: f64 = 0.05;
    let threshold = GROUND_FRACTION * object_box.size.z;
    let kept: Vec<Vec3> = points
        .iter()
        .copied()
        .filter(|p| p.z - ground_z >= threshold)
        .collect();
    if kept.is_empty() {
        return Err(Error::Contract(
            "all observed points were removed as ground".into(),
        ));
    }
    let (mut canonical, frame) = canonicalize_points(&kept, object_box, CANONICAL_MARGIN)?;
    if symmetry {
        let mirrored: Vec<Vec3> = canonical
            .iter()
            .map(|&p| Vec3::new(p.x, 1.0 - p.y, p.z))
            .collect();
        canonical.extend(mirrored);
    }
    Ok((canonical, frame))
}

/// Arithmetic mean of each object's member embeddings.
pub fn pool_embeddings(
    per_point: &DenseTensor,
    membership: &[Vec<usize>],
) -> Result<DenseTensor> {
    let (n, d) = per_point.dims2()?;
    let mut out = DenseTensor::zeros(vec![membership.len(), d]);
    for (obj, members) in membership.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Contract(format!("object {obj} has no member points")));
        }
        for &i in members {
            if i >= n {
                return Err(Error::Contract(format!(
                    "member index {i} out of range for {n} points"
                )));
            }
            let src = per_point.row(i);
            for (acc, &v) in out.row_mut(obj).iter_mut().zip(src) {
                *acc += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for v in out.row_mut(obj) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Backward of [`pool_embeddings`]: the gradient distributes uniformly over
/// each object's members.
pub fn pool_embeddings_backward(
    dout: &DenseTensor,
    membership: &[Vec<usize>],
    n_points: usize,
) -> DenseTensor {
    let d = dout.shape().last().copied().unwrap_or(0);
    let mut dper = DenseTensor::zeros(vec![n_points, d]);
    for (obj, members) in membership.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let src = dout.row(obj);
        for &i in members {
            for (acc, &v) in dper.row_mut(i).iter_mut().zip(src) {
                *acc += v * inv;
            }
        }
    }
    dper
}

/// Positions of a query batch as an N x 3 tensor plus the target column.
pub fn queries_to_tensors(queries: &[SdfQuery]) -> (DenseTensor, Vec<f64>) {
    let mut pos = DenseTensor::zeros(vec![queries.len(), 3]);
    let mut targets = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        pos.row_mut(i).copy_from_slice(&q.position.to_array());
        targets.push(q.target);
    }
    (pos, targets)
}
