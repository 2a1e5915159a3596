//! Deterministic synthetic shapes and scenes with analytic signed distance
//! fields, providing exact ground truth for every oracle and training run.
//!
//! Shapes are expressed in the canonical unit cube `[0,1]^3` (centered at
//! 0.5) so they line up with the frames produced by
//! [`crate::geometry::canonicalize_points`]; a scene instance pairs a
//! canonical shape with a world-space oriented box, and the world SDF is the
//! canonical SDF times the frame scale.

mod scene;

pub use scene::{augment_scene, generate_scene, SceneConfig, SceneObject, SyntheticScene};

use crate::geometry::Vec3;
use rand::Rng;

/// Margin used everywhere a box is mapped to its canonical unit cube.
pub const CANONICAL_MARGIN: f64 = 0.05;

const CENTER: Vec3 = Vec3 {
    x: 0.5,
    y: 0.5,
    z: 0.5,
};

/// A primitive with an exact analytic SDF over the canonical unit cube.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveShape {
    Sphere {
        radius: f64,
    },
    Cuboid {
        half_extents: Vec3,
    },
    /// Capsule along the x axis: segment half-length plus cap radius.
    Capsule {
        half_length: f64,
        radius: f64,
    },
    /// Two stacked cuboids (body + cabin), symmetric about the y = 0.5
    /// longitudinal plane. Stands in for a vehicle so the symmetry
    /// augmentation is exercised meaningfully.
    Vehicle {
        body_center: Vec3,
        body_half: Vec3,
        cabin_center: Vec3,
        cabin_half: Vec3,
    },
}

fn cuboid_sdf(q: Vec3, half: Vec3) -> f64 {
    let d = q.abs() - half;
    let outside = d.max(Vec3::ZERO).norm();
    let inside = d.x.max(d.y).max(d.z).min(0.0);
    outside + inside
}

impl PrimitiveShape {
    /// Exact signed distance at a canonical-cube position. Union members
    /// combine by min: the sign is exact everywhere, the magnitude is
    /// conservative inside near internal seams.
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = p - CENTER;
        match self {
            PrimitiveShape::Sphere { radius } => q.norm() - radius,
            PrimitiveShape::Cuboid { half_extents } => cuboid_sdf(q, *half_extents),
            PrimitiveShape::Capsule {
                half_length,
                radius,
            } => {
                let t = q.x.clamp(-half_length, *half_length);
                Vec3::new(q.x - t, q.y, q.z).norm() - radius
            }
            PrimitiveShape::Vehicle {
                body_center,
                body_half,
                cabin_center,
                cabin_half,
            } => cuboid_sdf(q - *body_center, *body_half)
                .min(cuboid_sdf(q - *cabin_center, *cabin_half)),
        }
    }

    /// Uniform-ish surface sample in canonical coordinates. For the vehicle
    /// union this samples member surfaces, so some returned points are
    /// internal to the union (see [`remove_internal_points`]).
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        let q = match self {
            PrimitiveShape::Sphere { radius } => random_direction(rng) * *radius,
            PrimitiveShape::Cuboid { half_extents } => cuboid_surface(*half_extents, rng),
            PrimitiveShape::Capsule {
                half_length,
                radius,
            } => {
                let lateral_area = std::f64::consts::TAU * radius * 2.0 * half_length;
                let cap_area = 4.0 * std::f64::consts::PI * radius * radius;
                if rng.random_range(0.0..lateral_area + cap_area) < lateral_area {
                    let x = rng.random_range(-half_length..*half_length);
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    Vec3::new(x, radius * angle.cos(), radius * angle.sin())
                } else {
                    let d = random_direction(rng);
                    let x = if d.x >= 0.0 { *half_length } else { -half_length };
                    Vec3::new(x + d.x * radius, d.y * radius, d.z * radius)
                }
            }
            PrimitiveShape::Vehicle {
                body_center,
                body_half,
                cabin_center,
                cabin_half,
            } => {
                let area = |h: &Vec3| 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z);
                if rng.random_range(0.0..area(body_half) + area(cabin_half)) < area(body_half) {
                    cuboid_surface(*body_half, rng) + *body_center
                } else {
                    cuboid_surface(*cabin_half, rng) + *cabin_center
                }
            }
        };
        q + CENTER
    }

    /// Full bounding extents in canonical units.
    pub fn canonical_extents(&self) -> Vec3 {
        match self {
            PrimitiveShape::Sphere { radius } => Vec3::splat(2.0 * radius),
            PrimitiveShape::Cuboid { half_extents } => *half_extents * 2.0,
            PrimitiveShape::Capsule {
                half_length,
                radius,
            } => Vec3::new(2.0 * (half_length + radius), 2.0 * radius, 2.0 * radius),
            PrimitiveShape::Vehicle {
                body_center,
                body_half,
                cabin_center,
                cabin_half,
            } => {
                let lo = (*body_center - *body_half).min(*cabin_center - *cabin_half);
                let hi = (*body_center + *body_half).max(*cabin_center + *cabin_half);
                hi - lo
            }
        }
    }

    /// Builds the canonical shape whose scene instance has the given world
    /// box size: canonical dimensions are world dimensions divided by
    /// `max(size) * (1 + 2 * margin)`, matching [`crate::geometry::CanonicalFrame`].
    pub fn for_world_size(kind: ShapeKind, size: Vec3) -> PrimitiveShape {
        let scale = size.x.max(size.y).max(size.z) * (1.0 + 2.0 * CANONICAL_MARGIN);
        let half = size * (0.5 / scale);
        match kind {
            ShapeKind::Sphere => PrimitiveShape::Sphere { radius: half.x },
            ShapeKind::Cuboid => PrimitiveShape::Cuboid { half_extents: half },
            ShapeKind::Capsule => PrimitiveShape::Capsule {
                half_length: half.x - half.y,
                radius: half.y,
            },
            ShapeKind::Vehicle => {
                // Body: full footprint, lower 55% of height. Cabin: shorter,
                // narrower, shifted toward the rear, and overlapping the body
                // by 20% of the half-height so the union has a real internal
                // seam; y-symmetric.
                let body_half = Vec3::new(half.x, half.y, 0.55 * half.z);
                let body_center = Vec3::new(0.0, 0.0, -half.z + body_half.z);
                let cabin_half = Vec3::new(0.5 * half.x, 0.8 * half.y, 0.55 * half.z);
                let cabin_center = Vec3::new(-0.1 * half.x, 0.0, half.z - cabin_half.z);
                PrimitiveShape::Vehicle {
                    body_center,
                    body_half,
                    cabin_center,
                    cabin_half,
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Cuboid,
    Capsule,
    Vehicle,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cuboid => "cuboid",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Vehicle => "vehicle",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeKind> {
        match s {
            "sphere" => Some(ShapeKind::Sphere),
            "cuboid" => Some(ShapeKind::Cuboid),
            "capsule" => Some(ShapeKind::Capsule),
            "vehicle" => Some(ShapeKind::Vehicle),
            _ => None,
        }
    }
}

/// The stock canonical primitives used to train the shape prior.
pub fn prior_shapes() -> Vec<(ShapeKind, PrimitiveShape)> {
    [
        (ShapeKind::Sphere, Vec3::new(1.0, 1.0, 1.0)),
        (ShapeKind::Cuboid, Vec3::new(1.4, 0.9, 0.7)),
        (ShapeKind::Vehicle, Vec3::new(2.0, 1.0, 0.9)),
    ]
    .into_iter()
    .map(|(kind, size)| (kind, PrimitiveShape::for_world_size(kind, size)))
    .collect()
}

/// Drops sampled surface points that fall strictly inside the shape
/// (internal seam points of union shapes).
pub fn remove_internal_points(shape: &PrimitiveShape, points: &[Vec3], eps: f64) -> Vec<Vec3> {
    points
        .iter()
        .copied()
        .filter(|&p| shape.sdf(p) > -eps)
        .collect()
}

fn random_direction(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            crate::nn::normal_sample(rng),
            crate::nn::normal_sample(rng),
            crate::nn::normal_sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v * (1.0 / n);
        }
    }
}

fn cuboid_surface(half: Vec3, rng: &mut impl Rng) -> Vec3 {
    let areas = [half.y * half.z, half.x * half.z, half.x * half.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 0;
    for (i, &a) in areas.iter().enumerate() {
        if pick < a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let u = rng.random_range(-1.0..1.0);
    let v = rng.random_range(-1.0..1.0);
    match axis {
        0 => Vec3::new(sign * half.x, u * half.y, v * half.z),
        1 => Vec3::new(u * half.x, sign * half.y, v * half.z),
        _ => Vec3::new(u * half.x, v * half.y, sign * half.z),
    }
}

#[cfg(test)]
mod tests;
