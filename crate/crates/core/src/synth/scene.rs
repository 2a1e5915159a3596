//! Scene synthesis: non-overlapping object placement, one-sided LIDAR-style
//! sampling by sphere-traced ray casting from a sensor origin, and the
//! rotation/scale augmentation used during training.

use super::{PrimitiveShape, ShapeKind, CANONICAL_MARGIN};
use crate::geometry::{box_corners, Box3D, CanonicalFrame, PointCloud, Rotation3, Vec3};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One placed object: canonical shape + world pose + class.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub shape: PrimitiveShape,
    pub gt_box: Box3D,
    /// 1-based class id; 0 is background.
    pub class_id: usize,
}

impl SceneObject {
    pub fn frame(&self) -> CanonicalFrame {
        CanonicalFrame::new(&self.gt_box, CANONICAL_MARGIN).expect("valid margin")
    }

    /// Exact world-space signed distance (canonical SDF times frame scale).
    pub fn world_sdf(&self, p: Vec3) -> f64 {
        let frame = self.frame();
        self.shape.sdf(frame.to_canonical(p)) * frame.scale
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Primitive kinds in play; class id of a kind is its index + 1.
    pub classes: Vec<ShapeKind>,
    /// Objects are placed with yaw uniform in +-this many degrees.
    pub yaw_range_deg: f64,
    pub ground: bool,
    /// Per-coordinate Gaussian position noise, truncated at 3 sigma.
    pub noise_sigma: f64,
    pub rays_per_object: usize,
    pub ground_rays: usize,
    /// Objects are placed with centers in [-extent, extent]^2.
    pub extent: f64,
    /// Minimum world gap between object bounding boxes.
    pub placement_gap: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 5,
            max_objects: 15,
            classes: vec![ShapeKind::Sphere, ShapeKind::Cuboid, ShapeKind::Vehicle],
            yaw_range_deg: 30.0,
            ground: true,
            noise_sigma: 0.005,
            rays_per_object: 140,
            ground_rays: 400,
            extent: 6.0,
            placement_gap: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    /// Source of each point: object index, or -1 for ground.
    pub point_source: Vec<i32>,
    pub objects: Vec<SceneObject>,
    pub sensor: Vec3,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn points_in_object(&self, index: usize) -> Vec<usize> {
        let b = &self.objects[index].gt_box;
        (0..self.cloud.len())
            .filter(|&i| crate::geometry::point_in_box(self.cloud.positions[i], b))
            .collect()
    }
}

fn world_size_for(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Vec3 {
    match kind {
        ShapeKind::Sphere => Vec3::splat(rng.random_range(0.9..1.5)),
        // Elongated so the orientation is identifiable from geometry.
        ShapeKind::Cuboid => Vec3::new(
            rng.random_range(1.3..2.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.2),
        ),
        ShapeKind::Capsule => {
            let d = rng.random_range(0.6..1.0);
            Vec3::new(rng.random_range(1.5..2.4), d, d)
        }
        ShapeKind::Vehicle => Vec3::new(
            rng.random_range(1.8..2.8),
            rng.random_range(1.0..1.4),
            rng.random_range(0.8..1.2),
        ),
    }
}

fn aabb_of(b: &Box3D) -> (Vec3, Vec3) {
    let corners = box_corners(b);
    let mut lo = corners.0[0];
    let mut hi = corners.0[0];
    for c in &corners.0[1..] {
        lo = lo.min(*c);
        hi = hi.max(*c);
    }
    (lo, hi)
}

fn aabbs_separated(a: &Box3D, b: &Box3D, gap: f64) -> bool {
    let (lo_a, hi_a) = aabb_of(a);
    let (lo_b, hi_b) = aabb_of(b);
    hi_a.x + gap <= lo_b.x
        || hi_b.x + gap <= lo_a.x
        || hi_a.y + gap <= lo_b.y
        || hi_b.y + gap <= lo_a.y
        || hi_a.z + gap <= lo_b.z
        || hi_b.z + gap <= lo_a.z
}

const HIT_EPS: f64 = 1e-5;
const MAX_MARCH_STEPS: usize = 256;

fn scene_sdf(objects: &[SceneObject], ground: bool, p: Vec3) -> f64 {
    let mut d = if ground { p.z } else { f64::INFINITY };
    for o in objects {
        d = d.min(o.world_sdf(p));
    }
    d
}

/// First hit of the ray `origin + t*dir` against the scene, by sphere
/// tracing; `None` on miss.
fn march(objects: &[SceneObject], ground: bool, origin: Vec3, dir: Vec3, t_max: f64) -> Option<Vec3> {
    let mut t = 0.0;
    for _ in 0..MAX_MARCH_STEPS {
        let p = origin + dir * t;
        let d = scene_sdf(objects, ground, p);
        if d < HIT_EPS {
            return Some(p);
        }
        t += d;
        if t > t_max {
            return None;
        }
    }
    None
}

/// Truncated Gaussian noise: each component is clamped to 3 sigma so every
/// sampled point provably stays within the documented SDF bound.
fn truncated_noise(sigma: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let mut sample = || (crate::nn::normal_sample(rng) * sigma).clamp(-3.0 * sigma, 3.0 * sigma);
    Vec3::new(sample(), sample(), sample())
}

/// Generates a reproducible scene: placement, ray-cast sampling, noise.
///
/// Guarantees on success: ground-truth boxes are pairwise disjoint (their
/// AABBs are separated by `placement_gap`), every box contains at least one
/// sampled point, and the same `(config, seed)` yields a bit-identical scene.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    if config.classes.is_empty() {
        return Err(Error::Config("scene config needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = Vec3::new(0.0, -(config.extent + 5.0), 2.5);

    'attempt: for _ in 0..40 {
        let n_objects = rng.random_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
        for _ in 0..n_objects {
            let mut placed = false;
            for _ in 0..200 {
                let class_index = rng.random_range(0..config.classes.len());
                let kind = config.classes[class_index];
                let size = world_size_for(kind, &mut rng);
                let yaw = rng
                    .random_range(-config.yaw_range_deg..=config.yaw_range_deg)
                    .to_radians();
                // Spheres are yaw-ambiguous; pin their ground truth to yaw 0.
                let yaw = if kind == ShapeKind::Sphere { 0.0 } else { yaw };
                let z = if config.ground {
                    size.z * 0.5
                } else {
                    rng.random_range(0.5..2.0)
                };
                let center = Vec3::new(
                    rng.random_range(-config.extent..config.extent),
                    rng.random_range(-config.extent..config.extent),
                    z,
                );
                let gt_box = Box3D::with_yaw(center, size, yaw);
                if objects
                    .iter()
                    .all(|o| aabbs_separated(&o.gt_box, &gt_box, config.placement_gap))
                {
                    objects.push(SceneObject {
                        shape: PrimitiveShape::for_world_size(kind, size),
                        gt_box,
                        class_id: class_index + 1,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }

        // Ray casting: aim a budget of rays into each object's bounding
        // sphere, then a sweep of ground rays; keep first hits only.
        let mut positions: Vec<Vec3> = Vec::new();
        let mut point_source: Vec<i32> = Vec::new();
        let t_max = 4.0 * (config.extent + 8.0);
        for object in &objects {
            let radius = object.gt_box.size.norm() * 0.5;
            for _ in 0..config.rays_per_object {
                let jitter = super::random_direction(&mut rng)
                    * (radius * rng.random_range(0.0f64..1.0).cbrt());
                let target = object.gt_box.center + jitter;
                let dir = (target - sensor).normalized();
                if let Some(hit) = march(&objects, config.ground, sensor, dir, t_max) {
                    let source = classify_hit(&objects, config.ground, hit);
                    positions.push(hit + truncated_noise(config.noise_sigma, &mut rng));
                    point_source.push(source);
                }
            }
        }
        if config.ground {
            for _ in 0..config.ground_rays {
                let target = Vec3::new(
                    rng.random_range(-config.extent * 1.2..config.extent * 1.2),
                    rng.random_range(-config.extent * 1.2..config.extent * 1.2),
                    0.0,
                );
                let dir = (target - sensor).normalized();
                if let Some(hit) = march(&objects, config.ground, sensor, dir, t_max) {
                    let source = classify_hit(&objects, config.ground, hit);
                    positions.push(hit + truncated_noise(config.noise_sigma, &mut rng));
                    point_source.push(source);
                }
            }
        }

        // Every labeled box must contain at least one sampled point.
        let scene = SyntheticScene {
            cloud: PointCloud::from_positions(positions),
            point_source,
            objects,
            sensor,
            seed,
        };
        let all_covered = (0..scene.objects.len()).all(|i| {
            scene
                .point_source
                .iter()
                .any(|&s| s == i as i32)
        });
        if all_covered {
            return Ok(scene);
        }
    }
    Err(Error::Numerical(format!(
        "scene generation failed after bounded retries (seed {seed})"
    )))
}

/// Attributes a hit point to its nearest surface: an object index, or -1 for
/// ground.
fn classify_hit(objects: &[SceneObject], ground: bool, hit: Vec3) -> i32 {
    let mut best = if ground { (-1, hit.z.abs()) } else { (-1, f64::INFINITY) };
    for (i, o) in objects.iter().enumerate() {
        let d = o.world_sdf(hit).abs();
        if d < best.1 {
            best = (i as i32, d);
        }
    }
    best.0
}

/// Applies a rigid z-rotation plus uniform scale to the whole scene,
/// consistently across points, boxes, and the sensor.
pub fn augment_scene(
    scene: &SyntheticScene,
    rotation_range_deg: f64,
    scale_range: (f64, f64),
    seed: u64,
) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng
        .random_range(-rotation_range_deg..=rotation_range_deg)
        .to_radians();
    let scale = rng.random_range(scale_range.0..=scale_range.1);
    let rot = Rotation3::from_yaw(yaw);
    let xform = |p: Vec3| rot.apply(p) * scale;

    let positions = scene.cloud.positions.iter().map(|&p| xform(p)).collect();
    let objects = scene
        .objects
        .iter()
        .map(|o| SceneObject {
            shape: o.shape.clone(),
            gt_box: Box3D::new(
                xform(o.gt_box.center),
                o.gt_box.size * scale,
                Rotation3::from_matrix_unchecked(rot.matrix().mul(o.gt_box.rotation.matrix())),
            ),
            class_id: o.class_id,
        })
        .collect();
    SyntheticScene {
        cloud: PointCloud {
            positions,
            features: scene.cloud.features.clone(),
            feature_dim: scene.cloud.feature_dim,
        },
        point_source: scene.point_source.clone(),
        objects,
        sensor: xform(scene.sensor),
        seed: scene.seed,
    }
}
