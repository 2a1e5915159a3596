//! Detector training loop: shuffled scenes, optional rotation/scale
//! augmentation, SGD with the stepwise schedule.

use super::pipeline::{Detector, LossBreakdown, ShapeSupervision};
use super::{GtObject, SceneSample};
use crate::geometry::{Box3D, Rotation3, Vec3};
use crate::nn::{sgd_step, BnMode, HasParams, OptimizerConfig};
use crate::synth::SyntheticScene;
use crate::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    /// Rotation (degrees) and scale augmentation ranges; None disables.
    pub augment: Option<(f64, (f64, f64))>,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 50,
            optimizer: OptimizerConfig {
                base_lr: 0.3,
                momentum: 0.0,
                schedule_step: 3000,
                ..Default::default()
            },
            augment: Some((10.0, (0.9, 1.1))),
            seed: 0,
        }
    }
}

pub fn scene_to_sample(scene: &SyntheticScene) -> SceneSample {
    SceneSample {
        positions: scene.cloud.positions.clone(),
        gt: scene
            .objects
            .iter()
            .map(|o| GtObject {
                box3d: o.gt_box,
                class_id: o.class_id,
            })
            .collect(),
    }
}

/// Rigid z-rotation plus uniform scale applied consistently to points and
/// ground-truth boxes.
pub fn augment_sample(
    sample: &SceneSample,
    rotation_range_deg: f64,
    scale_range: (f64, f64),
    seed: u64,
) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = rng
        .random_range(-rotation_range_deg..=rotation_range_deg)
        .to_radians();
    let scale = rng.random_range(scale_range.0..=scale_range.1);
    let rot = Rotation3::from_yaw(yaw);
    let xform = |p: Vec3| rot.apply(p) * scale;
    SceneSample {
        positions: sample.positions.iter().map(|&p| xform(p)).collect(),
        gt: sample
            .gt
            .iter()
            .map(|g| GtObject {
                box3d: Box3D::new(
                    xform(g.box3d.center),
                    g.box3d.size * scale,
                    Rotation3::from_matrix_unchecked(
                        rot.matrix().mul(g.box3d.rotation.matrix()),
                    ),
                ),
                class_id: g.class_id,
            })
            .collect(),
    }
}

/// Trains the detector over scene samples. Returns per-iteration total
/// losses.
pub fn train_detector(
    detector: &mut Detector,
    scenes: &[SceneSample],
    shape: Option<&mut ShapeSupervision>,
    cfg: &DetectorTrainConfig,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs * scenes.len());
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut shape_ctx = shape;
    let mode = if detector.backbone_cfg.use_batchnorm {
        BnMode::Train
    } else {
        BnMode::Eval
    };
    let mut iteration = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &scene_index in &order {
            let scene = &scenes[scene_index];
            let sample = match cfg.augment {
                Some((rot_deg, scale)) => {
                    augment_sample(scene, rot_deg, scale, rng.random::<u64>())
                }
                None => scene.clone(),
            };
            let breakdown: LossBreakdown =
                detector.loss_and_backward(&sample, shape_ctx.as_deref_mut(), mode)?;
            losses.push(breakdown.total);
            let mut params = detector.params_mut();
            sgd_step(&mut params, &cfg.optimizer, iteration);
            iteration += 1;
        }
    }
    Ok(losses)
}
