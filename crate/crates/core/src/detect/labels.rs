//! Dynamic classification labels: a point is positive when its current
//! predicted box overlaps its ground-truth box by more than the IoU
//! threshold, recomputed every training iteration.

use super::GtObject;
use crate::geometry::{iou_oriented, point_in_box, Box3D, Vec3};

/// Per-point labels for one iteration.
#[derive(Debug, Clone)]
pub struct DynamicLabels {
    /// Softmax target per point: 0 = background, otherwise the matched
    /// object's class id.
    pub class_targets: Vec<usize>,
    /// Ground-truth object index containing the point (the corner-loss
    /// mask), independent of the IoU outcome.
    pub matched_gt: Vec<Option<usize>>,
    pub positive: Vec<bool>,
}

/// Projects a generally rotated box onto its yaw component so overlap tests
/// stay on the exact polygon-clipping path (ground truth is yaw-only).
pub fn yaw_projected(b: &Box3D) -> Box3D {
    Box3D::with_yaw(b.center, b.size, b.rotation.yaw())
}

/// Matches each point to the ground-truth box containing it, then labels it
/// positive iff the IoU between its predicted box and that ground truth
/// exceeds `iou_threshold` (strictly). Points outside all boxes are negative
/// with no IoU computed.
pub fn dynamic_labels(
    pred_boxes: &[Box3D],
    positions: &[Vec3],
    gt: &[GtObject],
    iou_threshold: f64,
) -> DynamicLabels {
    let n = positions.len();
    debug_assert_eq!(pred_boxes.len(), n);
    let mut class_targets = vec![0usize; n];
    let mut matched_gt = vec![None; n];
    let mut positive = vec![false; n];
    for i in 0..n {
        let matched = gt
            .iter()
            .position(|object| point_in_box(positions[i], &object.box3d));
        matched_gt[i] = matched;
        if let Some(g) = matched {
            let iou = iou_oriented(&yaw_projected(&pred_boxes[i]), &gt[g].box3d);
            if iou > iou_threshold {
                positive[i] = true;
                class_targets[i] = gt[g].class_id;
            }
        }
    }
    DynamicLabels {
        class_targets,
        matched_gt,
        positive,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation3;

    fn gt_at(center: Vec3, size: Vec3, class_id: usize) -> GtObject {
        GtObject {
            box3d: Box3D::new(center, size, Rotation3::identity()),
            class_id,
        }
    }

    #[test]
    fn exact_prediction_is_positive() {
        let gt = vec![gt_at(Vec3::ZERO, Vec3::splat(2.0), 3)];
        let labels = dynamic_labels(&[gt[0].box3d], &[Vec3::ZERO], &gt, 0.7);
        assert!(labels.positive[0]);
        assert_eq!(labels.class_targets[0], 3);
        assert_eq!(labels.matched_gt[0], Some(0));
    }

    #[test]
    fn point_outside_all_boxes_is_negative() {
        let gt = vec![gt_at(Vec3::ZERO, Vec3::splat(1.0), 1)];
        let far = Vec3::new(10.0, 0.0, 0.0);
        let labels = dynamic_labels(&[gt[0].box3d], &[far], &gt, 0.7);
        assert!(!labels.positive[0]);
        assert_eq!(labels.class_targets[0], 0);
        assert_eq!(labels.matched_gt[0], None);
    }

    #[test]
    fn iou_exactly_at_threshold_is_negative() {
        // Shrink an axis-aligned gt box along x so the IoU is exactly 0.7:
        // pred inside gt with identical y/z extents, length 0.7 of gt.
        let gt = vec![gt_at(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0), 1)];
        let pred = Box3D::axis_aligned(
            Vec3::new(-0.15, 0.0, 0.0), // flush against the gt's -x face
            Vec3::new(0.7, 1.0, 1.0),
        );
        let iou = iou_oriented(&pred, &gt[0].box3d);
        assert!((iou - 0.7).abs() < 1e-12, "constructed IoU: {iou}");
        let labels = dynamic_labels(&[pred], &[Vec3::ZERO], &gt, 0.7);
        assert!(!labels.positive[0], "strict > threshold");

        // Nudge slightly larger: positive.
        let bigger = Box3D::axis_aligned(Vec3::new(-0.14, 0.0, 0.0), Vec3::new(0.72, 1.0, 1.0));
        let labels = dynamic_labels(&[bigger], &[Vec3::ZERO], &gt, 0.7);
        assert!(labels.positive[0]);
    }

    #[test]
    fn mask_membership_is_independent_of_prediction_quality() {
        let gt = vec![gt_at(Vec3::ZERO, Vec3::splat(1.0), 2)];
        let terrible = Box3D::axis_aligned(Vec3::new(40.0, 0.0, 0.0), Vec3::splat(0.2));
        let labels = dynamic_labels(&[terrible], &[Vec3::new(0.1, 0.1, 0.1)], &gt, 0.7);
        assert_eq!(labels.matched_gt[0], Some(0), "corner-loss mask stays on");
        assert!(!labels.positive[0]);
        assert_eq!(labels.class_targets[0], 0);
    }
}
