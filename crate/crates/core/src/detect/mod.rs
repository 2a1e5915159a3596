//! The single-stage detector: sparse U-Net backbone, per-point prediction
//! heads, dynamic classification labels, vote-graph consolidation,
//! diversity-aware proposal sampling, NMS, training losses, and mAP
//! evaluation.

mod backbone;
pub mod dataset;
mod eval;
mod graph;
mod labels;
mod pipeline;
mod propose;
mod trainer;

pub use backbone::{Backbone, BackboneConfig};
pub use eval::{evaluate_map, EvalReport, MatchMetric};
pub use graph::{build_vote_graph, graph_consolidate, graph_consolidate_backward, VoteGraph};
pub use labels::{dynamic_labels, yaw_projected, DynamicLabels};
pub use pipeline::{
    DetectionConfig, Detector, LossBreakdown, PinnedDiscrete, PointPredictions,
    ShapeSupervision,
};
pub use propose::{nms, propose_boxes, Proposal, MIN_PROPOSAL_SCORE};
pub use trainer::{augment_sample, scene_to_sample, train_detector, DetectorTrainConfig};

use crate::geometry::{Box3D, Vec3};

/// A ground-truth object: oriented box plus 1-based class id.
#[derive(Debug, Clone)]
pub struct GtObject {
    pub box3d: Box3D,
    pub class_id: usize,
}

/// One scene as consumed by training and inference.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub positions: Vec<Vec3>,
    pub gt: Vec<GtObject>,
}

/// A final detection.
#[derive(Debug, Clone)]
pub struct Detection {
    pub box3d: Box3D,
    pub class_id: usize,
    pub score: f64,
    pub point_index: usize,
}

#[cfg(test)]
mod tests;
