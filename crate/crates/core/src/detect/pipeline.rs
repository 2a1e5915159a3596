//! The single-stage detector: per-point box/semantics/embedding heads on
//! top of the sparse U-Net, graph consolidation, the combined training loss
//! with hand-derived backward, and box inference.

use super::backbone::{Backbone, BackboneConfig};
use super::graph::{build_vote_graph, graph_consolidate, graph_consolidate_backward, VoteGraph};
use super::labels::{dynamic_labels, yaw_projected, DynamicLabels};
use super::propose::{nms, propose_boxes, Proposal};
use super::{Detection, SceneSample};
use crate::geometry::{
    box_corners, corner_huber_loss, point_in_box, BoxParams, CornerSet, RotationParams6, Vec3,
};
use crate::nn::{
    relu_backward, relu_forward, softmax_cross_entropy, softmax_probs, BnMode, Checkpoint,
    DenseTensor, HasParams, Param,
};
use crate::shape::{
    pool_embeddings, pool_embeddings_backward, preprocess_observed, prior_loss, queries_to_tensors,
    ray_augment, SdfDecoder,
};
use crate::sparse::{precompute_neighbors, voxel_to_point, voxel_to_point_backward, voxelize};
use crate::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct DetectionConfig {
    pub k_neighbors: usize,
    pub graph_layers: usize,
    pub alpha: f64,
    pub iou_positive_threshold: f64,
    pub nms_iou: f64,
    pub max_proposals: usize,
    pub min_shape_points: usize,
    /// Foreground classes; semantic logits have this many + background.
    pub num_classes: usize,
    pub voxel_size: f64,
    /// Size head predicts a log-scale around this anchor.
    pub anchor_size: Vec3,
    pub embed_dim: usize,
    /// Ablation switches: vote-graph consolidation and IoU-driven labels
    /// (off = plain inside-box labels).
    pub use_consolidation: bool,
    pub use_dynamic_labels: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            k_neighbors: 16,
            graph_layers: 2,
            alpha: 1.0,
            iou_positive_threshold: 0.7,
            nms_iou: 0.5,
            max_proposals: 64,
            min_shape_points: 500,
            num_classes: 3,
            voxel_size: 0.25,
            anchor_size: Vec3::new(1.3, 1.0, 0.9),
            embed_dim: 32,
            use_consolidation: true,
            use_dynamic_labels: true,
        }
    }
}

/// A two-convolution prediction head at voxel resolution.
#[derive(Debug, Clone)]
struct HeadPair {
    conv1: crate::sparse::SubmanifoldConv,
    conv2: crate::sparse::SubmanifoldConv,
}

struct HeadTape {
    pre1: DenseTensor,
    a1: DenseTensor,
}

impl HeadPair {
    fn new(name: &str, f: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        HeadPair {
            conv1: crate::sparse::SubmanifoldConv::new(&format!("{name}.conv1"), f, hidden, rng),
            conv2: crate::sparse::SubmanifoldConv::new(&format!("{name}.conv2"), hidden, out, rng),
        }
    }

    fn forward(
        &self,
        features: &DenseTensor,
        nbrs: &crate::sparse::NeighborTable,
    ) -> Result<(DenseTensor, HeadTape)> {
        let pre1 = self.conv1.forward(features, nbrs)?;
        let a1 = relu_forward(&pre1);
        let out = self.conv2.forward(&a1, nbrs)?;
        Ok((out, HeadTape { pre1, a1 }))
    }

    fn backward(
        &mut self,
        features: &DenseTensor,
        nbrs: &crate::sparse::NeighborTable,
        tape: &HeadTape,
        dout: &DenseTensor,
    ) -> Result<DenseTensor> {
        let da1 = self.conv2.backward(&tape.a1, nbrs, dout)?;
        let dpre1 = relu_backward(&tape.pre1, &da1);
        self.conv1.backward(features, nbrs, &dpre1)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.conv1.params_mut();
        ps.extend(self.conv2.params_mut());
        ps
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub backbone_cfg: BackboneConfig,
    pub cfg: DetectionConfig,
    backbone: Backbone,
    center_head: HeadPair,
    size_head: HeadPair,
    rot_head: HeadPair,
    semantic_head: HeadPair,
    vote_head: HeadPair,
    embed_head: HeadPair,
}

/// Per-point predictions after the heads (raw) and after consolidation.
pub struct PointPredictions {
    pub centers: Vec<Vec3>,
    pub sizes: Vec<Vec3>,
    pub rot6: DenseTensor,
    pub semantic_logits: DenseTensor,
    pub consolidated_centers: Vec<Vec3>,
    pub consolidated_sizes: Vec<Vec3>,
    pub consolidated_rot6: DenseTensor,
    pub consolidated_logits: DenseTensor,
    pub vote_logits: DenseTensor,
    pub embeddings: DenseTensor,
}

impl PointPredictions {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn raw_box(&self, i: usize) -> BoxParams {
        BoxParams {
            center: self.centers[i],
            size: self.sizes[i],
            rot6: RotationParams6(self.rot6.row(i).try_into().expect("6 columns")),
        }
    }

    pub fn consolidated_box(&self, i: usize) -> BoxParams {
        BoxParams {
            center: self.consolidated_centers[i],
            size: self.consolidated_sizes[i],
            rot6: RotationParams6(
                self.consolidated_rot6.row(i).try_into().expect("6 columns"),
            ),
        }
    }
}

/// Shape supervision context for the detection loss: a frozen decoder plus
/// the ray-augmentation settings.
pub struct ShapeSupervision {
    pub decoder: SdfDecoder,
    pub delta: f64,
    pub symmetry_classes: Vec<usize>,
    pub ground_z: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub corner_pre: f64,
    pub corner_post: f64,
    pub classification: f64,
    pub shape: f64,
    pub num_points: usize,
    pub num_positive: usize,
}

const VOTE_LOGIT_CLAMP: f64 = 30.0;
/// Raw log-size outputs are clamped so exp() stays finite whatever an
/// undertrained head emits.
const SIZE_LOG_CLAMP: f64 = 8.0;

impl Detector {
    pub fn new(backbone_cfg: BackboneConfig, cfg: DetectionConfig, rng: &mut impl Rng) -> Self {
        let f = backbone_cfg.feature_dim();
        let hidden = f;
        let mut rot_head = HeadPair::new("head.rot", f, hidden, 6, rng);
        // Bias the raw (cos, sin) pairs to the identity rotation: pair
        // normalization is ill-conditioned around zero-norm pairs.
        rot_head
            .conv2
            .bias
            .value
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        Detector {
            backbone: Backbone::new(backbone_cfg.clone(), rng),
            center_head: HeadPair::new("head.center", f, hidden, 3, rng),
            size_head: HeadPair::new("head.size", f, hidden, 3, rng),
            rot_head,
            semantic_head: HeadPair::new("head.semantic", f, hidden, cfg.num_classes + 1, rng),
            vote_head: HeadPair::new("head.vote", f, hidden, 1, rng),
            embed_head: HeadPair::new("head.embed", f, hidden, cfg.embed_dim, rng),
            backbone_cfg,
            cfg,
        }
    }

    fn heads_mut(&mut self) -> Vec<&mut HeadPair> {
        vec![
            &mut self.center_head,
            &mut self.size_head,
            &mut self.rot_head,
            &mut self.semantic_head,
            &mut self.vote_head,
            &mut self.embed_head,
        ]
    }

    /// Full forward pass to per-point predictions. Returns the predictions
    /// plus everything the loss backward needs. `pinned_graph` substitutes a
    /// fixed vote graph for the one built from predicted centers (gradients
    /// never flow through the graph structure; pinning it makes the loss a
    /// smooth function of the parameters for finite-difference checks).
    fn forward_internal(
        &mut self,
        positions: &[Vec3],
        mode: BnMode,
        pinned_graph: Option<&VoteGraph>,
    ) -> Result<(PointPredictions, ForwardTape)> {
        if positions.is_empty() {
            return Err(Error::Contract("scene has no points".into()));
        }
        let n = positions.len();
        let cloud = crate::geometry::PointCloud::new(positions.to_vec(), vec![1.0; n], 1)?;
        let (tensor, point_to_voxel) = voxelize(&cloud, self.cfg.voxel_size)?;
        let (features_tensor, backbone_tape) = self.backbone.forward(&tensor, mode)?;
        let nbrs = precompute_neighbors(&features_tensor);
        let voxel_features = features_tensor.features.clone();

        let (center_vox, center_tape) = self.center_head.forward(&voxel_features, &nbrs)?;
        let (size_vox, size_tape) = self.size_head.forward(&voxel_features, &nbrs)?;
        let (rot_vox, rot_tape) = self.rot_head.forward(&voxel_features, &nbrs)?;
        let (sem_vox, sem_tape) = self.semantic_head.forward(&voxel_features, &nbrs)?;
        let (vote_vox, vote_tape) = self.vote_head.forward(&voxel_features, &nbrs)?;
        let (embed_vox, embed_tape) = self.embed_head.forward(&voxel_features, &nbrs)?;

        let gather = |vox: &DenseTensor| -> Result<DenseTensor> {
            voxel_to_point(&features_tensor.with_features(vox.clone()), &point_to_voxel)
        };
        let offsets = gather(&center_vox)?;
        let size_raw = gather(&size_vox)?;
        let rot6 = gather(&rot_vox)?;
        let semantic_logits = gather(&sem_vox)?;
        let vote_logits = gather(&vote_vox)?;
        let embeddings = gather(&embed_vox)?;

        let centers: Vec<Vec3> = (0..n)
            .map(|i| {
                positions[i]
                    + Vec3::new(offsets.at2(i, 0), offsets.at2(i, 1), offsets.at2(i, 2))
            })
            .collect();
        let clamp_exp = |v: f64| v.clamp(-SIZE_LOG_CLAMP, SIZE_LOG_CLAMP).exp();
        let sizes: Vec<Vec3> = (0..n)
            .map(|i| {
                Vec3::new(
                    self.cfg.anchor_size.x * clamp_exp(size_raw.at2(i, 0)),
                    self.cfg.anchor_size.y * clamp_exp(size_raw.at2(i, 1)),
                    self.cfg.anchor_size.z * clamp_exp(size_raw.at2(i, 2)),
                )
            })
            .collect();

        // Consolidation over [center, size, rot6, logits] with exp(vote)
        // weights; the graph is built once from the raw predicted centers.
        let k = self.cfg.k_neighbors.min(n);
        let graph = match pinned_graph {
            Some(g) => g.clone(),
            None => build_vote_graph(&centers, k)?,
        };
        let weights: Vec<f64> = (0..n)
            .map(|i| vote_logits.at2(i, 0).clamp(-VOTE_LOGIT_CLAMP, VOTE_LOGIT_CLAMP).exp())
            .collect();
        let c_attr = 12 + self.cfg.num_classes + 1;
        let mut attrs = DenseTensor::zeros(vec![n, c_attr]);
        for i in 0..n {
            let row = attrs.row_mut(i);
            row[0..3].copy_from_slice(&centers[i].to_array());
            row[3..6].copy_from_slice(&sizes[i].to_array());
            row[6..12].copy_from_slice(rot6.row(i));
            row[12..].copy_from_slice(semantic_logits.row(i));
        }
        let (consolidated, consolidate_tape) = if self.cfg.use_consolidation {
            let (out, tape) =
                graph_consolidate(&attrs, &graph, &weights, self.cfg.graph_layers)?;
            (out, Some(tape))
        } else {
            (attrs.clone(), None)
        };

        let mut consolidated_centers = Vec::with_capacity(n);
        let mut consolidated_sizes = Vec::with_capacity(n);
        let mut consolidated_rot6 = DenseTensor::zeros(vec![n, 6]);
        let mut consolidated_logits =
            DenseTensor::zeros(vec![n, self.cfg.num_classes + 1]);
        for i in 0..n {
            let row = consolidated.row(i);
            consolidated_centers.push(Vec3::new(row[0], row[1], row[2]));
            consolidated_sizes.push(Vec3::new(row[3], row[4], row[5]));
            consolidated_rot6.row_mut(i).copy_from_slice(&row[6..12]);
            consolidated_logits.row_mut(i).copy_from_slice(&row[12..]);
        }

        let preds = PointPredictions {
            centers,
            sizes,
            rot6,
            semantic_logits,
            consolidated_centers,
            consolidated_sizes,
            consolidated_rot6,
            consolidated_logits,
            vote_logits,
            embeddings,
        };
        let tape = ForwardTape {
            point_to_voxel,
            num_voxels: features_tensor.coords.len(),
            backbone_tape,
            nbrs,
            voxel_features,
            center_tape,
            size_tape,
            rot_tape,
            sem_tape,
            vote_tape,
            embed_tape,
            size_raw_point: size_raw,
            graph,
            weights,
            consolidate_tape,
        };
        Ok((preds, tape))
    }

    /// Training loss for one scene; accumulates gradients into every
    /// parameter. `shape` adds the weak shape-supervision term for objects
    /// with at least `min_shape_points` member points.
    pub fn loss_and_backward(
        &mut self,
        scene: &SceneSample,
        shape: Option<&mut ShapeSupervision>,
        mode: BnMode,
    ) -> Result<LossBreakdown> {
        self.loss_and_backward_pinned(scene, shape, mode, None)
    }

    /// [`Self::loss_and_backward`] with the discrete structures (dynamic
    /// labels and vote-graph topology) optionally pinned. Within one
    /// iteration those are constants of the loss; pinning them lets
    /// finite-difference checks probe the smooth part the gradient actually
    /// describes.
    pub fn loss_and_backward_pinned(
        &mut self,
        scene: &SceneSample,
        shape: Option<&mut ShapeSupervision>,
        mode: BnMode,
        pinned: Option<&PinnedDiscrete>,
    ) -> Result<LossBreakdown> {
        let (preds, tape) =
            self.forward_internal(&scene.positions, mode, pinned.map(|p| &p.graph))?;
        let n = preds.len();

        let labels = match pinned {
            Some(p) => p.labels.clone(),
            None => self.compute_labels(&preds, scene),
        };

        // Corner losses (pre- and post-consolidation) over masked points.
        let mask: Vec<bool> = labels.matched_gt.iter().map(|m| m.is_some()).collect();
        let gt_corners: Vec<CornerSet> = labels
            .matched_gt
            .iter()
            .map(|m| match m {
                Some(g) => box_corners(&scene.gt[*g].box3d),
                None => CornerSet([Vec3::ZERO; 8]),
            })
            .collect();
        let raw_params: Vec<BoxParams> = (0..n).map(|i| preds.raw_box(i)).collect();
        let post_params: Vec<BoxParams> = (0..n).map(|i| preds.consolidated_box(i)).collect();
        let (corner_pre, grads_pre) = corner_huber_loss(&raw_params, &gt_corners, &mask)?;
        let (corner_post, grads_post) = corner_huber_loss(&post_params, &gt_corners, &mask)?;

        // Classification on consolidated logits.
        let (classification, dlogits_post) =
            softmax_cross_entropy(&preds.consolidated_logits, &labels.class_targets)?;

        // Shape term: pooled member embeddings against the frozen decoder.
        let mut shape_loss = 0.0;
        let mut dembeddings = DenseTensor::zeros(vec![n, self.cfg.embed_dim]);
        if let Some(ctx) = shape {
            let mut memberships: Vec<Vec<usize>> = vec![Vec::new(); scene.gt.len()];
            for (i, m) in labels.matched_gt.iter().enumerate() {
                if let Some(g) = m {
                    memberships[*g].push(i);
                }
            }
            let qualifying: Vec<usize> = (0..scene.gt.len())
                .filter(|&g| memberships[g].len() >= self.cfg.min_shape_points)
                .collect();
            if !qualifying.is_empty() {
                let inv_q = 1.0 / qualifying.len() as f64;
                for &g in &qualifying {
                    let object = &scene.gt[g];
                    let member_positions: Vec<Vec3> = memberships[g]
                        .iter()
                        .map(|&i| scene.positions[i])
                        .collect();
                    let symmetry = ctx.symmetry_classes.contains(&object.class_id);
                    let Ok((canonical, _)) = preprocess_observed(
                        &member_positions,
                        &object.box3d,
                        ctx.ground_z,
                        symmetry,
                    ) else {
                        continue;
                    };
                    let queries = ray_augment(&canonical, ctx.delta);
                    if queries.is_empty() {
                        continue;
                    }
                    let (positions_t, targets) = queries_to_tensors(&queries);
                    let membership_slice = vec![memberships[g].clone()];
                    let pooled = pool_embeddings(&preds.embeddings, &membership_slice)?;
                    let (pred_sdf, dec_tape) =
                        ctx.decoder.forward(&positions_t, &pooled, BnMode::Eval)?;
                    let (object_loss, dpred) = prior_loss(&pred_sdf, &targets)?;
                    shape_loss += inv_q * object_loss;
                    let mut dpred_scaled = dpred;
                    dpred_scaled.scale(inv_q);
                    let (_, de) = ctx.decoder.backward(&dec_tape, &dpred_scaled)?;
                    // Decoder stays frozen: its gradients are discarded.
                    ctx.decoder.zero_grads();
                    let dper = pool_embeddings_backward(&de, &membership_slice, n);
                    dembeddings.add_assign(&dper);
                }
            }
        }

        let total = corner_pre + corner_post + classification + shape_loss;

        // ---- backward ----
        // Post-consolidation attribute gradient.
        let c_attr = 12 + self.cfg.num_classes + 1;
        let mut dpost = DenseTensor::zeros(vec![n, c_attr]);
        for i in 0..n {
            let g = &grads_post[i];
            let row = dpost.row_mut(i);
            row[0..3].copy_from_slice(&g.center.to_array());
            row[3..6].copy_from_slice(&g.size.to_array());
            row[6..12].copy_from_slice(&g.rot6);
            for (c, v) in row[12..].iter_mut().enumerate() {
                *v = dlogits_post.at2(i, c);
            }
        }
        let (mut dattrs, dweights) = match &tape.consolidate_tape {
            Some(cons_tape) => {
                graph_consolidate_backward(cons_tape, &tape.graph, &tape.weights, &dpost)?
            }
            None => (dpost, vec![0.0; n]),
        };

        // Add the pre-consolidation corner gradients onto the raw columns.
        for i in 0..n {
            let g = &grads_pre[i];
            let row = dattrs.row_mut(i);
            row[0] += g.center.x;
            row[1] += g.center.y;
            row[2] += g.center.z;
            row[3] += g.size.x;
            row[4] += g.size.y;
            row[5] += g.size.z;
            for (c, v) in row[6..12].iter_mut().enumerate() {
                *v += g.rot6[c];
            }
        }

        // Map attribute gradients back to head outputs.
        let mut doffsets = DenseTensor::zeros(vec![n, 3]);
        let mut dsize_raw = DenseTensor::zeros(vec![n, 3]);
        let mut drot = DenseTensor::zeros(vec![n, 6]);
        let mut dsem = DenseTensor::zeros(vec![n, self.cfg.num_classes + 1]);
        let mut dvote = DenseTensor::zeros(vec![n, 1]);
        for i in 0..n {
            let row = dattrs.row(i);
            doffsets.row_mut(i).copy_from_slice(&row[0..3]);
            // size = anchor * exp(clamped raw): d/draw = size value inside
            // the clamp, zero beyond it.
            for (k, anchor) in [
                self.cfg.anchor_size.x,
                self.cfg.anchor_size.y,
                self.cfg.anchor_size.z,
            ]
            .into_iter()
            .enumerate()
            {
                let raw = tape.size_raw_point.at2(i, k);
                let g = if raw.abs() < SIZE_LOG_CLAMP {
                    row[3 + k] * anchor * raw.exp()
                } else {
                    0.0
                };
                dsize_raw.set2(i, k, g);
            }
            drot.row_mut(i).copy_from_slice(&row[6..12]);
            dsem.row_mut(i).copy_from_slice(&row[12..]);
            // weights = exp(clamped logit).
            let logit = preds.vote_logits.at2(i, 0);
            let dw = if logit.abs() < VOTE_LOGIT_CLAMP {
                dweights[i] * tape.weights[i]
            } else {
                0.0
            };
            dvote.set2(i, 0, dw);
        }

        // Heads backward: voxel gathers are adjoint-accumulated first.
        let m = tape.num_voxels;
        let to_voxel =
            |d: &DenseTensor| voxel_to_point_backward(d, &tape.point_to_voxel, m);
        let mut dfeat = DenseTensor::zeros(vec![m, self.backbone_cfg.feature_dim()]);
        let head_jobs: [(&mut HeadPair, &HeadTape, DenseTensor); 6] = [
            (&mut self.center_head, &tape.center_tape, to_voxel(&doffsets)),
            (&mut self.size_head, &tape.size_tape, to_voxel(&dsize_raw)),
            (&mut self.rot_head, &tape.rot_tape, to_voxel(&drot)),
            (&mut self.semantic_head, &tape.sem_tape, to_voxel(&dsem)),
            (&mut self.vote_head, &tape.vote_tape, to_voxel(&dvote)),
            (&mut self.embed_head, &tape.embed_tape, to_voxel(&dembeddings)),
        ];
        for (head, head_tape, dout_vox) in head_jobs {
            let dh = head.backward(&tape.voxel_features, &tape.nbrs, head_tape, &dout_vox)?;
            dfeat.add_assign(&dh);
        }

        self.backbone.backward(&tape.backbone_tape, &dfeat)?;

        Ok(LossBreakdown {
            total,
            corner_pre,
            corner_post,
            classification,
            shape: shape_loss,
            num_points: n,
            num_positive: labels.positive.iter().filter(|&&p| p).count(),
        })
    }

    /// Loss without touching gradients (for finite differences): runs on a
    /// clone so parameters, momentum, and running stats stay untouched.
    pub fn loss_only(
        &self,
        scene: &SceneSample,
        shape: Option<&ShapeSupervision>,
        mode: BnMode,
        pinned: Option<&PinnedDiscrete>,
    ) -> Result<LossBreakdown> {
        let mut work = self.clone();
        let mut shape_clone = shape.map(|s| ShapeSupervision {
            decoder: s.decoder.clone(),
            delta: s.delta,
            symmetry_classes: s.symmetry_classes.clone(),
            ground_z: s.ground_z,
        });
        work.loss_and_backward_pinned(scene, shape_clone.as_mut(), mode, pinned)
    }

    /// Captures the discrete structures (labels, graph) of the current
    /// parameters for pinned finite-difference evaluation.
    pub fn pin_discrete(&self, scene: &SceneSample, mode: BnMode) -> Result<PinnedDiscrete> {
        let mut work = self.clone();
        let (preds, tape) = work.forward_internal(&scene.positions, mode, None)?;
        let labels = work.compute_labels(&preds, scene);
        Ok(PinnedDiscrete {
            labels,
            graph: tape.graph,
        })
    }

    fn compute_labels(&self, preds: &PointPredictions, scene: &SceneSample) -> DynamicLabels {
        if self.cfg.use_dynamic_labels {
            let boxes: Vec<crate::geometry::Box3D> = (0..preds.len())
                .map(|i| preds.consolidated_box(i).to_box())
                .collect();
            dynamic_labels(
                &boxes,
                &scene.positions,
                &scene.gt,
                self.cfg.iou_positive_threshold,
            )
        } else {
            // Plain labels: positive iff inside a ground-truth box.
            let n = scene.positions.len();
            let mut class_targets = vec![0usize; n];
            let mut matched_gt = vec![None; n];
            let mut positive = vec![false; n];
            for i in 0..n {
                if let Some(g) = scene
                    .gt
                    .iter()
                    .position(|o| point_in_box(scene.positions[i], &o.box3d))
                {
                    matched_gt[i] = Some(g);
                    positive[i] = true;
                    class_targets[i] = scene.gt[g].class_id;
                }
            }
            DynamicLabels {
                class_targets,
                matched_gt,
                positive,
            }
        }
    }

    /// Inference: consolidated per-point boxes, diversity-aware proposal
    /// sampling on foreground scores, then NMS. Output boxes are
    /// yaw-projected (ground truth and the box file format are yaw-only).
    pub fn predict(&mut self, positions: &[Vec3]) -> Result<Vec<Detection>> {
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let (preds, _tape) = self.forward_internal(positions, BnMode::Eval, None)?;
        let n = preds.len();
        let probs = softmax_probs(&preds.consolidated_logits);
        let scores: Vec<f64> = (0..n).map(|i| 1.0 - probs.at2(i, 0)).collect();
        let selected = propose_boxes(
            &scores,
            &preds.consolidated_centers,
            self.cfg.alpha,
            self.cfg.max_proposals,
        );
        let proposals: Vec<Proposal> = selected
            .iter()
            .map(|&i| {
                let class_id = (1..=self.cfg.num_classes)
                    .max_by(|&a, &b| {
                        probs
                            .at2(i, a)
                            .partial_cmp(&probs.at2(i, b))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(1);
                Proposal {
                    box3d: yaw_projected(&preds.consolidated_box(i).to_box()),
                    class_id,
                    score: scores[i],
                    point_index: i,
                }
            })
            .collect();
        let kept = nms(&proposals, self.cfg.nms_iou);
        Ok(kept
            .into_iter()
            .map(|i| Detection {
                box3d: proposals[i].box3d,
                class_id: proposals[i].class_id,
                score: proposals[i].score,
                point_index: proposals[i].point_index,
            })
            .collect())
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("detector.num_classes", self.cfg.num_classes);
        ckpt.set_meta("detector.embed_dim", self.cfg.embed_dim);
        ckpt.set_meta("detector.voxel_size", self.cfg.voxel_size);
        ckpt.set_meta("detector.k_neighbors", self.cfg.k_neighbors);
        ckpt.set_meta("detector.graph_layers", self.cfg.graph_layers);
        ckpt.set_meta("detector.alpha", self.cfg.alpha);
        ckpt.set_meta("detector.nms_iou", self.cfg.nms_iou);
        ckpt.set_meta("detector.max_proposals", self.cfg.max_proposals);
        ckpt.set_meta("detector.min_shape_points", self.cfg.min_shape_points);
        ckpt.set_meta("detector.iou_positive_threshold", self.cfg.iou_positive_threshold);
        ckpt.set_meta("detector.use_consolidation", self.cfg.use_consolidation);
        ckpt.set_meta("detector.use_dynamic_labels", self.cfg.use_dynamic_labels);
        ckpt.set_meta(
            "detector.anchor_size",
            format!(
                "{},{},{}",
                self.cfg.anchor_size.x, self.cfg.anchor_size.y, self.cfg.anchor_size.z
            ),
        );
        ckpt.set_meta(
            "detector.encoder_channels",
            self.backbone_cfg
                .encoder_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        ckpt.set_meta(
            "detector.bottleneck_channels",
            self.backbone_cfg.bottleneck_channels,
        );
        ckpt.set_meta("detector.use_batchnorm", self.backbone_cfg.use_batchnorm);
        self.backbone.save(ckpt);
        let mut me = self.clone();
        for p in me.heads_mut().iter_mut().flat_map(|h| h.params_mut()) {
            ckpt.put(&p.name, &p.value);
        }
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Detector> {
        let meta_f64 = |key: &str| -> Result<f64> {
            ckpt.meta(key)
                .ok_or_else(|| Error::Format {
                    path: "<checkpoint>".into(),
                    detail: format!("missing meta '{key}'"),
                })?
                .parse()
                .map_err(|_| Error::Format {
                    path: "<checkpoint>".into(),
                    detail: format!("meta '{key}' is not a number"),
                })
        };
        let anchor_text = ckpt.meta("detector.anchor_size").unwrap_or("1.3,1.0,0.9");
        let anchor: Vec<f64> = anchor_text
            .split(',')
            .map(|t| t.parse().unwrap_or(1.0))
            .collect();
        let encoder_channels: Vec<usize> = ckpt
            .meta("detector.encoder_channels")
            .unwrap_or("8,12,16")
            .split(',')
            .filter_map(|t| t.parse().ok())
            .collect();
        let backbone_cfg = BackboneConfig {
            encoder_channels,
            bottleneck_channels: ckpt.meta_usize("detector.bottleneck_channels")?,
            input_channels: 1,
            use_batchnorm: ckpt.meta("detector.use_batchnorm") == Some("true"),
        };
        let cfg = DetectionConfig {
            k_neighbors: ckpt.meta_usize("detector.k_neighbors")?,
            graph_layers: ckpt.meta_usize("detector.graph_layers")?,
            alpha: meta_f64("detector.alpha")?,
            iou_positive_threshold: meta_f64("detector.iou_positive_threshold")?,
            nms_iou: meta_f64("detector.nms_iou")?,
            max_proposals: ckpt.meta_usize("detector.max_proposals")?,
            min_shape_points: ckpt.meta_usize("detector.min_shape_points")?,
            num_classes: ckpt.meta_usize("detector.num_classes")?,
            voxel_size: meta_f64("detector.voxel_size")?,
            anchor_size: Vec3::new(anchor[0], anchor[1], anchor[2]),
            embed_dim: ckpt.meta_usize("detector.embed_dim")?,
            use_consolidation: ckpt.meta("detector.use_consolidation") == Some("true"),
            use_dynamic_labels: ckpt.meta("detector.use_dynamic_labels") == Some("true"),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut detector = Detector::new(backbone_cfg, cfg, &mut rng);
        detector.backbone.load(ckpt)?;
        for p in detector.heads_mut().iter_mut().flat_map(|h| h.params_mut()) {
            p.value = ckpt.get(&p.name, p.value.shape())?;
        }
        Ok(detector)
    }
}

use rand::SeedableRng;

/// Discrete per-iteration structures held fixed while differentiating.
#[derive(Debug, Clone)]
pub struct PinnedDiscrete {
    pub labels: DynamicLabels,
    pub graph: VoteGraph,
}

struct ForwardTape {
    point_to_voxel: Vec<u32>,
    num_voxels: usize,
    backbone_tape: super::backbone::BackboneTape,
    nbrs: crate::sparse::NeighborTable,
    voxel_features: DenseTensor,
    center_tape: HeadTape,
    size_tape: HeadTape,
    rot_tape: HeadTape,
    sem_tape: HeadTape,
    vote_tape: HeadTape,
    embed_tape: HeadTape,
    size_raw_point: DenseTensor,
    graph: super::graph::VoteGraph,
    weights: Vec<f64>,
    consolidate_tape: Option<super::graph::ConsolidateTape>,
}

impl HasParams for Detector {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.backbone.params_mut();
        ps.extend(self.center_head.params_mut());
        ps.extend(self.size_head.params_mut());
        ps.extend(self.rot_head.params_mut());
        ps.extend(self.semantic_head.params_mut());
        ps.extend(self.vote_head.params_mut());
        ps.extend(self.embed_head.params_mut());
        ps
    }
}
