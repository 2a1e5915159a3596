//! Diversity-aware proposal sampling (highest score, farthest from already
//! picked) and greedy non-maximum suppression.

use crate::geometry::{iou_oriented, Box3D, Vec3};

/// Scores below this are treated as zero and never proposed (log undefined).
pub const MIN_PROPOSAL_SCORE: f64 = 1e-12;

/// Greedy selection maximizing `log(score) + alpha * log(min distance to
/// already selected centers)`. The first pick is the pure score argmax (the
/// distance term is undefined for an empty selection); candidates whose
/// distance to the selected set is zero are skipped (their objective is
/// negative infinity). Ties break toward the lower index. Returns selected
/// candidate indices in selection order.
pub fn propose_boxes(
    scores: &[f64],
    centers: &[Vec3],
    alpha: f64,
    max_proposals: usize,
) -> Vec<usize> {
    assert_eq!(scores.len(), centers.len());
    let candidates: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] >= MIN_PROPOSAL_SCORE)
        .collect();
    if candidates.is_empty() || max_proposals == 0 {
        return Vec::new();
    }

    // At alpha = 0 the diversity term vanishes identically (even for
    // coincident centers): plain top-k by (score, index).
    if alpha == 0.0 {
        let mut order = candidates;
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        order.truncate(max_proposals);
        return order;
    }

    let mut selected = Vec::new();
    let mut taken = vec![false; scores.len()];
    // Min distance from each candidate to the selected set, updated
    // incrementally after every pick.
    let mut min_dist = vec![f64::INFINITY; scores.len()];

    let first = candidates
        .iter()
        .copied()
        .reduce(|best, i| if scores[i] > scores[best] { i } else { best })
        .expect("non-empty");
    selected.push(first);
    taken[first] = true;

    while selected.len() < max_proposals && selected.len() < candidates.len() {
        let last = *selected.last().expect("non-empty");
        let mut best: Option<(f64, usize)> = None;
        for &i in &candidates {
            if taken[i] {
                continue;
            }
            let d = (centers[i] - centers[last]).norm();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] <= 0.0 {
                continue;
            }
            let objective = scores[i].ln() + alpha * min_dist[i].ln();
            let better = match best {
                None => true,
                Some((obj, idx)) => objective > obj || (objective == obj && i < idx),
            };
            if better {
                best = Some((objective, i));
            }
        }
        match best {
            Some((_, i)) => {
                selected.push(i);
                taken[i] = true;
            }
            None => break,
        }
    }
    selected
}

/// One scored box proposal tied back to its seed point.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub box3d: Box3D,
    pub class_id: usize,
    pub score: f64,
    pub point_index: usize,
}

/// Greedy NMS: proposals ordered by (score desc, index asc); a proposal is
/// suppressed when its IoU with any kept one exceeds the threshold. Returns
/// kept indices into `proposals` in keep order.
pub fn nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .partial_cmp(&proposals[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| {
            iou_oriented(&proposals[i].box3d, &proposals[j].box3d) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}
