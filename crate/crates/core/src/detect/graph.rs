//! Vote graph over predicted object centers and the weighted-average
//! consolidation applied across it.

use crate::geometry::Vec3;
use crate::nn::DenseTensor;
use crate::{Error, Result};

/// K-nearest-neighbor lists (self included) over predicted centers.
#[derive(Debug, Clone)]
pub struct VoteGraph {
    pub k: usize,
    /// Flattened n x k neighbor indices.
    neighbors: Vec<u32>,
}

impl VoteGraph {
    pub fn neighbors_of(&self, point: usize) -> &[u32] {
        &self.neighbors[point * self.k..(point + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.neighbors.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Exact KNN in center space; distance ties break toward the lower point
/// index, and every point's list includes itself.
pub fn build_vote_graph(centers: &[Vec3], k: usize) -> Result<VoteGraph> {
    let n = centers.len();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("K = {k} with {n} points")));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n);
    for i in 0..n {
        scratch.clear();
        for (j, &c) in centers.iter().enumerate() {
            scratch.push(((centers[i] - c).norm_sq(), j as u32));
        }
        let cmp = |a: &(f64, u32), b: &(f64, u32)| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        };
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_unstable_by(cmp);
        neighbors.extend(scratch[..k].iter().map(|&(_, j)| j));
    }
    Ok(VoteGraph { k, neighbors })
}

/// Inputs of every consolidation layer plus the final output; the backward
/// pass walks them in reverse.
pub struct ConsolidateTape {
    /// `levels[0]` is the original attribute matrix, `levels[layers]` the
    /// final output.
    levels: Vec<DenseTensor>,
    weight_sums: Vec<f64>,
}

/// Applies `a_x <- sum_{y in N(x)} w_y a_y / sum w_y` for `layers` rounds
/// over a fixed graph with fixed positive weights.
pub fn graph_consolidate(
    attrs: &DenseTensor,
    graph: &VoteGraph,
    weights: &[f64],
    layers: usize,
) -> Result<(DenseTensor, ConsolidateTape)> {
    let (n, c) = attrs.dims2()?;
    if graph.len() != n || weights.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "graph over {} points, weights {}, attrs {n}",
            graph.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Contract("vote weights must be positive".into()));
    }
    let weight_sums: Vec<f64> = (0..n)
        .map(|x| graph.neighbors_of(x).iter().map(|&y| weights[y as usize]).sum())
        .collect();

    let mut levels = Vec::with_capacity(layers + 1);
    levels.push(attrs.clone());
    let mut current = attrs.clone();
    for _ in 0..layers {
        let mut next = DenseTensor::zeros(vec![n, c]);
        for x in 0..n {
            let row = next.row_mut(x);
            for &y in graph.neighbors_of(x) {
                let w = weights[y as usize];
                for (acc, &v) in row.iter_mut().zip(current.row(y as usize)) {
                    *acc += w * v;
                }
            }
            let inv = 1.0 / weight_sums[x];
            for v in row {
                *v *= inv;
            }
        }
        levels.push(next.clone());
        current = next;
    }
    Ok((
        current,
        ConsolidateTape {
            levels,
            weight_sums,
        },
    ))
}

/// Backward of [`graph_consolidate`]: returns gradients w.r.t. the input
/// attributes and the per-point weights.
pub fn graph_consolidate_backward(
    tape: &ConsolidateTape,
    graph: &VoteGraph,
    weights: &[f64],
    dout: &DenseTensor,
) -> Result<(DenseTensor, Vec<f64>)> {
    let (n, c) = dout.dims2()?;
    let layers = tape.levels.len() - 1;
    let mut dcurrent = dout.clone();
    let mut dweights = vec![0.0; n];
    for layer in (0..layers).rev() {
        let input = &tape.levels[layer];
        let output = &tape.levels[layer + 1];
        let mut dinput = DenseTensor::zeros(vec![n, c]);
        for x in 0..n {
            let inv = 1.0 / tape.weight_sums[x];
            let dx_row = dcurrent.row(x);
            for &y in graph.neighbors_of(x) {
                let y = y as usize;
                let w = weights[y];
                let in_row = input.row(y);
                let out_row = output.row(x);
                let mut wdot = 0.0;
                let d_row = dinput.row_mut(y);
                for ch in 0..c {
                    d_row[ch] += dx_row[ch] * w * inv;
                    wdot += dx_row[ch] * (in_row[ch] - out_row[ch]);
                }
                dweights[y] += wdot * inv;
            }
        }
        dcurrent = dinput;
    }
    Ok((dcurrent, dweights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, GRADCHECK_H, GRADCHECK_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_centers(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            })
            .collect()
    }

    #[test]
    fn k1_graph_is_self_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = random_centers(10, &mut rng);
        let graph = build_vote_graph(&centers, 1).unwrap();
        for i in 0..10 {
            assert_eq!(graph.neighbors_of(i), &[i as u32]);
        }
    }

    #[test]
    fn coincident_clusters_stay_within_clusters() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(5.0, 0.0, 0.0);
        let centers = vec![a, a, a, b, b, b];
        let graph = build_vote_graph(&centers, 3).unwrap();
        for i in 0..3 {
            let mut nbrs: Vec<u32> = graph.neighbors_of(i).to_vec();
            nbrs.sort();
            assert_eq!(nbrs, vec![0, 1, 2]);
        }
        for i in 3..6 {
            let mut nbrs: Vec<u32> = graph.neighbors_of(i).to_vec();
            nbrs.sort();
            assert_eq!(nbrs, vec![3, 4, 5]);
        }
    }

    #[test]
    fn knn_matches_brute_force_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(2..80);
            let k = rng.random_range(1..=n);
            let centers = random_centers(n, &mut rng);
            let graph = build_vote_graph(&centers, k).unwrap();
            for i in 0..n {
                let mut all: Vec<(f64, u32)> = centers
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| ((centers[i] - c).norm_sq(), j as u32))
                    .collect();
                all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let expected: Vec<u32> = all[..k].iter().map(|&(_, j)| j).collect();
                assert_eq!(graph.neighbors_of(i), expected.as_slice());
            }
        }
    }

    #[test]
    fn rejects_k_larger_than_n() {
        let centers = random_centers(3, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(build_vote_graph(&centers, 4).is_err());
        assert!(build_vote_graph(&centers, 0).is_err());
    }

    #[test]
    fn equal_weights_give_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centers = random_centers(12, &mut rng);
        let graph = build_vote_graph(&centers, 4).unwrap();
        let attrs = DenseTensor::from_vec(
            vec![12, 2],
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let weights = vec![0.7; 12];
        let (out, _) = graph_consolidate(&attrs, &graph, &weights, 1).unwrap();
        for x in 0..12 {
            for c in 0..2 {
                let mean: f64 = graph
                    .neighbors_of(x)
                    .iter()
                    .map(|&y| attrs.at2(y as usize, c))
                    .sum::<f64>()
                    / 4.0;
                assert!((out.at2(x, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_weight_wins_in_the_limit() {
        let centers = vec![Vec3::ZERO, Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0)];
        let graph = build_vote_graph(&centers, 3).unwrap();
        let attrs = DenseTensor::from_vec(vec![3, 1], vec![1.0, 2.0, 3.0]);
        let weights = vec![1e-9, 1e12, 1e-9];
        let (out, _) = graph_consolidate(&attrs, &graph, &weights, 1).unwrap();
        for x in 0..3 {
            assert!((out.at2(x, 0) - 2.0).abs() < 1e-6, "dominant neighbor's value");
        }
    }

    #[test]
    fn consolidation_is_idempotent_on_consensus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centers = random_centers(15, &mut rng);
        let graph = build_vote_graph(&centers, 5).unwrap();
        let mut attrs = DenseTensor::zeros(vec![15, 3]);
        for x in 0..15 {
            attrs.row_mut(x).copy_from_slice(&[0.4, -1.2, 7.0]);
        }
        let weights: Vec<f64> = (0..15).map(|_| rng.random_range(0.1..5.0)).collect();
        let (out, _) = graph_consolidate(&attrs, &graph, &weights, 3).unwrap();
        for (a, b) in out.data().iter().zip(attrs.data()) {
            assert!((a - b).abs() < 1e-12, "consensus must be a fixed point");
        }
    }

    #[test]
    fn consolidation_output_in_convex_hull_of_neighbors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let centers = random_centers(30, &mut rng);
        let graph = build_vote_graph(&centers, 6).unwrap();
        let attrs = DenseTensor::from_vec(
            vec![30, 2],
            (0..60).map(|_| rng.random_range(-2.0..2.0)).collect(),
        );
        let weights: Vec<f64> = (0..30).map(|_| rng.random_range(0.01..10.0)).collect();
        let (out, _) = graph_consolidate(&attrs, &graph, &weights, 1).unwrap();
        for x in 0..30 {
            for c in 0..2 {
                let vals: Vec<f64> = graph
                    .neighbors_of(x)
                    .iter()
                    .map(|&y| attrs.at2(y as usize, c))
                    .collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.at2(x, c);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "outside hull");
            }
        }
    }

    #[test]
    fn consolidation_matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = rng.random_range(3..25);
            let k = rng.random_range(1..=n.min(6));
            let layers = rng.random_range(1..3);
            let centers = random_centers(n, &mut rng);
            let graph = build_vote_graph(&centers, k).unwrap();
            let attrs = DenseTensor::from_vec(
                vec![n, 3],
                (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..4.0)).collect();
            let (out, _) = graph_consolidate(&attrs, &graph, &weights, layers).unwrap();

            // Scalar re-implementation of Eq.-style averaging.
            let mut reference = attrs.clone();
            for _ in 0..layers {
                let mut next = DenseTensor::zeros(vec![n, 3]);
                for x in 0..n {
                    let mut wsum = 0.0;
                    for &y in graph.neighbors_of(x) {
                        wsum += weights[y as usize];
                    }
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for &y in graph.neighbors_of(x) {
                            acc += weights[y as usize] * reference.at2(y as usize, c);
                        }
                        next.set2(x, c, acc / wsum);
                    }
                }
                reference = next;
            }
            for (a, b) in out.data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consolidation_gradcheck_attrs_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 12;
        let centers = random_centers(n, &mut rng);
        let graph = build_vote_graph(&centers, 4).unwrap();
        let attrs = DenseTensor::from_vec(
            vec![n, 2],
            (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
        let probe = DenseTensor::from_vec(
            vec![n, 2],
            (0..n * 2).map(|i| ((i as f64) * 0.53 + 0.11).sin()).collect(),
        );

        let (_, tape) = graph_consolidate(&attrs, &graph, &weights, 2).unwrap();
        let (dattrs, dweights) =
            graph_consolidate_backward(&tape, &graph, &weights, &probe).unwrap();

        let mut a_flat = attrs.data().to_vec();
        let report = gradcheck(
            |av| {
                let at = DenseTensor::from_vec(vec![n, 2], av.to_vec());
                let (out, _) = graph_consolidate(&at, &graph, &weights, 2).unwrap();
                out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            },
            &mut a_flat,
            dattrs.data(),
            GRADCHECK_H,
        );
        assert!(report.passes(GRADCHECK_TOL), "dattrs: {report:?}");

        let mut w_flat = weights.clone();
        let report = gradcheck(
            |wv| {
                let (out, _) = graph_consolidate(&attrs, &graph, wv, 2).unwrap();
                out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            },
            &mut w_flat,
            &dweights,
            GRADCHECK_H,
        );
        assert!(report.passes(GRADCHECK_TOL), "dweights: {report:?}");
    }
}
