//! Marching cubes over a uniform grid on the canonical unit cube.

use super::mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use super::mesh::TriangleMesh;
use crate::geometry::Vec3;
use std::collections::HashMap;

/// Samples a scalar field on a `resolution^3` grid over `[0,1]^3`
/// (grid point i sits at `i / (resolution - 1)`).
pub fn sample_field_grid(field: impl Fn(Vec3) -> f64 + Sync, resolution: usize) -> Vec<f64> {
    assert!(resolution >= 2);
    let step = 1.0 / (resolution - 1) as f64;
    let mut values = vec![0.0; resolution * resolution * resolution];
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                let p = Vec3::new(i as f64 * step, j as f64 * step, k as f64 * step);
                values[(k * resolution + j) * resolution + i] = field(p);
            }
        }
    }
    values
}

/// Extracts the zero level set from grid values laid out as
/// `values[(k * res + j) * res + i]`. An all-positive or all-negative field
/// yields an empty mesh. Shared edge vertices are deduplicated, and edge
/// crossings are placed by linear interpolation.
pub fn marching_cubes_grid(values: &[f64], resolution: usize) -> TriangleMesh {
    assert_eq!(values.len(), resolution * resolution * resolution);
    let res = resolution;
    let step = 1.0 / (res - 1) as f64;
    let value_at = |i: usize, j: usize, k: usize| values[(k * res + j) * res + i];

    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    // Canonical edge id: (lattice index of the lower corner, axis).
    let mut edge_vertex: HashMap<(usize, u8), u32> = HashMap::new();

    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let mut corner_values = [0.0; 8];
                let mut cube_index = 0usize;
                for (c, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    let v = value_at(i + dx, j + dy, k + dz);
                    corner_values[c] = v;
                    if v < 0.0 {
                        cube_index |= 1 << c;
                    }
                }
                let tri_row = &TRI_TABLE[cube_index];
                if tri_row[0] < 0 {
                    continue;
                }

                let mut cell_edge_vertex = [u32::MAX; 12];
                let vertex_on_edge = |edge: usize,
                                          vertices: &mut Vec<Vec3>,
                                          edge_vertex: &mut HashMap<(usize, u8), u32>|
                 -> u32 {
                    let (ca, cb) = EDGE_CORNERS[edge];
                    let (ax, ay, az) = CORNER_OFFSETS[ca];
                    let (bx, by, bz) = CORNER_OFFSETS[cb];
                    let ga = (i + ax, j + ay, k + az);
                    let gb = (i + bx, j + by, k + bz);
                    // Canonicalize by the lower lattice corner and the axis.
                    let (lo, _hi, axis) = if ga <= gb {
                        (ga, gb, axis_of(ga, gb))
                    } else {
                        (gb, ga, axis_of(gb, ga))
                    };
                    let key = ((lo.2 * res + lo.1) * res + lo.0, axis);
                    if let Some(&v) = edge_vertex.get(&key) {
                        return v;
                    }
                    let va = corner_values[ca];
                    let vb = corner_values[cb];
                    let t = if (vb - va).abs() < 1e-30 {
                        0.5
                    } else {
                        (0.0 - va) / (vb - va)
                    };
                    let t = t.clamp(0.0, 1.0);
                    let pa = Vec3::new(ga.0 as f64, ga.1 as f64, ga.2 as f64) * step;
                    let pb = Vec3::new(gb.0 as f64, gb.1 as f64, gb.2 as f64) * step;
                    let pos = pa + (pb - pa) * t;
                    let index = vertices.len() as u32;
                    vertices.push(pos);
                    edge_vertex.insert(key, index);
                    index
                };

                let mut t = 0;
                while tri_row[t] >= 0 {
                    let mut tri = [0u32; 3];
                    for (slot, tri_v) in tri.iter_mut().enumerate() {
                        let edge = tri_row[t + slot] as usize;
                        if cell_edge_vertex[edge] == u32::MAX {
                            cell_edge_vertex[edge] =
                                vertex_on_edge(edge, &mut vertices, &mut edge_vertex);
                        }
                        *tri_v = cell_edge_vertex[edge];
                    }
                    // Degenerate (zero-area) triangles can appear when a
                    // corner value is exactly zero; drop them.
                    if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                        triangles.push(tri);
                    }
                    t += 3;
                }
            }
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

fn axis_of(lo: (usize, usize, usize), hi: (usize, usize, usize)) -> u8 {
    if hi.0 > lo.0 {
        0
    } else if hi.1 > lo.1 {
        1
    } else {
        2
    }
}

/// Marching cubes directly over a callable field.
pub fn marching_cubes(field: impl Fn(Vec3) -> f64 + Sync, resolution: usize) -> TriangleMesh {
    let values = sample_field_grid(field, resolution);
    marching_cubes_grid(&values, resolution)
}
