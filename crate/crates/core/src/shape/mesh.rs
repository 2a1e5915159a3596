//! Triangle meshes: area, surface sampling, Chamfer distance, and OBJ/PLY
//! export.

use crate::geometry::{CanonicalFrame, Vec3};
use crate::{Error, Result};
use rand::Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                (b - a).cross(c - a).norm() * 0.5
            })
            .sum()
    }

    /// Area-weighted uniform surface samples.
    pub fn sample_points(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        if self.is_empty() || n == 0 {
            return Vec::new();
        }
        let areas: Vec<f64> = self
            .triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                (b - a).cross(c - a).norm() * 0.5
            })
            .collect();
        let total: f64 = areas.iter().sum();
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        (0..n)
            .map(|_| {
                let pick = rng.random_range(0.0..total);
                let idx = cumulative.partition_point(|&c| c < pick);
                let t = &self.triangles[idx.min(self.triangles.len() - 1)];
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                let (mut u, mut v) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + (b - a) * u + (c - a) * v
            })
            .collect()
    }

    /// Maps all vertices from canonical to scene coordinates.
    pub fn to_scene_frame(&self, frame: &CanonicalFrame) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|&v| frame.to_scene(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

/// Symmetric mean nearest-neighbor distance between two point sets.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer needs non-empty sets");
    let one_way = |from: &[Vec3], to: &[Vec3]| -> f64 {
        from.iter()
            .map(|&p| {
                to.iter()
                    .map(|&q| (p - q).norm_sq())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

/// ASCII OBJ: `v x y z` lines then 1-based `f a b c` lines.
pub fn write_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let display = path.display().to_string();
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    std::fs::write(path, out).map_err(|e| Error::io(display, e))
}

/// Binary little-endian PLY with float vertices and uint triangle indices.
pub fn write_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let display = path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(
        format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
            mesh.vertices.len(),
            mesh.triangles.len()
        )
        .as_bytes(),
    );
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        buf.push(3);
        for &i in t {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(display, e))
}
