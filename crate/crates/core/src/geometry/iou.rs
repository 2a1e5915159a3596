//! Box overlap measures: exact axis-aligned IoU, exact yaw-only oriented IoU
//! via BEV polygon clipping, and a deterministic sampled estimate used both
//! as the general-rotation fallback and as a test oracle.

use super::{point_in_box, Box3D, Vec3};
use crate::{Error, Result};

const YAW_TOL: f64 = 1e-9;

/// Exact IoU of two axis-aligned boxes. Errors if either rotation is not
/// the identity.
pub fn iou_axis_aligned(a: &Box3D, b: &Box3D) -> Result<f64> {
    if !a.rotation.is_identity(1e-9) || !b.rotation.is_identity(1e-9) {
        return Err(Error::Contract(
            "iou_axis_aligned requires identity rotations".into(),
        ));
    }
    let lo_a = a.center - a.size * 0.5;
    let hi_a = a.center + a.size * 0.5;
    let lo_b = b.center - b.size * 0.5;
    let hi_b = b.center + b.size * 0.5;
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = lo_a.component(k).max(lo_b.component(k));
        let hi = hi_a.component(k).min(hi_b.component(k));
        if hi <= lo {
            return Ok(0.0);
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// CCW corners of a box's bird's-eye-view rectangle.
fn bev_rect(b: &Box3D) -> [[f64; 2]; 4] {
    let yaw = b.rotation.yaw();
    let (s, c) = yaw.sin_cos();
    let hl = b.size.x * 0.5;
    let hw = b.size.y * 0.5;
    let locals = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    let mut out = [[0.0; 2]; 4];
    for (o, l) in out.iter_mut().zip(locals.iter()) {
        o[0] = b.center.x + c * l[0] - s * l[1];
        o[1] = b.center.y + s * l[0] + c * l[1];
    }
    out
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman: clips a convex polygon against the half-plane left of
/// the directed edge (e0 -> e1).
fn clip_edge(poly: &[[f64; 2]], e0: [f64; 2], e1: [f64; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let cur = poly[i];
        let prev = poly[(i + n - 1) % n];
        let cur_in = cross2(e0, e1, cur) >= 0.0;
        let prev_in = cross2(e0, e1, prev) >= 0.0;
        if cur_in != prev_in {
            // Intersection of segment (prev, cur) with line (e0, e1).
            let d_prev = cross2(e0, e1, prev);
            let d_cur = cross2(e0, e1, cur);
            let t = d_prev / (d_prev - d_cur);
            out.push([
                prev[0] + t * (cur[0] - prev[0]),
                prev[1] + t * (cur[1] - prev[1]),
            ]);
        }
        if cur_in {
            out.push(cur);
        }
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a.abs()
}

fn convex_intersection_area(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.to_vec();
    for i in 0..4 {
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_edge(&poly, b[i], b[(i + 1) % 4]);
    }
    polygon_area(&poly)
}

/// Oriented IoU. Exact (BEV polygon clipping times z-interval overlap) when
/// both rotations are yaw-only; otherwise falls back to the sampled
/// estimate. The boolean is true when the result is exact.
pub fn iou_oriented_flagged(a: &Box3D, b: &Box3D) -> (f64, bool) {
    if a.rotation.is_yaw_only(YAW_TOL) && b.rotation.is_yaw_only(YAW_TOL) {
        let z_lo = (a.center.z - a.size.z * 0.5).max(b.center.z - b.size.z * 0.5);
        let z_hi = (a.center.z + a.size.z * 0.5).min(b.center.z + b.size.z * 0.5);
        if z_hi <= z_lo {
            return (0.0, true);
        }
        let area = convex_intersection_area(&bev_rect(a), &bev_rect(b));
        let inter = area * (z_hi - z_lo);
        let union = a.volume() + b.volume() - inter;
        (if union > 0.0 { inter / union } else { 0.0 }, true)
    } else {
        (iou_sampled(a, b, 1_000_000), false)
    }
}

/// Oriented IoU as a plain scalar; see [`iou_oriented_flagged`].
pub fn iou_oriented(a: &Box3D, b: &Box3D) -> f64 {
    iou_oriented_flagged(a, b).0
}

/// Deterministic stratified-grid IoU estimate over the union's axis-aligned
/// bounding volume.
///
/// With `g^3` cells the estimate's error is bounded by the fraction of cells
/// cut by either box surface, O(surface area / (g * cell volume)); at
/// `n = 10^6` (g = 100) random meter-scale pairs land within 1e-2.
pub fn iou_sampled(a: &Box3D, b: &Box3D, n_samples: usize) -> f64 {
    assert!(n_samples >= 1, "n_samples must be >= 1");
    let (lo_a, hi_a) = aabb(a);
    let (lo_b, hi_b) = aabb(b);
    let lo = lo_a.min(lo_b);
    let hi = hi_a.max(hi_b);
    let g = (n_samples as f64).cbrt().floor().max(1.0) as usize;
    let cell = (hi - lo) * (1.0 / g as f64);
    let mut inter = 0u64;
    let mut union = 0u64;
    for ix in 0..g {
        for iy in 0..g {
            for iz in 0..g {
                let p = Vec3::new(
                    lo.x + (ix as f64 + 0.5) * cell.x,
                    lo.y + (iy as f64 + 0.5) * cell.y,
                    lo.z + (iz as f64 + 0.5) * cell.z,
                );
                let in_a = point_in_box(p, a);
                let in_b = point_in_box(p, b);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn aabb(b: &Box3D) -> (Vec3, Vec3) {
    let corners = super::box_corners(b);
    let mut lo = corners.0[0];
    let mut hi = corners.0[0];
    for c in &corners.0[1..] {
        lo = lo.min(*c);
        hi = hi.max(*c);
    }
    (lo, hi)
}
