//! Oriented-box geometry: rotation parametrization, corner computation with
//! analytic gradients, the corner Huber loss, IoU, and canonical-frame
//! transforms.

mod iou;
mod vec3;

pub use iou::{iou_axis_aligned, iou_oriented, iou_oriented_flagged, iou_sampled};
pub use vec3::{Mat3, Vec3};

use crate::{Error, Result};

/// Six raw rotation outputs: (cos_x, sin_x, cos_y, sin_y, cos_z, sin_z).
/// Each pair is normalized before use; the raw values may have any norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationParams6(pub [f64; 6]);

impl RotationParams6 {
    /// Parameters of the identity rotation.
    pub fn identity() -> Self {
        RotationParams6([1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
    }

    pub fn from_yaw(yaw: f64) -> Self {
        RotationParams6([1.0, 0.0, 1.0, 0.0, yaw.cos(), yaw.sin()])
    }
}

/// A proper rotation: orthonormal 3x3 matrix with determinant +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Mat3);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Mat3::identity())
    }

    /// Rotation about the z axis by `yaw` radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Rotation3(Mat3::new([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        self.0.mul_vec(v)
    }

    /// Applies the inverse rotation (transpose).
    pub fn apply_inv(&self, v: Vec3) -> Vec3 {
        self.0.transpose_mul_vec(v)
    }

    /// True when this rotation is the identity within `tol` entrywise.
    pub fn is_identity(&self, tol: f64) -> bool {
        let m = &self.0;
        let i = Mat3::identity();
        for r in 0..3 {
            for c in 0..3 {
                if (m.at(r, c) - i.at(r, c)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// True when this rotation only rotates about the z axis (within `tol`).
    pub fn is_yaw_only(&self, tol: f64) -> bool {
        let m = &self.0;
        (m.at(2, 2) - 1.0).abs() <= tol
            && m.at(0, 2).abs() <= tol
            && m.at(1, 2).abs() <= tol
            && m.at(2, 0).abs() <= tol
            && m.at(2, 1).abs() <= tol
    }

    /// Yaw angle, meaningful when `is_yaw_only` holds.
    pub fn yaw(&self) -> f64 {
        self.0.at(1, 0).atan2(self.0.at(0, 0))
    }

    /// Wraps a matrix that is already a proper rotation. Debug-checked.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        debug_assert!(m.is_orthonormal(1e-6) && (m.det() - 1.0).abs() < 1e-6);
        Rotation3(m)
    }
}

/// Oriented 3D box: center, size (length, width, height) and rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vec3,
    /// (length, width, height) along the box local x, y, z axes. All > 0.
    pub size: Vec3,
    pub rotation: Rotation3,
}

impl Box3D {
    pub fn new(center: Vec3, size: Vec3, rotation: Rotation3) -> Self {
        debug_assert!(size.x > 0.0 && size.y > 0.0 && size.z > 0.0);
        Box3D {
            center,
            size,
            rotation,
        }
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Self {
        Box3D::new(center, size, Rotation3::identity())
    }

    pub fn with_yaw(center: Vec3, size: Vec3, yaw: f64) -> Self {
        Box3D::new(center, size, Rotation3::from_yaw(yaw))
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }
}

/// The eight corners of a box in a fixed order: corner index `j` uses
/// bit 0 for the x (length) sign, bit 1 for y (width), bit 2 for z (height),
/// with a set bit meaning `+half-extent`, then rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [Vec3; 8]);

impl CornerSet {
    pub fn centroid(&self) -> Vec3 {
        let mut s = Vec3::ZERO;
        for c in &self.0 {
            s = s + *c;
        }
        s * (1.0 / 8.0)
    }
}

/// Local corner offset signs for corner index `j` (see [`CornerSet`]).
#[inline]
fn corner_signs(j: usize) -> Vec3 {
    Vec3::new(
        if j & 1 != 0 { 1.0 } else { -1.0 },
        if j & 2 != 0 { 1.0 } else { -1.0 },
        if j & 4 != 0 { 1.0 } else { -1.0 },
    )
}

/// A point cloud: positions plus an optional row-major N x I feature block.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub positions: Vec<Vec3>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<Vec3>) -> Self {
        PointCloud {
            positions,
            features: Vec::new(),
            feature_dim: 0,
        }
    }

    pub fn new(positions: Vec<Vec3>, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if features.len() != positions.len() * feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} feature values for {} points x {} dims",
                features.len(),
                positions.len(),
                feature_dim
            )));
        }
        Ok(PointCloud {
            positions,
            features,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

/// Raw box parameters as predicted by a network head: loss gradients flow
/// back into all twelve numbers.
#[derive(Debug, Clone, Copy)]
pub struct BoxParams {
    pub center: Vec3,
    pub size: Vec3,
    pub rot6: RotationParams6,
}

impl BoxParams {
    pub fn to_box(&self) -> Box3D {
        Box3D::new(self.center, self.size, rotation_from_params(&self.rot6))
    }
}

/// Gradient of a scalar loss w.r.t. one [`BoxParams`].
#[derive(Debug, Clone, Copy, Default)]
pub struct BoxParamsGrad {
    pub center: Vec3,
    pub size: Vec3,
    pub rot6: [f64; 6],
}

impl BoxParamsGrad {
    pub fn accumulate(&mut self, other: &BoxParamsGrad) {
        self.center = self.center + other.center;
        self.size = self.size + other.size;
        for k in 0..6 {
            self.rot6[k] += other.rot6[k];
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.center = self.center * s;
        self.size = self.size * s;
        for k in 0..6 {
            self.rot6[k] *= s;
        }
    }
}

const PAIR_NORM_MIN: f64 = 1e-12;

/// Normalizes one (cos, sin) pair. A pair with norm below 1e-12 degrades to
/// the identity angle (1, 0) with zero gradient.
#[inline]
fn normalize_pair(c: f64, s: f64) -> (f64, f64, f64) {
    let r = (c * c + s * s).sqrt();
    if r < PAIR_NORM_MIN {
        (1.0, 0.0, 0.0)
    } else {
        (c / r, s / r, r)
    }
}

fn rot_x(c: f64, s: f64) -> Mat3 {
    Mat3::new([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
}

fn rot_y(c: f64, s: f64) -> Mat3 {
    Mat3::new([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
}

fn rot_z(c: f64, s: f64) -> Mat3 {
    Mat3::new([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
}

/// Builds `R = Rx * Ry * Rz` from six raw (cos, sin) outputs, normalizing
/// each pair to unit norm first.
pub fn rotation_from_params(p: &RotationParams6) -> Rotation3 {
    let v = &p.0;
    let (cx, sx, _) = normalize_pair(v[0], v[1]);
    let (cy, sy, _) = normalize_pair(v[2], v[3]);
    let (cz, sz, _) = normalize_pair(v[4], v[5]);
    let m = rot_x(cx, sx).mul(&rot_y(cy, sy)).mul(&rot_z(cz, sz));
    Rotation3(m)
}

/// `rotation_from_params` plus the six partial derivative matrices
/// `dR/dp_k` of the result w.r.t. the raw inputs.
pub fn rotation_from_params_with_grad(p: &RotationParams6) -> (Rotation3, [Mat3; 6]) {
    let v = &p.0;
    let (cx, sx, rx) = normalize_pair(v[0], v[1]);
    let (cy, sy, ry) = normalize_pair(v[2], v[3]);
    let (cz, sz, rz) = normalize_pair(v[4], v[5]);

    let mx = rot_x(cx, sx);
    let my = rot_y(cy, sy);
    let mz = rot_z(cz, sz);
    let myz = my.mul(&mz);
    let m = mx.mul(&myz);

    // d(normalized)/d(raw) for a pair (c, s) with norm r:
    //   dcn/dc = s^2/r^3, dcn/ds = -c s/r^3, dsn/dc = -c s/r^3, dsn/ds = c^2/r^3
    // Degenerate pairs were snapped to (1, 0); their gradient is zero.
    let pair_jac = |c: f64, s: f64, r: f64| -> [[f64; 2]; 2] {
        if r < PAIR_NORM_MIN {
            [[0.0, 0.0], [0.0, 0.0]]
        } else {
            let r3 = r * r * r;
            [[s * s / r3, -c * s / r3], [-c * s / r3, c * c / r3]]
        }
    };
    let jx = pair_jac(v[0], v[1], rx);
    let jy = pair_jac(v[2], v[3], ry);
    let jz = pair_jac(v[4], v[5], rz);

    // Partials of the single-axis matrices w.r.t. their normalized cos/sin.
    let dmx_dc = Mat3::new([[0.0; 3], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let dmx_ds = Mat3::new([[0.0; 3], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]);
    let dmy_dc = Mat3::new([[1.0, 0.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0]]);
    let dmy_ds = Mat3::new([[0.0, 0.0, 1.0], [0.0; 3], [-1.0, 0.0, 0.0]]);
    let dmz_dc = Mat3::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0; 3]]);
    let dmz_ds = Mat3::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]]);

    let mxy = mx.mul(&my);
    let grads = [
        // raw cos_x, sin_x
        dmx_dc
            .scaled(jx[0][0])
            .add(&dmx_ds.scaled(jx[1][0]))
            .mul(&myz),
        dmx_dc
            .scaled(jx[0][1])
            .add(&dmx_ds.scaled(jx[1][1]))
            .mul(&myz),
        // raw cos_y, sin_y
        mx.mul(&dmy_dc.scaled(jy[0][0]).add(&dmy_ds.scaled(jy[1][0])))
            .mul(&mz),
        mx.mul(&dmy_dc.scaled(jy[0][1]).add(&dmy_ds.scaled(jy[1][1])))
            .mul(&mz),
        // raw cos_z, sin_z
        mxy.mul(&dmz_dc.scaled(jz[0][0]).add(&dmz_ds.scaled(jz[1][0]))),
        mxy.mul(&dmz_dc.scaled(jz[0][1]).add(&dmz_ds.scaled(jz[1][1]))),
    ];
    (Rotation3(m), grads)
}

/// The eight corners of `b` in the fixed [`CornerSet`] order.
pub fn box_corners(b: &Box3D) -> CornerSet {
    let half = b.size * 0.5;
    let mut corners = [Vec3::ZERO; 8];
    for (j, corner) in corners.iter_mut().enumerate() {
        let s = corner_signs(j);
        let local = Vec3::new(s.x * half.x, s.y * half.y, s.z * half.z);
        *corner = b.center + b.rotation.apply(local);
    }
    CornerSet(corners)
}

/// Corners of the box described by raw parameters, plus everything needed to
/// push a corner-space gradient back onto the parameters.
pub struct CornersWithGrad {
    pub corners: CornerSet,
    rotation: Rotation3,
    drot: [Mat3; 6],
    half: Vec3,
}

pub fn box_corners_with_grad(p: &BoxParams) -> CornersWithGrad {
    let (rotation, drot) = rotation_from_params_with_grad(&p.rot6);
    let half = p.size * 0.5;
    let mut corners = [Vec3::ZERO; 8];
    for (j, corner) in corners.iter_mut().enumerate() {
        let s = corner_signs(j);
        let local = Vec3::new(s.x * half.x, s.y * half.y, s.z * half.z);
        *corner = p.center + rotation.apply(local);
    }
    CornersWithGrad {
        corners: CornerSet(corners),
        rotation,
        drot,
        half,
    }
}

impl CornersWithGrad {
    /// Chains `dL/dcorner_j` for all 8 corners into a [`BoxParamsGrad`].
    pub fn backward(&self, dcorners: &[Vec3; 8]) -> BoxParamsGrad {
        let mut g = BoxParamsGrad::default();
        let r = self.rotation.matrix();
        for (j, dc) in dcorners.iter().enumerate() {
            let s = corner_signs(j);
            g.center = g.center + *dc;
            // dcorner/dsize_k = R e_k * sign_k / 2
            g.size.x += 0.5 * s.x * dc.dot(r.col(0));
            g.size.y += 0.5 * s.y * dc.dot(r.col(1));
            g.size.z += 0.5 * s.z * dc.dot(r.col(2));
            let local = Vec3::new(s.x * self.half.x, s.y * self.half.y, s.z * self.half.z);
            for k in 0..6 {
                g.rot6[k] += dc.dot(self.drot[k].mul_vec(local));
            }
        }
        g
    }
}

/// Huber transition point for the corner loss, in scene units.
pub const CORNER_HUBER_DELTA: f64 = 1.0;

/// Huber value and derivative at distance `d >= 0`.
#[inline]
fn huber(d: f64, delta: f64) -> (f64, f64) {
    if d <= delta {
        (0.5 * d * d, d)
    } else {
        (delta * (d - 0.5 * delta), delta)
    }
}

/// Mean Huber corner loss over masked points.
///
/// Returns `(1 / (8 * sum(mask))) * sum_i mask_i sum_j Huber(|p_ij - g_ij|)`
/// and the gradients w.r.t. each predicted box's raw parameters. Corners are
/// matched index-to-index, so predictions and ground truth must share the
/// [`CornerSet`] ordering convention. A fully unmasked batch yields loss 0
/// with zero gradients.
pub fn corner_huber_loss(
    pred: &[BoxParams],
    gt: &[CornerSet],
    mask: &[bool],
) -> Result<(f64, Vec<BoxParamsGrad>)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "corner loss lengths: pred {}, gt {}, mask {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    let mut grads = vec![BoxParamsGrad::default(); pred.len()];
    if active == 0 {
        return Ok((0.0, grads));
    }
    let norm = 1.0 / (8.0 * active as f64);
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let cg = box_corners_with_grad(&pred[i]);
        let mut dcorners = [Vec3::ZERO; 8];
        for j in 0..8 {
            let diff = cg.corners.0[j] - gt[i].0[j];
            let d = diff.norm();
            let (value, dvalue) = huber(d, CORNER_HUBER_DELTA);
            loss += norm * value;
            if d > 1e-30 {
                dcorners[j] = diff * (norm * dvalue / d);
            }
        }
        grads[i] = cg.backward(&dcorners);
    }
    Ok((loss, grads))
}

/// True iff `p` lies inside or on the boundary of `b` (boundary inclusive).
/// A 1e-9 slack absorbs rotation round-off so exact corner points stay
/// inside at meter scale.
pub fn point_in_box(p: Vec3, b: &Box3D) -> bool {
    const SLACK: f64 = 1e-9;
    let local = b.rotation.apply_inv(p - b.center);
    let half = b.size * 0.5;
    local.x.abs() <= half.x + SLACK
        && local.y.abs() <= half.y + SLACK
        && local.z.abs() <= half.z + SLACK
}

/// Rigid + uniform-scale map between scene coordinates and an object's
/// canonical unit cube.
#[derive(Debug, Clone, Copy)]
pub struct CanonicalFrame {
    pub center: Vec3,
    pub rotation: Rotation3,
    /// World length of the unit cube edge: `max(size) * (1 + 2 * margin)`.
    pub scale: f64,
}

impl CanonicalFrame {
    pub fn new(b: &Box3D, margin: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&margin) {
            return Err(Error::Contract(format!(
                "canonical margin {margin} outside [0, 0.5)"
            )));
        }
        let max_size = b.size.x.max(b.size.y).max(b.size.z);
        Ok(CanonicalFrame {
            center: b.center,
            rotation: b.rotation,
            scale: max_size * (1.0 + 2.0 * margin),
        })
    }

    /// Scene position to canonical cube position; the box center maps to
    /// (0.5, 0.5, 0.5).
    pub fn to_canonical(&self, p: Vec3) -> Vec3 {
        self.rotation.apply_inv(p - self.center) * (1.0 / self.scale) + Vec3::splat(0.5)
    }

    /// Inverse of [`Self::to_canonical`]; used for mesh export.
    pub fn to_scene(&self, q: Vec3) -> Vec3 {
        self.rotation.apply((q - Vec3::splat(0.5)) * self.scale) + self.center
    }

    /// A world-space distance expressed in canonical units.
    pub fn scale_to_canonical(&self, d: f64) -> f64 {
        d / self.scale
    }
}

/// Projects points into the box's canonical unit cube. The returned frame
/// exposes the inverse transform.
pub fn canonicalize_points(
    points: &[Vec3],
    b: &Box3D,
    margin: f64,
) -> Result<(Vec<Vec3>, CanonicalFrame)> {
    let frame = CanonicalFrame::new(b, margin)?;
    Ok((
        points.iter().map(|&p| frame.to_canonical(p)).collect(),
        frame,
    ))
}

#[cfg(test)]
mod tests;
