//! Pinhole camera math and SE(3) rigid transforms.
//!
//! Rotations are stored as orthonormal matrices; constructors accept unit
//! quaternions and axis-angle vectors. Pixel convention throughout the crate:
//! `(u, v) = (column, row)`, pixel centers at integer coordinates, sampling
//! domain `[0, W-1] x [0, H-1]`.

use crate::Real;
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("non-positive depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("rotation is not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("rotation determinant {det} is not +1")]
    NotProperRotation { det: f64 },
}

/// An SE(3) pose: rotation then translation, `x' = R x + t`, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<S> {
    pub rotation: Matrix3<S>,
    pub translation: Vector3<S>,
}

impl<S: Real> RigidTransform<S> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<S>, translation: Vector3<S>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<S>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Build from a unit quaternion (w, x, y, z). The quaternion is
    /// normalized first, so any non-zero input yields a valid rotation.
    pub fn from_quaternion(wxyz: [S; 4], translation: Vector3<S>) -> Self {
        Self {
            rotation: rotation_from_quaternion(wxyz),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<S>, translation: Vector3<S>) -> Self {
        Self {
            rotation: rotation_from_axis_angle(axis_angle),
            translation,
        }
    }

    /// Check the rotation invariants: orthonormality and det = +1, both
    /// within 1e-6.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let gram = self.rotation.transpose() * self.rotation;
        let mut deviation = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                deviation = deviation.max((gram[(i, j)].to_f64() - target).abs());
            }
        }
        if deviation > 1e-6 {
            return Err(GeometryError::NotOrthonormal { deviation });
        }
        let det = self.rotation.determinant().to_f64();
        if (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotProperRotation { det });
        }
        Ok(())
    }

    pub fn apply(&self, point: &Vector3<S>) -> Vector3<S> {
        self.rotation * point + self.translation
    }

    /// `self` after `other`: `(self ∘ other)(x) = self(other(x))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_t = self.rotation.transpose();
        Self {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<S> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        h
    }

    pub fn from_homogeneous(h: &Matrix4<S>) -> Self {
        Self {
            rotation: h.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: h.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Rotation as a unit quaternion (w, x, y, z), w >= 0.
    pub fn rotation_quaternion(&self) -> [S; 4] {
        quaternion_from_rotation(&self.rotation)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.rotation[(i, j)] - other.rotation[(i, j)]).to_f64().abs());
            }
            d = d.max((self.translation[i] - other.translation[i]).to_f64().abs());
        }
        d
    }
}

/// Rodrigues' formula. Small angles fall back to the second-order Taylor
/// expansion so the map stays smooth through zero.
pub fn rotation_from_axis_angle<S: Real>(v: Vector3<S>) -> Matrix3<S> {
    let theta_sq = v.dot(&v);
    let theta = nalgebra::ComplexField::sqrt(theta_sq);
    let k = skew(&v);
    let k2 = k * k;
    let (a, b) = if theta.to_f64() < 1e-6 {
        // sin(t)/t ~ 1 - t^2/6, (1-cos(t))/t^2 ~ 1/2 - t^2/24
        (
            S::one() - theta_sq / S::lit(6.0),
            S::lit(0.5) - theta_sq / S::lit(24.0),
        )
    } else {
        (
            nalgebra::ComplexField::sin(theta) / theta,
            (S::one() - nalgebra::ComplexField::cos(theta)) / theta_sq,
        )
    };
    Matrix3::identity() + k * a + k2 * b
}

/// Partial derivatives of `rotation_from_axis_angle` with respect to each
/// axis-angle component (Gallego & Yezzi closed form).
pub fn rotation_axis_angle_jacobian<S: Real>(v: Vector3<S>) -> [Matrix3<S>; 3] {
    let r = rotation_from_axis_angle(v);
    let theta_sq = v.dot(&v);
    let mut out = [Matrix3::zeros(); 3];
    if theta_sq.to_f64() < 1e-12 {
        // dR/dv_i -> [e_i]_x at the identity.
        for (i, m) in out.iter_mut().enumerate() {
            let mut e = Vector3::zeros();
            e[i] = S::one();
            *m = skew(&e);
        }
        return out;
    }
    let eye_minus_r = Matrix3::identity() - r;
    for (i, m) in out.iter_mut().enumerate() {
        let mut e = Vector3::zeros();
        e[i] = S::one();
        let term = v.cross(&(eye_minus_r * e));
        *m = (skew(&v) * v[i] + skew(&term)) * (S::one() / theta_sq) * r;
    }
    out
}

/// Unit quaternion (w, x, y, z) of an axis-angle rotation.
pub fn quaternion_from_axis_angle<S: Real>(v: Vector3<S>) -> [S; 4] {
    let theta_sq = v.dot(&v);
    let theta = nalgebra::ComplexField::sqrt(theta_sq);
    let half = theta * S::lit(0.5);
    // s = sin(theta/2)/theta, smooth through zero.
    let s = if theta.to_f64() < 1e-6 {
        S::lit(0.5) - theta_sq / S::lit(48.0)
    } else {
        nalgebra::ComplexField::sin(half) / theta
    };
    [
        nalgebra::ComplexField::cos(half),
        v.x * s,
        v.y * s,
        v.z * s,
    ]
}

/// Jacobian d(quaternion)/d(axis-angle), rows ordered (w, x, y, z).
pub fn quaternion_axis_angle_jacobian<S: Real>(v: Vector3<S>) -> [[S; 3]; 4] {
    let theta_sq = v.dot(&v);
    let theta = nalgebra::ComplexField::sqrt(theta_sq);
    let half = theta * S::lit(0.5);
    let (s, ds_over_theta) = if theta.to_f64() < 1e-4 {
        // Taylor: s = 1/2 - t^2/48, ds/dt / t = -1/24 + t^2/640
        (
            S::lit(0.5) - theta_sq / S::lit(48.0),
            -S::lit(1.0 / 24.0) + theta_sq / S::lit(640.0),
        )
    } else {
        let s = nalgebra::ComplexField::sin(half) / theta;
        let ds =
            (theta * nalgebra::ComplexField::cos(half) * S::lit(0.5) - nalgebra::ComplexField::sin(half)) / theta_sq;
        (s, ds / theta)
    };
    let mut jac = [[S::zero(); 3]; 4];
    for i in 0..3 {
        // dw/dv_i = -v_i * s / 2
        jac[0][i] = -v[i] * s * S::lit(0.5);
        for j in 0..3 {
            let kron = if i == j { S::one() } else { S::zero() };
            jac[1 + j][i] = kron * s + v[j] * v[i] * ds_over_theta;
        }
    }
    jac
}

pub fn rotation_from_quaternion<S: Real>(wxyz: [S; 4]) -> Matrix3<S> {
    let norm = nalgebra::ComplexField::sqrt(
        wxyz[0] * wxyz[0] + wxyz[1] * wxyz[1] + wxyz[2] * wxyz[2] + wxyz[3] * wxyz[3],
    );
    let w = wxyz[0] / norm;
    let x = wxyz[1] / norm;
    let y = wxyz[2] / norm;
    let z = wxyz[3] / norm;
    let two = S::lit(2.0);
    Matrix3::new(
        S::one() - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        S::one() - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        S::one() - two * (x * x + y * y),
    )
}

/// Quaternion (w, x, y, z) with w >= 0 from a rotation matrix.
pub fn quaternion_from_rotation<S: Real>(r: &Matrix3<S>) -> [S; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let mut q = if trace.to_f64() > 0.0 {
        let s = nalgebra::ComplexField::sqrt(trace + S::one()) * S::lit(2.0);
        [
            s * S::lit(0.25),
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = nalgebra::ComplexField::sqrt(S::one() + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]) * S::lit(2.0);
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            s * S::lit(0.25),
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = nalgebra::ComplexField::sqrt(S::one() + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]) * S::lit(2.0);
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            s * S::lit(0.25),
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = nalgebra::ComplexField::sqrt(S::one() + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]) * S::lit(2.0);
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            s * S::lit(0.25),
        ]
    };
    if q[0].to_f64() < 0.0 {
        for c in &mut q {
            *c = -*c;
        }
    }
    let norm = nalgebra::ComplexField::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    q.map(|c| c / norm)
}

/// Hamilton product `a ⊗ b` on (w, x, y, z) quaternions.
pub fn quaternion_multiply<S: Real>(a: [S; 4], b: [S; 4]) -> [S; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn skew<S: Real>(v: &Vector3<S>) -> Matrix3<S> {
    Matrix3::new(
        S::zero(),
        -v.z,
        v.y,
        v.z,
        S::zero(),
        -v.x,
        -v.y,
        v.x,
        S::zero(),
    )
}

/// Pinhole intrinsics. `width`/`height` bound the sampling domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: usize,
    pub height: usize,
}

impl<S: Real> CameraModel<S> {
    pub fn new(fx: S, fy: S, cx: S, cy: S, width: usize, height: usize) -> Self {
        assert!(fx.to_f64() > 0.0 && fy.to_f64() > 0.0, "focal lengths must be positive");
        assert!(
            cx.to_f64() > 0.0 && cx.to_f64() < width as f64,
            "cx must lie inside the image"
        );
        assert!(
            cy.to_f64() > 0.0 && cy.to_f64() < height as f64,
            "cy must lie inside the image"
        );
        Self { fx, fy, cx, cy, width, height }
    }

    /// Centered camera covering `hfov_deg` horizontally with square pixels.
    pub fn from_hfov(hfov_deg: f64, width: usize, height: usize) -> Self {
        let half_w = (width as f64 - 1.0) / 2.0;
        let half_h = (height as f64 - 1.0) / 2.0;
        let fx = half_w / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(S::lit(fx), S::lit(fx), S::lit(half_w), S::lit(half_h), width, height)
    }

    /// Project a camera-frame point to `(u, v, depth)`.
    pub fn project(&self, point_cam: &Vector3<S>) -> Result<(S, S, S), GeometryError> {
        if point_cam.z.to_f64() <= 0.0 {
            return Err(GeometryError::BehindCamera { z: point_cam.z.to_f64() });
        }
        let u = self.fx * point_cam.x / point_cam.z + self.cx;
        let v = self.fy * point_cam.y / point_cam.z + self.cy;
        Ok((u, v, point_cam.z))
    }

    /// Back-project pixel `(u, v)` at `depth` meters into the camera frame.
    pub fn unproject(&self, u: S, v: S, depth: S) -> Result<Vector3<S>, GeometryError> {
        if depth.to_f64() <= 0.0 {
            return Err(GeometryError::NonPositiveDepth { depth: depth.to_f64() });
        }
        Ok(Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// The unit-depth ray `K^{-1} (u, v, 1)` through a pixel.
    pub fn ray(&self, u: S, v: S) -> Vector3<S> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, S::one())
    }

    /// Whether `(u, v)` lies in the sampling domain `[0, W-1] x [0, H-1]`,
    /// with a 1e-6 px tolerance so border pixels survive projection
    /// round-off. Samplers clamp into the exact domain afterwards.
    pub fn contains(&self, u: S, v: S) -> bool {
        let u = u.to_f64();
        let v = v.to_f64();
        u >= -Self::EDGE_EPS
            && u <= (self.width - 1) as f64 + Self::EDGE_EPS
            && v >= -Self::EDGE_EPS
            && v <= (self.height - 1) as f64 + Self::EDGE_EPS
    }

    pub const EDGE_EPS: f64 = 1e-6;
}

#[derive(Debug, Error, PartialEq)]
pub enum RigError {
    #[error("rig needs at least 3 cameras, got {count}")]
    TooFewCameras { count: usize },
    #[error("camera {camera} neighbor index {neighbor} out of range")]
    NeighborOutOfRange { camera: usize, neighbor: usize },
    #[error("adjacency is not a symmetric closed ring at camera {camera}")]
    BrokenRing { camera: usize },
    #[error("camera {camera}: {source}")]
    InvalidExtrinsic { camera: usize, source: GeometryError },
}

/// One camera of the rig: intrinsics plus the fixed cam-to-vehicle pose.
#[derive(Debug, Clone)]
pub struct RigCamera<S> {
    pub name: String,
    pub model: CameraModel<S>,
    pub cam_to_vehicle: RigidTransform<S>,
}

/// A closed ring of N cameras with symmetric left/right adjacency.
#[derive(Debug, Clone)]
pub struct CameraRig<S> {
    cameras: Vec<RigCamera<S>>,
    /// `(left, right)` neighbor indices per camera.
    adjacency: Vec<(usize, usize)>,
}

impl<S: Real> CameraRig<S> {
    pub fn new(cameras: Vec<RigCamera<S>>, adjacency: Vec<(usize, usize)>) -> Result<Self, RigError> {
        let n = cameras.len();
        if n < 3 {
            return Err(RigError::TooFewCameras { count: n });
        }
        assert_eq!(adjacency.len(), n, "one adjacency entry per camera");
        for (i, &(l, r)) in adjacency.iter().enumerate() {
            for nb in [l, r] {
                if nb >= n {
                    return Err(RigError::NeighborOutOfRange { camera: i, neighbor: nb });
                }
            }
            // Symmetry: my left neighbor has me as its right neighbor.
            if adjacency[l].1 != i || adjacency[r].0 != i || l == i || r == i {
                return Err(RigError::BrokenRing { camera: i });
            }
        }
        for (i, cam) in cameras.iter().enumerate() {
            cam.cam_to_vehicle
                .validate()
                .map_err(|source| RigError::InvalidExtrinsic { camera: i, source })?;
        }
        Ok(Self { cameras, adjacency })
    }

    /// Ring order: camera i's left neighbor is i-1, right neighbor is i+1.
    pub fn ring(cameras: Vec<RigCamera<S>>) -> Result<Self, RigError> {
        let n = cameras.len();
        let adjacency = (0..n).map(|i| ((i + n - 1) % n, (i + 1) % n)).collect();
        Self::new(cameras, adjacency)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, index: usize) -> &RigCamera<S> {
        &self.cameras[index]
    }

    pub fn cameras(&self) -> &[RigCamera<S>] {
        &self.cameras
    }

    pub fn neighbors(&self, index: usize) -> (usize, usize) {
        self.adjacency[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.name == name)
    }
}

/// Express a vehicle-frame motion in camera-i coordinates:
/// `E_i^{-1} ∘ T_vehicle ∘ E_i`.
pub fn camera_motion_from_vehicle<S: Real>(
    vehicle_motion: &RigidTransform<S>,
    cam_to_vehicle: &RigidTransform<S>,
) -> RigidTransform<S> {
    cam_to_vehicle
        .inverse()
        .compose(vehicle_motion)
        .compose(cam_to_vehicle)
}
