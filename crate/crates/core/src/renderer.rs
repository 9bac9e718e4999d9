//! Differentiable splat rasterization of a Gaussian cloud.
//!
//! Primitives are transformed to the camera frame, culled behind the near
//! plane, sorted front-to-back by depth (ties broken by index), projected to
//! screen-space 2-d Gaussians, and alpha-composited per pixel. Colors come
//! from spherical harmonics evaluated along the camera-to-primitive
//! direction. The analytic backward pass produces gradients for every
//! primitive attribute.
//!
//! Pixels are independent, so the forward pass parallelizes over rows.
//! Backward accumulation gathers per-row sparse contributions and merges
//! them in row order, keeping gradients bitwise independent of thread count.

use crate::geometry::{CameraModel, RigidTransform};
use crate::img::Image;
use crate::parallel;
use crate::primitives::GaussianCloud;
use crate::Real;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("primitive {index} has a non-finite attribute")]
    NonFinite { index: usize },
    #[error("camera pose is not a rigid transform: {0}")]
    BadPose(#[from] crate::geometry::GeometryError),
}

/// Rasterization settings. `exact` evaluates every primitive at every pixel
/// with no early termination; finite-difference gradient checks need this
/// because the bounding-box and transmittance cutoffs are discontinuous.
#[derive(Debug, Clone, Copy)]
pub struct RenderOptions<S> {
    pub background: [S; 3],
    /// Near-plane distance (meters); primitives at or before it are culled.
    pub near: f64,
    /// Half-extent of the per-primitive screen bound, in sigmas.
    pub bbox_sigma: f64,
    /// Per-sample alpha is clipped below this value.
    pub alpha_clip: f64,
    /// Stop compositing once transmittance falls below this.
    pub early_stop: f64,
    pub exact: bool,
}

impl<S: Real> Default for RenderOptions<S> {
    fn default() -> Self {
        Self {
            background: [S::zero(); 3],
            near: 0.01,
            bbox_sigma: 3.0,
            alpha_clip: 0.99,
            early_stop: 1e-4,
            exact: false,
        }
    }
}

impl<S: Real> RenderOptions<S> {
    pub fn exact_mode(background: [S; 3]) -> Self {
        Self { background, exact: true, ..Self::default() }
    }
}

/// Rendered image plus per-pixel accumulated alpha and hit counts.
#[derive(Debug, Clone)]
pub struct RenderOutput<S> {
    pub image: Image<S>,
    pub accumulated_alpha: Vec<S>,
    pub hit_counts: Vec<u32>,
}

/// Per-attribute gradients for a cloud, aligned with primitive indices.
#[derive(Debug, Clone)]
pub struct CloudGrads<S> {
    pub positions: Vec<Vector3<S>>,
    pub scales: Vec<Vector3<S>>,
    pub rotations: Vec<[S; 4]>,
    pub opacities: Vec<S>,
    pub sh: Vec<S>,
}

impl<S: Real> CloudGrads<S> {
    fn zeros(count: usize, sh_len: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); count],
            scales: vec![Vector3::zeros(); count],
            rotations: vec![[S::zero(); 4]; count],
            opacities: vec![S::zero(); count],
            sh: vec![S::zero(); sh_len],
        }
    }
}

// ---------------------------------------------------------------------------
// Spherical harmonics
// ---------------------------------------------------------------------------

const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: [f64; 3] = [1.0925484305920792, 0.31539156525252005, 0.5462742152960396];
const SH_C3: [f64; 6] = [
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    1.445305721320277,
    0.5900435899266435,
];

/// Real SH basis values up to degree `l` (max 3) at unit `dir`.
pub fn sh_basis<S: Real>(l: usize, dir: &Vector3<S>) -> Vec<S> {
    assert!(l <= 3, "SH degree {l} not supported");
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = Vec::with_capacity((l + 1) * (l + 1));
    b.push(S::lit(SH_C0));
    if l >= 1 {
        b.push(S::lit(SH_C1) * y);
        b.push(S::lit(SH_C1) * z);
        b.push(S::lit(SH_C1) * x);
    }
    if l >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(S::lit(SH_C2[0]) * x * y);
        b.push(S::lit(SH_C2[0]) * y * z);
        b.push(S::lit(SH_C2[1]) * (zz * S::lit(3.0) - S::one()));
        b.push(S::lit(SH_C2[0]) * x * z);
        b.push(S::lit(SH_C2[2]) * (xx - yy));
    }
    if l >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.push(S::lit(SH_C3[0]) * y * (xx * S::lit(3.0) - yy));
        b.push(S::lit(SH_C3[1]) * x * y * z);
        b.push(S::lit(SH_C3[2]) * y * (zz * S::lit(5.0) - S::one()));
        b.push(S::lit(SH_C3[3]) * z * (zz * S::lit(5.0) - S::lit(3.0)));
        b.push(S::lit(SH_C3[2]) * x * (zz * S::lit(5.0) - S::one()));
        b.push(S::lit(SH_C3[4]) * z * (xx - yy));
        b.push(S::lit(SH_C3[5]) * x * (xx - yy * S::lit(3.0)));
    }
    b
}

/// Gradient of each basis function with respect to the (unit) direction.
pub fn sh_basis_grad<S: Real>(l: usize, dir: &Vector3<S>) -> Vec<Vector3<S>> {
    assert!(l <= 3);
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let zero = Vector3::zeros();
    let mut g = Vec::with_capacity((l + 1) * (l + 1));
    g.push(zero);
    if l >= 1 {
        g.push(Vector3::new(S::zero(), S::lit(SH_C1), S::zero()));
        g.push(Vector3::new(S::zero(), S::zero(), S::lit(SH_C1)));
        g.push(Vector3::new(S::lit(SH_C1), S::zero(), S::zero()));
    }
    if l >= 2 {
        let c20 = S::lit(SH_C2[0]);
        let c21 = S::lit(SH_C2[1]);
        let c22 = S::lit(SH_C2[2]);
        g.push(Vector3::new(c20 * y, c20 * x, S::zero()));
        g.push(Vector3::new(S::zero(), c20 * z, c20 * y));
        g.push(Vector3::new(S::zero(), S::zero(), c21 * z * S::lit(6.0)));
        g.push(Vector3::new(c20 * z, S::zero(), c20 * x));
        g.push(Vector3::new(c22 * x * S::lit(2.0), -c22 * y * S::lit(2.0), S::zero()));
    }
    if l >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let c30 = S::lit(SH_C3[0]);
        let c31 = S::lit(SH_C3[1]);
        let c32 = S::lit(SH_C3[2]);
        let c33 = S::lit(SH_C3[3]);
        let c34 = S::lit(SH_C3[4]);
        let c35 = S::lit(SH_C3[5]);
        g.push(Vector3::new(
            c30 * x * y * S::lit(6.0),
            c30 * (xx * S::lit(3.0) - yy * S::lit(3.0)),
            S::zero(),
        ));
        g.push(Vector3::new(c31 * y * z, c31 * x * z, c31 * x * y));
        g.push(Vector3::new(
            S::zero(),
            c32 * (zz * S::lit(5.0) - S::one()),
            c32 * y * z * S::lit(10.0),
        ));
        g.push(Vector3::new(S::zero(), S::zero(), c33 * (zz * S::lit(15.0) - S::lit(3.0))));
        g.push(Vector3::new(
            c32 * (zz * S::lit(5.0) - S::one()),
            S::zero(),
            c32 * x * z * S::lit(10.0),
        ));
        g.push(Vector3::new(
            c34 * x * z * S::lit(2.0),
            -c34 * y * z * S::lit(2.0),
            c34 * (xx - yy),
        ));
        g.push(Vector3::new(
            c35 * (xx * S::lit(3.0) - yy * S::lit(3.0)),
            -c35 * x * y * S::lit(6.0),
            S::zero(),
        ));
    }
    g
}

/// Evaluate SH color: `0.5 + sum_b coeffs[c][b] * Y_b(dir)` per channel.
/// `coeffs` is color-major: `3 * (l+1)^2` values.
pub fn sh_evaluate<S: Real>(l: usize, coeffs: &[S], dir: &Vector3<S>) -> [S; 3] {
    let basis = sh_basis(l, dir);
    let n = basis.len();
    debug_assert_eq!(coeffs.len(), 3 * n);
    let mut out = [S::lit(0.5); 3];
    for c in 0..3 {
        for (b, &bv) in basis.iter().enumerate() {
            out[c] += coeffs[c * n + b] * bv;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Covariance and projection
// ---------------------------------------------------------------------------

/// `Sigma = R diag(s^2) R^T` from scale and (any non-zero) quaternion.
pub fn covariance_3d<S: Real>(scale: &Vector3<S>, quat: &[S; 4]) -> Matrix3<S> {
    let r = crate::geometry::rotation_from_quaternion(*quat);
    let d = Matrix3::from_diagonal(&Vector3::new(
        scale.x * scale.x,
        scale.y * scale.y,
        scale.z * scale.z,
    ));
    r * d * r.transpose()
}

/// Perspective Jacobian of `(u, v) = (fx x/z + cx, fy y/z + cy)` at a
/// camera-frame point: 2x3.
pub fn perspective_jacobian<S: Real>(cam: &CameraModel<S>, p: &Vector3<S>) -> [[S; 3]; 2] {
    let inv_z = S::one() / p.z;
    let inv_z2 = inv_z * inv_z;
    [
        [cam.fx * inv_z, S::zero(), -cam.fx * p.x * inv_z2],
        [S::zero(), cam.fy * inv_z, -cam.fy * p.y * inv_z2],
    ]
}

/// Screen-space dilation added to every projected covariance (px^2).
pub const COV_DILATION: f64 = 0.3;

/// EWA projection: screen mean and 2-d covariance `J Sigma J^T + 0.3 I` of a
/// camera-frame Gaussian. Returns `None` when the mean is at or before the
/// near plane.
pub fn project_gaussian<S: Real>(
    sigma_cam: &Matrix3<S>,
    position_cam: &Vector3<S>,
    cam: &CameraModel<S>,
    near: f64,
) -> Option<(Vector2<S>, Matrix2<S>)> {
    if position_cam.z.to_f64() <= near {
        return None;
    }
    let mean = Vector2::new(
        cam.fx * position_cam.x / position_cam.z + cam.cx,
        cam.fy * position_cam.y / position_cam.z + cam.cy,
    );
    let j = perspective_jacobian(cam, position_cam);
    let mut cov = Matrix2::zeros();
    for a in 0..2 {
        for b in 0..2 {
            let mut acc = S::zero();
            for i in 0..3 {
                for k in 0..3 {
                    acc += j[a][i] * sigma_cam[(i, k)] * j[b][k];
                }
            }
            cov[(a, b)] = acc;
        }
    }
    cov[(0, 0)] += S::lit(COV_DILATION);
    cov[(1, 1)] += S::lit(COV_DILATION);
    Some((mean, cov))
}

// ---------------------------------------------------------------------------
// Forward rasterization
// ---------------------------------------------------------------------------

fn cam_f64<S: Real>(cam: &CameraModel<S>) -> CameraModel<f64> {
    CameraModel {
        fx: cam.fx.to_f64(),
        fy: cam.fy.to_f64(),
        cx: cam.cx.to_f64(),
        cy: cam.cy.to_f64(),
        width: cam.width,
        height: cam.height,
    }
}

fn transform_f64<S: Real>(t: &RigidTransform<S>) -> RigidTransform<f64> {
    RigidTransform {
        rotation: t.rotation.map(|v| v.to_f64()),
        translation: t.translation.map(|v| v.to_f64()),
    }
}

/// Camera-frame position and covariance of one primitive, in f64.
fn camera_frame_f64<S: Real>(
    cloud: &GaussianCloud<S>,
    m: usize,
    world_to_cam: &RigidTransform<S>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let w2c = transform_f64(world_to_cam);
    let pos = cloud.positions[m].map(|v| v.to_f64());
    let scale = cloud.scales[m].map(|v| v.to_f64());
    let q = cloud.rotations[m].map(|v| v.to_f64());
    let sigma = covariance_3d(&scale, &q);
    (w2c.apply(&pos), w2c.rotation * sigma * w2c.rotation.transpose())
}

struct Prepared<S> {
    /// Index into the cloud.
    index: u32,
    mean: Vector2<S>,
    /// Inverse 2-d covariance (symmetric: a, b, c).
    inv_cov: [S; 3],
    color: [S; 3],
    opacity: S,
    /// Inclusive pixel bounds, or None when off screen in bounded mode.
    bounds: Option<(usize, usize, usize, usize)>,
}

struct Prep<S> {
    prims: Vec<Prepared<S>>,
    /// Per-row candidate lists (indices into `prims`).
    rows: Vec<Vec<u32>>,
}

fn prepare<S: Real>(
    cloud: &GaussianCloud<S>,
    cam: &CameraModel<S>,
    cam_pose: &RigidTransform<S>,
    opts: &RenderOptions<S>,
) -> Result<Prep<S>, RenderError> {
    if let Some(index) = cloud.find_non_finite() {
        return Err(RenderError::NonFinite { index });
    }
    cam_pose.validate()?;
    let world_to_cam = cam_pose.inverse();
    let cam_center = cam_pose.translation;
    let (w, h) = (cam.width, cam.height);

    // Depth sort: stable order by (z, index). Depths are computed in f64
    // so the cull decision matches the f64 projection below exactly.
    let w2c64 = transform_f64(&world_to_cam);
    let mut order: Vec<(f64, u32)> = Vec::with_capacity(cloud.len());
    for m in 0..cloud.len() {
        let z = w2c64.apply(&cloud.positions[m].map(|v| v.to_f64())).z;
        if z > opts.near {
            order.push((z, m as u32));
        }
    }
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let prims: Vec<Prepared<S>> = parallel::map_indexed(order.len(), |k| {
        let m = order[k].1 as usize;
        // Screen-space projection runs in f64 regardless of S: the
        // determinant of J Sigma J^T cancels catastrophically in f32 for
        // primitives close to the camera.
        let (p_cam64, sigma_cam64) = camera_frame_f64(cloud, m, &world_to_cam);
        let cam64 = cam_f64(cam);
        let (mean64, cov64) = project_gaussian(&sigma_cam64, &p_cam64, &cam64, opts.near)
            .expect("culled before prepare");
        let mean = Vector2::new(S::lit(mean64.x), S::lit(mean64.y));
        let cov = Matrix2::new(
            S::lit(cov64[(0, 0)]),
            S::lit(cov64[(0, 1)]),
            S::lit(cov64[(1, 0)]),
            S::lit(cov64[(1, 1)]),
        );
        let det64 = cov64[(0, 0)] * cov64[(1, 1)] - cov64[(0, 1)] * cov64[(0, 1)];
        let inv_cov = if det64 > 0.0 {
            let inv_det = 1.0 / det64;
            [
                S::lit(cov64[(1, 1)] * inv_det),
                S::lit(-cov64[(0, 1)] * inv_det),
                S::lit(cov64[(0, 0)] * inv_det),
            ]
        } else {
            // Degenerate beyond f64: drop the primitive's footprint.
            [S::zero(); 3]
        };
        let dir_raw = cloud.positions[m] - cam_center;
        let dir = dir_raw / nalgebra::ComplexField::sqrt(dir_raw.dot(&dir_raw));
        let basis = cloud.sh_basis();
        let color = sh_evaluate(
            cloud.sh_degree,
            &cloud.sh[m * 3 * basis..(m + 1) * 3 * basis],
            &dir,
        );
        let bounds = if opts.exact {
            Some((0, w - 1, 0, h - 1))
        } else {
            let rx = opts.bbox_sigma * cov[(0, 0)].to_f64().max(0.0).sqrt();
            let ry = opts.bbox_sigma * cov[(1, 1)].to_f64().max(0.0).sqrt();
            let (mx, my) = (mean.x.to_f64(), mean.y.to_f64());
            let x0 = (mx - rx).floor().max(0.0);
            let x1 = (mx + rx).ceil().min((w - 1) as f64);
            let y0 = (my - ry).floor().max(0.0);
            let y1 = (my + ry).ceil().min((h - 1) as f64);
            (x0 <= x1 && y0 <= y1).then_some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
        };
        Prepared {
            index: m as u32,
            mean,
            inv_cov,
            color,
            opacity: cloud.opacities[m],
            bounds,
        }
    });

    // Row candidate lists in depth order.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (k, prep) in prims.iter().enumerate() {
        if let Some((_, _, y0, y1)) = prep.bounds {
            for row in rows.iter_mut().take(y1 + 1).skip(y0) {
                row.push(k as u32);
            }
        }
    }
    Ok(Prep { prims, rows })
}

#[inline]
fn sample_alpha<S: Real>(prep: &Prepared<S>, px: S, py: S, alpha_clip: f64) -> S {
    let dx = px - prep.mean.x;
    let dy = py - prep.mean.y;
    let power = -(prep.inv_cov[0] * dx * dx
        + prep.inv_cov[1] * dx * dy * S::lit(2.0)
        + prep.inv_cov[2] * dy * dy)
        * S::lit(0.5);
    let g = nalgebra::ComplexField::exp(num_traits::Float::min(power, S::zero()));
    num_traits::Float::min(prep.opacity * g, S::lit(alpha_clip))
}

/// Rasterize `cloud` seen from a camera whose pose (camera-to-cloud-frame)
/// is `cam_pose`.
pub fn render<S: Real>(
    cloud: &GaussianCloud<S>,
    cam: &CameraModel<S>,
    cam_pose: &RigidTransform<S>,
    opts: &RenderOptions<S>,
) -> Result<RenderOutput<S>, RenderError> {
    let prep = prepare(cloud, cam, cam_pose, opts)?;
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::zeros(h, w, 3);
    let mut alpha = vec![S::zero(); h * w];
    let mut hits = vec![0u32; h * w];

    struct Row<S> {
        rgb: Vec<S>,
        alpha: Vec<S>,
        hits: Vec<u32>,
    }
    let rows_out = parallel::map_indexed(h, |y| {
        let mut row = Row {
            rgb: vec![S::zero(); w * 3],
            alpha: vec![S::zero(); w],
            hits: vec![0u32; w],
        };
        let py = S::lit(y as f64);
        for x in 0..w {
            let px = S::lit(x as f64);
            let mut color = [S::zero(); 3];
            let mut transmittance = S::one();
            let mut hit = 0u32;
            for &k in &prep.rows[y] {
                let pr = &prep.prims[k as usize];
                if let Some((x0, x1, _, _)) = pr.bounds {
                    if x < x0 || x > x1 {
                        continue;
                    }
                } else {
                    continue;
                }
                let a = sample_alpha(pr, px, py, opts.alpha_clip);
                let weight = a * transmittance;
                for c in 0..3 {
                    color[c] += pr.color[c] * weight;
                }
                transmittance *= S::one() - a;
                hit += 1;
                if !opts.exact && transmittance.to_f64() < opts.early_stop {
                    break;
                }
            }
            for c in 0..3 {
                let v = color[c] + opts.background[c] * transmittance;
                row.rgb[x * 3 + c] = S::lit(v.to_f64().clamp(0.0, 1.0));
            }
            row.alpha[x] = S::one() - transmittance;
            row.hits[x] = hit;
        }
        row
    });
    for (y, row) in rows_out.into_iter().enumerate() {
        image.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&row.rgb);
        alpha[y * w..(y + 1) * w].copy_from_slice(&row.alpha);
        hits[y * w..(y + 1) * w].copy_from_slice(&row.hits);
    }
    Ok(RenderOutput { image, accumulated_alpha: alpha, hit_counts: hits })
}

/// Recompute one pixel's front-to-back march, returning
/// `(primitive index, alpha', transmittance before the sample)` per hit.
pub fn pixel_contributions<S: Real>(
    cloud: &GaussianCloud<S>,
    cam: &CameraModel<S>,
    cam_pose: &RigidTransform<S>,
    opts: &RenderOptions<S>,
    y: usize,
    x: usize,
) -> Result<Vec<(usize, S, S)>, RenderError> {
    let prep = prepare(cloud, cam, cam_pose, opts)?;
    let mut out = Vec::new();
    let (px, py) = (S::lit(x as f64), S::lit(y as f64));
    let mut transmittance = S::one();
    for &k in &prep.rows[y] {
        let pr = &prep.prims[k as usize];
        let Some((x0, x1, _, _)) = pr.bounds else { continue };
        if x < x0 || x > x1 {
            continue;
        }
        let a = sample_alpha(pr, px, py, opts.alpha_clip);
        out.push((pr.index as usize, a, transmittance));
        transmittance *= S::one() - a;
        if !opts.exact && transmittance.to_f64() < opts.early_stop {
            break;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Raw polynomial partials of the quaternion-to-rotation map, evaluated at a
/// unit quaternion. Chain through `q/|q|` before use on free 4-vectors.
fn rotation_quat_partials<S: Real>(q: &[S; 4]) -> [Matrix3<S>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let two = S::lit(2.0);
    let o = S::zero();
    let x2 = x * two;
    let y2 = y * two;
    let z2 = z * two;
    [
        Matrix3::new(o, -z, y, z, o, -x, -y, x, o) * two,
        Matrix3::new(o, y, z, y, -x2, -w, z, w, -x2) * two,
        Matrix3::new(-y2, x, w, x, o, z, -w, z, -y2) * two,
        Matrix3::new(-z2, -w, x, w, -z2, y, x, y, o) * two,
    ]
}

/// Gradients of a scalar loss with respect to every cloud attribute, given
/// the loss gradient with respect to the rendered image.
pub fn render_backward<S: Real>(
    cloud: &GaussianCloud<S>,
    cam: &CameraModel<S>,
    cam_pose: &RigidTransform<S>,
    opts: &RenderOptions<S>,
    d_image: &Image<S>,
) -> Result<CloudGrads<S>, RenderError> {
    let prep = prepare(cloud, cam, cam_pose, opts)?;
    let (w, h) = (cam.width, cam.height);
    assert_eq!((d_image.height, d_image.width, d_image.channels), (h, w, 3));

    // Per-row sparse accumulation of (d_mean2, d_invcov-free cov grads, ...).
    // Entry layout: idx, d_mean(2), d_cov2d(3: a, b, c), d_color(3), d_alpha.
    const ACC: usize = 9;
    let row_entries: Vec<Vec<(u32, [S; ACC])>> = parallel::map_indexed(h, |y| {
        let mut entries: Vec<(u32, [S; ACC])> = Vec::new();
        let py = S::lit(y as f64);
        // March storage reused across pixels in this row.
        let mut marched: Vec<(u32, S, S, S)> = Vec::new(); // (k, alpha', T_before, gauss)
        for x in 0..w {
            let px = S::lit(x as f64);
            marched.clear();
            let mut transmittance = S::one();
            let mut color = [S::zero(); 3];
            for &k in &prep.rows[y] {
                let pr = &prep.prims[k as usize];
                let Some((x0, x1, _, _)) = pr.bounds else { continue };
                if x < x0 || x > x1 {
                    continue;
                }
                let dx = px - pr.mean.x;
                let dy = py - pr.mean.y;
                let power = -(pr.inv_cov[0] * dx * dx
                    + pr.inv_cov[1] * dx * dy * S::lit(2.0)
                    + pr.inv_cov[2] * dy * dy)
                    * S::lit(0.5);
                let g = nalgebra::ComplexField::exp(num_traits::Float::min(power, S::zero()));
                let a = num_traits::Float::min(pr.opacity * g, S::lit(opts.alpha_clip));
                marched.push((k, a, transmittance, g));
                for c in 0..3 {
                    color[c] += pr.color[c] * a * transmittance;
                }
                transmittance *= S::one() - a;
                if !opts.exact && transmittance.to_f64() < opts.early_stop {
                    break;
                }
            }
            if marched.is_empty() {
                continue;
            }
            // Clamp gate on the final composited value.
            let mut g_pix = [S::zero(); 3];
            let mut any = false;
            for c in 0..3 {
                let pre = (color[c] + opts.background[c] * transmittance).to_f64();
                if pre > 0.0 && pre < 1.0 {
                    g_pix[c] = d_image.at(y, x, c);
                    if g_pix[c] != S::zero() {
                        any = true;
                    }
                }
            }
            if !any {
                continue;
            }
            // Reverse pass with suffix accumulation.
            let mut after = [S::zero(); 3];
            for c in 0..3 {
                after[c] = opts.background[c] * transmittance;
            }
            for &(k, a, t_before, gauss) in marched.iter().rev() {
                let pr = &prep.prims[k as usize];
                let weight = a * t_before;
                let mut d_alpha_prime = S::zero();
                let mut d_color = [S::zero(); 3];
                for c in 0..3 {
                    d_color[c] = g_pix[c] * weight;
                    d_alpha_prime += g_pix[c] * (pr.color[c] * t_before - after[c] / (S::one() - a));
                }
                for c in 0..3 {
                    after[c] += pr.color[c] * weight;
                }
                // Through the clip: zero grad when saturated.
                let clipped = (pr.opacity * gauss).to_f64() >= opts.alpha_clip;
                let (d_opacity, d_power) = if clipped {
                    (S::zero(), S::zero())
                } else {
                    (d_alpha_prime * gauss, d_alpha_prime * pr.opacity * gauss)
                };
                // power = -1/2 d^T A d  =>  d(power)/d(mean) = A d,
                // d(power)/d(Sigma2d) = 1/2 (A d)(A d)^T.
                let dx = px - pr.mean.x;
                let dy = py - pr.mean.y;
                let adx = pr.inv_cov[0] * dx + pr.inv_cov[1] * dy;
                let ady = pr.inv_cov[1] * dx + pr.inv_cov[2] * dy;
                let half = S::lit(0.5);
                let vals: [S; ACC] = [
                    d_power * adx,
                    d_power * ady,
                    d_power * half * adx * adx,
                    d_power * adx * ady, // off-diagonal carries both symmetric halves
                    d_power * half * ady * ady,
                    d_color[0],
                    d_color[1],
                    d_color[2],
                    d_opacity,
                ];
                entries.push((k, vals));
            }
        }
        entries
    });

    // Merge rows in order: deterministic for any thread count.
    let mut acc = vec![[S::zero(); ACC]; prep.prims.len()];
    for entries in row_entries {
        for (k, vals) in entries {
            let slot = &mut acc[k as usize];
            for i in 0..ACC {
                slot[i] += vals[i];
            }
        }
    }

    // Chain screen-space gradients back to primitive attributes.
    let world_to_cam = cam_pose.inverse();
    let cam_center = cam_pose.translation;
    let basis_n = cloud.sh_basis();
    let per_prim: Vec<(u32, Vector3<S>, Vector3<S>, [S; 4], S, Vec<S>)> =
        parallel::map_indexed(prep.prims.len(), |k| {
            // The whole chain runs in f64: products like J^T D J span many
            // orders of magnitude for primitives near the camera.
            let pr = &prep.prims[k];
            let m = pr.index as usize;
            let a = &acc[k];
            let d_mean = Vector2::new(a[0].to_f64(), a[1].to_f64());
            let half = 0.5 * a[3].to_f64();
            let d_cov = Matrix2::new(a[2].to_f64(), half, half, a[4].to_f64());
            let d_color = [a[5].to_f64(), a[6].to_f64(), a[7].to_f64()];
            let d_opacity = a[8];

            let w2c = transform_f64(&world_to_cam);
            let cam64 = cam_f64(cam);
            let (p_cam, sigma_cam) = camera_frame_f64(cloud, m, &world_to_cam);
            let j = perspective_jacobian(&cam64, &p_cam);

            // d(mean)/d(p_cam) = J.
            let mut d_pcam = Vector3::new(
                j[0][0] * d_mean.x + j[1][0] * d_mean.y,
                j[0][1] * d_mean.x + j[1][1] * d_mean.y,
                j[0][2] * d_mean.x + j[1][2] * d_mean.y,
            );

            // Sigma2d = J Sigma_cam J^T (+ const): dSigma_cam = J^T D J.
            let mut d_sigma_cam = Matrix3::<f64>::zeros();
            for i in 0..3 {
                for l2 in 0..3 {
                    let mut acc2 = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            acc2 += j[r][i] * d_cov[(r, c)] * j[c][l2];
                        }
                    }
                    d_sigma_cam[(i, l2)] = acc2;
                }
            }
            // dJ = 2 D J Sigma_cam, then through J's dependence on p_cam.
            let mut d_j = [[0.0f64; 3]; 2];
            for (r, row) in d_j.iter_mut().enumerate() {
                for (i, slot) in row.iter_mut().enumerate() {
                    let mut acc2 = 0.0;
                    for c in 0..2 {
                        for l2 in 0..3 {
                            acc2 += d_cov[(r, c)] * j[c][l2] * sigma_cam[(l2, i)] * 2.0;
                        }
                    }
                    *slot = acc2;
                }
            }
            let inv_z = 1.0 / p_cam.z;
            let inv_z2 = inv_z * inv_z;
            let inv_z3 = inv_z2 * inv_z;
            let (fx, fy) = (cam64.fx, cam64.fy);
            // dJ/dx: only J[0][2]; dJ/dy: only J[1][2]; dJ/dz: four entries.
            d_pcam.x += d_j[0][2] * (-fx * inv_z2);
            d_pcam.y += d_j[1][2] * (-fy * inv_z2);
            d_pcam.z += d_j[0][0] * (-fx * inv_z2)
                + d_j[1][1] * (-fy * inv_z2)
                + d_j[0][2] * (2.0 * fx * p_cam.x * inv_z3)
                + d_j[1][2] * (2.0 * fy * p_cam.y * inv_z3);

            // World-space position gradient.
            let mut d_pos = w2c.rotation.transpose() * d_pcam;

            // SH: color_c = 0.5 + sum coeffs * Y(dir).
            let cam_center64 = cam_center.map(|v| v.to_f64());
            let dir_raw = cloud.positions[m].map(|v| v.to_f64()) - cam_center64;
            let norm = dir_raw.norm();
            let dir = dir_raw / norm;
            let bvals = sh_basis(cloud.sh_degree, &dir);
            let bgrads = sh_basis_grad(cloud.sh_degree, &dir);
            let mut d_sh = vec![S::zero(); 3 * basis_n];
            let mut d_dir = Vector3::<f64>::zeros();
            for c in 0..3 {
                for b in 0..basis_n {
                    d_sh[c * basis_n + b] = S::lit(d_color[c] * bvals[b]);
                    d_dir += bgrads[b] * (d_color[c] * cloud.sh_at(m, c, b).to_f64());
                }
            }
            // dir = v/|v|: d_v = (d_dir - dir (dir . d_dir)) / |v|.
            d_pos += (d_dir - dir * dir.dot(&d_dir)) / norm;

            // Sigma_world gradient.
            let d_sigma = w2c.rotation.transpose() * d_sigma_cam * w2c.rotation;
            // Sigma = R diag(s^2) R^T.
            let q_raw = cloud.rotations[m].map(|v| v.to_f64());
            let rot = crate::geometry::rotation_from_quaternion(q_raw);
            let s_vec = cloud.scales[m].map(|v| v.to_f64());
            let rt_d_r = rot.transpose() * d_sigma * rot;
            let d_scale = Vector3::new(
                S::lit(rt_d_r[(0, 0)] * s_vec.x * 2.0),
                S::lit(rt_d_r[(1, 1)] * s_vec.y * 2.0),
                S::lit(rt_d_r[(2, 2)] * s_vec.z * 2.0),
            );
            let diag = Matrix3::from_diagonal(&Vector3::new(
                s_vec.x * s_vec.x,
                s_vec.y * s_vec.y,
                s_vec.z * s_vec.z,
            ));
            let d_rot = d_sigma * rot * diag * 2.0;
            let q_norm_pre = (q_raw[0] * q_raw[0]
                + q_raw[1] * q_raw[1]
                + q_raw[2] * q_raw[2]
                + q_raw[3] * q_raw[3])
                .sqrt();
            let q_unit = [
                q_raw[0] / q_norm_pre,
                q_raw[1] / q_norm_pre,
                q_raw[2] / q_norm_pre,
                q_raw[3] / q_norm_pre,
            ];
            let partials = rotation_quat_partials(&q_unit);
            let mut d_qhat = [0.0f64; 4];
            for (qi, partial) in partials.iter().enumerate() {
                let mut acc2 = 0.0;
                for r in 0..3 {
                    for c in 0..3 {
                        acc2 += d_rot[(r, c)] * partial[(r, c)];
                    }
                }
                d_qhat[qi] = acc2;
            }
            // Through q/|q|: project out the radial component and rescale.
            let dot = q_unit[0] * d_qhat[0]
                + q_unit[1] * d_qhat[1]
                + q_unit[2] * d_qhat[2]
                + q_unit[3] * d_qhat[3];
            let mut d_q = [S::zero(); 4];
            for i in 0..4 {
                d_q[i] = S::lit((d_qhat[i] - q_unit[i] * dot) / q_norm_pre);
            }
            let d_pos_s = Vector3::new(S::lit(d_pos.x), S::lit(d_pos.y), S::lit(d_pos.z));

            (pr.index, d_pos_s, d_scale, d_q, d_opacity, d_sh)
        });

    let mut grads = CloudGrads::zeros(cloud.len(), cloud.sh.len());
    for (index, d_pos, d_scale, d_q, d_op, d_sh) in per_prim {
        let m = index as usize;
        grads.positions[m] += d_pos;
        grads.scales[m] += d_scale;
        for i in 0..4 {
            grads.rotations[m][i] += d_q[i];
        }
        grads.opacities[m] += d_op;
        for (slot, v) in grads.sh[m * 3 * basis_n..(m + 1) * 3 * basis_n]
            .iter_mut()
            .zip(&d_sh)
        {
            *slot += *v;
        }
    }
    Ok(grads)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::primitives::{sh_basis_count, SourceTag};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    pub(crate) fn test_cam(w: usize, h: usize) -> CameraModel<f64> {
        CameraModel::new(
            60.0,
            60.0,
            (w as f64 - 1.0) / 2.0,
            (h as f64 - 1.0) / 2.0,
            w,
            h,
        )
    }

    /// A random well-conditioned cloud fully in front of the camera.
    pub(crate) fn random_cloud(rng: &mut StdRng, count: usize, sh_degree: usize) -> GaussianCloud<f64> {
        let basis = sh_basis_count(sh_degree);
        let mut cloud = GaussianCloud::empty(sh_degree);
        for m in 0..count {
            cloud.positions.push(Vector3::new(
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(3.0..8.0),
            ));
            cloud.scales.push(Vector3::new(
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.05..0.35),
            ));
            let q = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt().max(0.1);
            cloud.rotations.push([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
            cloud.opacities.push(rng.gen_range(0.2..0.9));
            for _ in 0..3 * basis {
                cloud.sh.push(rng.gen_range(-0.3..0.3));
            }
            cloud.tags.push(SourceTag { camera: 0, timestep: m as i64 });
        }
        cloud
    }

    #[test]
    fn covariance_identity_and_diagonal() {
        let id = covariance_3d(&Vector3::new(1.0, 1.0, 1.0), &[1.0, 0.0, 0.0, 0.0]);
        assert!((id - Matrix3::identity()).abs().max() < 1e-12);
        let d = covariance_3d(&Vector3::new(2.0, 3.0, 0.5), &[1.0, 0.0, 0.0, 0.0]);
        let expect = Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 0.25));
        assert!((d - expect).abs().max() < 1e-12);
    }

    // Oracle: symmetric eigendecomposition.
    #[test]
    fn covariance_eigenvalues_match_squared_scales() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let scale = Vector3::new(
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
                rng.gen_range(0.1..2.0),
            );
            let q = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let n = q.iter().map(|c| c * c).sum::<f64>().sqrt().max(0.1);
            let q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
            let sigma = covariance_3d(&scale, &q);
            assert!((sigma - sigma.transpose()).abs().max() < 1e-10, "not symmetric");
            let mut eig: Vec<f64> = sigma.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut expect: Vec<f64> = [scale.x, scale.y, scale.z].iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            expect.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-8, "eigenvalue {a} vs scale^2 {b}");
            }
        }
    }

    #[test]
    fn on_axis_isotropic_projection_is_analytic() {
        let cam = test_cam(33, 33);
        let sigma = 0.2f64;
        let z = 5.0;
        let cov3 = Matrix3::identity() * sigma * sigma;
        let (mean, cov) = project_gaussian(&cov3, &Vector3::new(0.0, 0.0, z), &cam, 0.01).unwrap();
        assert!((mean.x - cam.cx).abs() < 1e-12 && (mean.y - cam.cy).abs() < 1e-12);
        let expect = (cam.fx * sigma / z).powi(2) + COV_DILATION;
        assert!((cov[(0, 0)] - expect).abs() < 1e-10);
        assert!((cov[(1, 1)] - expect).abs() < 1e-10);
        assert!(cov[(0, 1)].abs() < 1e-12);

        // Doubling z quarters the pre-dilation screen covariance.
        let (_, cov2) = project_gaussian(&cov3, &Vector3::new(0.0, 0.0, 2.0 * z), &cam, 0.01).unwrap();
        let pre = cov[(0, 0)] - COV_DILATION;
        let pre2 = cov2[(0, 0)] - COV_DILATION;
        assert!((pre2 - pre / 4.0).abs() < 1e-10);
    }

    // Oracle: finite-difference Jacobian of the projection map.
    #[test]
    fn perspective_jacobian_matches_finite_differences() {
        let cam = test_cam(40, 30);
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let p = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(1.0..10.0),
            );
            let j = perspective_jacobian(&cam, &p);
            let h = 1e-6;
            for i in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[i] += h;
                pm[i] -= h;
                let (up, vp, _) = cam.project(&pp).unwrap();
                let (um, vm, _) = cam.project(&pm).unwrap();
                let fd_u = (up - um) / (2.0 * h);
                let fd_v = (vp - vm) / (2.0 * h);
                let rel_u = (j[0][i] - fd_u).abs() / fd_u.abs().max(j[0][i].abs()).max(1e-9);
                let rel_v = (j[1][i] - fd_v).abs() / fd_v.abs().max(j[1][i].abs()).max(1e-9);
                assert!(rel_u < 1e-4 && rel_v < 1e-4);
            }
        }
    }

    #[test]
    fn empty_cloud_renders_background() {
        let cam = test_cam(8, 6);
        let opts = RenderOptions { background: [0.2, 0.4, 0.6], ..Default::default() };
        let out = render(
            &GaussianCloud::<f64>::empty(1),
            &cam,
            &RigidTransform::identity(),
            &opts,
        )
        .unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(out.image.at(y, x, 0), 0.2);
                assert_eq!(out.image.at(y, x, 1), 0.4);
                assert_eq!(out.image.at(y, x, 2), 0.6);
            }
        }
        assert!(out.accumulated_alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_splat_composites_analytically() {
        // Wide isotropic Gaussian centered exactly on a pixel.
        let cam = test_cam(33, 33);
        let alpha = 0.63;
        let bg = [0.1, 0.2, 0.3];
        let dc = 0.27; // effective color = 0.5 + dc * Y00 per channel
        let mut cloud = GaussianCloud::<f64>::empty(0);
        cloud.positions.push(Vector3::new(0.0, 0.0, 5.0));
        cloud.scales.push(Vector3::new(20.0, 20.0, 20.0));
        cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
        cloud.opacities.push(alpha);
        cloud.sh.extend_from_slice(&[dc, dc, dc]);
        cloud.tags.push(SourceTag { camera: 0, timestep: 0 });
        let opts = RenderOptions { background: bg, ..Default::default() };
        let out = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();
        let color = 0.5 + dc * SH_C0;
        let (cy, cx) = (16, 16);
        for c in 0..3 {
            let expect = color * alpha + bg[c] * (1.0 - alpha);
            assert!(
                (out.image.at(cy, cx, c) - expect).abs() < 1e-5,
                "channel {c}: {} vs {expect}",
                out.image.at(cy, cx, c)
            );
        }
        assert!((out.accumulated_alpha[cy * 33 + cx] - alpha).abs() < 1e-5);
    }

    // Oracle: fully scalar two-splat compositing, plain f64 arithmetic.
    #[test]
    fn two_overlapping_gaussians_match_scalar_compositing_oracle() {
        let cam = test_cam(24, 18);
        let bg = [0.05, 0.1, 0.15];
        let z1 = 4.0;
        let z2 = 6.0;
        let p1 = [0.2, -0.1, z1];
        let p2 = [0.35, 0.05, z2];
        let s1 = 0.25;
        let s2 = 0.4;
        let (a1, a2) = (0.7, 0.55);
        let (c1, c2) = ([0.1, -0.05, 0.2], [-0.15, 0.12, 0.02]);

        let mut cloud = GaussianCloud::<f64>::empty(0);
        for (p, s, a, c) in [(p1, s1, a1, c1), (p2, s2, a2, c2)] {
            cloud.positions.push(Vector3::new(p[0], p[1], p[2]));
            cloud.scales.push(Vector3::new(s, s, s));
            cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
            cloud.opacities.push(a);
            cloud.sh.extend_from_slice(&c);
            cloud
                .tags
                .push(SourceTag { camera: 0, timestep: cloud.tags.len() as i64 });
        }
        let opts = RenderOptions { background: bg, exact: true, ..Default::default() };
        let out = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();

        // Scalar reference: project each isotropic splat by hand.
        let splat = |p: [f64; 3], s: f64| -> ([f64; 2], [f64; 3]) {
            let (x, y, z) = (p[0], p[1], p[2]);
            let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
            // J for fx = fy = f:
            let f = cam.fx;
            let j = [
                [f / z, 0.0, -f * x / (z * z)],
                [0.0, f / z, -f * y / (z * z)],
            ];
            // cov = s^2 * J J^T + 0.3 I
            let mut cov = [0.0f64; 3];
            cov[0] = s * s * (j[0][0] * j[0][0] + j[0][1] * j[0][1] + j[0][2] * j[0][2]) + COV_DILATION;
            cov[1] = s * s * (j[0][0] * j[1][0] + j[0][1] * j[1][1] + j[0][2] * j[1][2]);
            cov[2] = s * s * (j[1][0] * j[1][0] + j[1][1] * j[1][1] + j[1][2] * j[1][2]) + COV_DILATION;
            (mean, cov)
        };
        let alpha_at = |mean: [f64; 2], cov: [f64; 3], opacity: f64, px: f64, py: f64| -> f64 {
            let det = cov[0] * cov[2] - cov[1] * cov[1];
            let inv = [cov[2] / det, -cov[1] / det, cov[0] / det];
            let dx = px - mean[0];
            let dy = py - mean[1];
            let power = -0.5 * (inv[0] * dx * dx + 2.0 * inv[1] * dx * dy + inv[2] * dy * dy);
            (opacity * power.exp()).min(0.99)
        };
        // SH degree 0 color with +0.5 offset, view independent.
        let col1: Vec<f64> = c1.iter().map(|v| 0.5 + v * SH_C0).collect();
        let col2: Vec<f64> = c2.iter().map(|v| 0.5 + v * SH_C0).collect();
        let (m1, cv1) = splat(p1, s1);
        let (m2, cv2) = splat(p2, s2);
        for y in 0..18 {
            for x in 0..24 {
                let (px, py) = (x as f64, y as f64);
                let g1 = alpha_at(m1, cv1, a1, px, py);
                let g2 = alpha_at(m2, cv2, a2, px, py);
                for c in 0..3 {
                    let expect =
                        (col1[c] * g1 + col2[c] * g2 * (1.0 - g1) + bg[c] * (1.0 - g1) * (1.0 - g2))
                            .clamp(0.0, 1.0);
                    let got = out.image.at(y, x, c);
                    assert!(
                        (got - expect).abs() < 1e-5,
                        "pixel ({y},{x}) channel {c}: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn sh_dc_term_is_direction_independent() {
        let coeffs = [0.4f64, -0.2, 0.1];
        let a = sh_evaluate(0, &coeffs, &Vector3::new(1.0, 0.0, 0.0));
        let b = sh_evaluate(0, &coeffs, &Vector3::new(0.0, 0.6, 0.8));
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
            assert!((a[c] - (0.5 + coeffs[c] * SH_C0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sh_degree1_z_coefficient_is_odd_in_z() {
        // Only the z-linear coefficient set (basis index 2 at L=1).
        let mut coeffs = [0.0f64; 12];
        coeffs[2] = 0.3; // red channel, z-linear
        let up = sh_evaluate(1, &coeffs, &Vector3::new(0.0, 0.0, 1.0));
        let dn = sh_evaluate(1, &coeffs, &Vector3::new(0.0, 0.0, -1.0));
        assert!(((up[0] - 0.5) + (dn[0] - 0.5)).abs() < 1e-12);
        assert!((up[0] - 0.5) > 0.0);
    }

    // Oracle: direct polynomial evaluation of the real SH table.
    #[test]
    fn sh_matches_polynomial_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..30 {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 0.1 {
                continue;
            }
            let d = v / v.norm();
            let (x, y, z) = (d.x, d.y, d.z);
            let oracle: [f64; 16] = [
                0.28209479177387814,
                0.4886025119029199 * y,
                0.4886025119029199 * z,
                0.4886025119029199 * x,
                1.0925484305920792 * x * y,
                1.0925484305920792 * y * z,
                0.31539156525252005 * (3.0 * z * z - 1.0),
                1.0925484305920792 * x * z,
                0.5462742152960396 * (x * x - y * y),
                0.5900435899266435 * y * (3.0 * x * x - y * y),
                2.890611442640554 * x * y * z,
                0.4570457994644658 * y * (5.0 * z * z - 1.0),
                0.3731763325901154 * z * (5.0 * z * z - 3.0),
                0.4570457994644658 * x * (5.0 * z * z - 1.0),
                1.445305721320277 * z * (x * x - y * y),
                0.5900435899266435 * x * (x * x - 3.0 * y * y),
            ];
            let basis = sh_basis(3, &d);
            for (b, (got, expect)) in basis.iter().zip(&oracle).enumerate() {
                assert!((got - expect).abs() < 1e-7, "basis {b}");
            }
            // Full evaluation contracts coefficients against the same table.
            let coeffs: Vec<f64> = (0..48).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let got = sh_evaluate(3, &coeffs, &d);
            for c in 0..3 {
                let expect: f64 =
                    0.5 + (0..16).map(|b| coeffs[c * 16 + b] * oracle[b]).sum::<f64>();
                assert!((got[c] - expect).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn rendering_is_permutation_invariant() {
        let mut rng = StdRng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 40, 1);
        let cam = test_cam(32, 24);
        let opts = RenderOptions::default();
        let base = render(&cloud, &cam, &RigidTransform::identity(), &opts).unwrap();

        // Reverse and a shuffled permutation.
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..cloud.len()).collect();
        perm.shuffle(&mut rng);
        for order in [perm, (0..cloud.len()).rev().collect::<Vec<_>>()] {
            let basis = cloud.sh_basis();
            let mut shuffled = GaussianCloud::empty(cloud.sh_degree);
            for &m in &order {
                shuffled.positions.push(cloud.positions[m]);
                shuffled.scales.push(cloud.scales[m]);
                shuffled.rotations.push(cloud.rotations[m]);
                shuffled.opacities.push(cloud.opacities[m]);
                shuffled
                    .sh
                    .extend_from_slice(&cloud.sh[m * 3 * basis..(m + 1) * 3 * basis]);
                shuffled.tags.push(cloud.tags[m]);
            }
            let out = render(&shuffled, &cam, &RigidTransform::identity(), &opts).unwrap();
            assert!(out.image.max_abs_diff(&base.image) < 1e-5);
        }
    }

    #[test]
    fn opacity_increase_never_reduces_own_contribution() {
        let mut rng = StdRng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 12, 1);
        let cam = test_cam(24, 18);
        let opts = RenderOptions::default();
        let target = 4usize;
        let mut boosted = cloud.clone();
        boosted.opacities[target] = (cloud.opacities[target] + 0.2).min(0.98);
        for y in (0..18).step_by(3) {
            for x in (0..24).step_by(4) {
                let base = pixel_contributions(&cloud, &cam, &RigidTransform::identity(), &opts, y, x).unwrap();
                let more = pixel_contributions(&boosted, &cam, &RigidTransform::identity(), &opts, y, x).unwrap();
                let w_base: f64 = base
                    .iter()
                    .filter(|(m, _, _)| *m == target)
                    .map(|(_, a, t)| a * t)
                    .sum();
                let w_more: f64 = more
                    .iter()
                    .filter(|(m, _, _)| *m == target)
                    .map(|(_, a, t)| a * t)
                    .sum();
                assert!(
                    w_more >= w_base - 1e-12,
                    "pixel ({y},{x}): weight fell from {w_base} to {w_more}"
                );
            }
        }
    }

    #[test]
    fn non_finite_attribute_is_reported_with_index() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut cloud = random_cloud(&mut rng, 5, 1);
        cloud.scales[3].y = f64::NAN;
        let cam = test_cam(8, 8);
        match render(&cloud, &cam, &RigidTransform::identity(), &RenderOptions::default()) {
            Err(RenderError::NonFinite { index: 3 }) => {}
            other => panic!("expected NonFinite at 3, got {other:?}"),
        }
    }

    /// The full-attribute gradient check lives in the acceptance suite at
    /// 8 Gaussians / 32x32; this is a faster smoke version of the same path.
    #[test]
    fn analytic_gradients_match_finite_differences_small() {
        let mut rng = StdRng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 4, 1);
        let cam = test_cam(16, 12);
        let pose = RigidTransform::from_axis_angle(
            Vector3::new(0.02, -0.03, 0.01),
            Vector3::new(0.1, -0.05, 0.2),
        );
        let report = check_render_gradients(&cloud, &cam, &pose, &mut rng, 40);
        assert!(report.max_rel_error < 1e-3, "max rel error {}", report.max_rel_error);
    }

    pub(crate) struct GradReport {
        pub max_rel_error: f64,
        pub checked: usize,
    }

    /// Shared by unit and acceptance tests: compare `render_backward`
    /// against central finite differences on a weighted-sum image loss,
    /// probing `probes` random parameters per attribute class.
    pub(crate) fn check_render_gradients(
        cloud: &GaussianCloud<f64>,
        cam: &CameraModel<f64>,
        pose: &RigidTransform<f64>,
        rng: &mut StdRng,
        probes: usize,
    ) -> GradReport {
        let opts = RenderOptions { background: [0.15, 0.25, 0.35], exact: true, ..Default::default() };
        let weights: Vec<f64> = (0..cam.width * cam.height * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let loss = |c: &GaussianCloud<f64>| -> f64 {
            let out = render(c, cam, pose, &opts).unwrap();
            out.image.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let d_image = Image {
            height: cam.height,
            width: cam.width,
            channels: 3,
            data: weights.clone(),
        };
        let grads = render_backward(cloud, cam, pose, &opts, &d_image).unwrap();
        let step = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut checked = 0usize;
        let basis = cloud.sh_basis();
        // (attribute class, parameter count per primitive)
        for (class, count) in [("position", 3), ("scale", 3), ("rotation", 4), ("opacity", 1), ("sh", 3 * basis)] {
            for _ in 0..probes {
                let m = rng.gen_range(0..cloud.len());
                let i = rng.gen_range(0..count);
                let analytic = match class {
                    "position" => grads.positions[m][i],
                    "scale" => grads.scales[m][i],
                    "rotation" => grads.rotations[m][i],
                    "opacity" => grads.opacities[m],
                    _ => grads.sh[m * 3 * basis + i],
                };
                let mut perturb = |delta: f64| -> f64 {
                    let mut c = cloud.clone();
                    match class {
                        "position" => c.positions[m][i] += delta,
                        "scale" => c.scales[m][i] += delta,
                        "rotation" => c.rotations[m][i] += delta,
                        "opacity" => c.opacities[m] += delta,
                        _ => c.sh[m * 3 * basis + i] += delta,
                    }
                    loss(&c)
                };
                let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
                if rel > max_rel {
                    max_rel = rel;
                }
                checked += 1;
            }
        }
        GradReport { max_rel_error: max_rel, checked }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn render_is_bitwise_deterministic_across_thread_counts() {
        let mut rng = StdRng::seed_from_u64(8);
        let cloud = random_cloud(&mut rng, 60, 1);
        let cam = test_cam(40, 30);
        let opts = RenderOptions::default();
        let pose = RigidTransform::identity();
        let weights = Image {
            height: 30,
            width: 40,
            channels: 3,
            data: (0..30 * 40 * 3).map(|i| ((i % 7) as f64 - 3.0) / 3.0).collect(),
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let img = render(&cloud, &cam, &pose, &opts).unwrap();
                let g = render_backward(&cloud, &cam, &pose, &opts, &weights).unwrap();
                (img, g)
            })
        };
        let (img1, g1) = run(1);
        let (img4, g4) = run(4);
        assert_eq!(img1.image.data, img4.image.data);
        assert_eq!(g1.positions, g4.positions);
        assert_eq!(g1.scales, g4.scales);
        assert_eq!(g1.rotations, g4.rotations);
        assert_eq!(g1.opacities, g4.opacities);
        assert_eq!(g1.sh, g4.sh);
    }
}
