//! Differentiable inverse warping: synthesize a target view from a source
//! image given target depth and the target-to-source relative pose.
//!
//! The chain per target pixel is unproject -> rigid transform -> project,
//! followed by bilinear sampling of the source image. Out-of-bounds or
//! behind-camera samples are masked out (value 0, mask false) rather than
//! edge-clamped, so masked photometric losses never see border leakage.

use crate::geometry::{rotation_axis_angle_jacobian, CameraModel, RigidTransform};
use crate::img::Image;
use crate::parallel;
use crate::Real;
use nalgebra::{Matrix3, Vector3};

/// A strictly positive H×W depth raster (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<S> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<S>,
}

impl<S: Real> DepthMap<S> {
    pub fn new(height: usize, width: usize, values: Vec<S>) -> Self {
        assert_eq!(values.len(), height * width);
        Self { height, width, values }
    }

    pub fn constant(height: usize, width: usize, depth: S) -> Self {
        Self::new(height, width, vec![depth; height * width])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> S {
        self.values[y * self.width + x]
    }

    pub fn min_max(&self) -> (S, S) {
        let mut lo = self.values[0];
        let mut hi = self.values[0];
        for &v in &self.values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// Per target pixel: source-image sampling coordinates plus validity.
#[derive(Debug, Clone)]
pub struct WarpGrid<S> {
    pub height: usize,
    pub width: usize,
    /// `(u, v)` source coordinates, row-major over target pixels.
    pub coords: Vec<[S; 2]>,
    /// False where the transformed point fell behind the camera or outside
    /// the source bounds.
    pub valid: Vec<bool>,
}

/// A warped image plus the validity mask. Invalid pixels are exactly zero.
#[derive(Debug, Clone)]
pub struct WarpResult<S> {
    pub image: Image<S>,
    pub valid: Vec<bool>,
}

impl<S: Real> WarpResult<S> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Decomposition of a relative pose around a learnable 6-DoF motion:
/// `T_rel = pre ∘ T(axis_angle, translation) ∘ post` with constant factors.
#[derive(Debug, Clone, Copy)]
pub struct PoseChain<S> {
    pub pre: RigidTransform<S>,
    pub post: RigidTransform<S>,
}

impl<S: Real> PoseChain<S> {
    pub fn bare() -> Self {
        Self {
            pre: RigidTransform::identity(),
            post: RigidTransform::identity(),
        }
    }

    pub fn relative_pose(&self, pose6: &[S; 6]) -> RigidTransform<S> {
        let motion = RigidTransform::from_axis_angle(
            Vector3::new(pose6[0], pose6[1], pose6[2]),
            Vector3::new(pose6[3], pose6[4], pose6[5]),
        );
        self.pre.compose(&motion).compose(&self.post)
    }
}

/// Map every target pixel to its source-image location.
pub fn warp_grid<S: Real>(
    target_cam: &CameraModel<S>,
    source_cam: &CameraModel<S>,
    relative_pose: &RigidTransform<S>,
    target_depth: &DepthMap<S>,
) -> WarpGrid<S> {
    let (h, w) = (target_depth.height, target_depth.width);
    assert_eq!(h, target_cam.height);
    assert_eq!(w, target_cam.width);
    let rows = parallel::map_indexed(h, |y| {
        let mut coords = Vec::with_capacity(w);
        let mut valid = Vec::with_capacity(w);
        for x in 0..w {
            let d = target_depth.at(y, x);
            let ray = target_cam.ray(S::lit(x as f64), S::lit(y as f64));
            let p = relative_pose.apply(&(ray * d));
            if p.z.to_f64() <= 0.0 {
                coords.push([-S::one(), -S::one()]);
                valid.push(false);
                continue;
            }
            let u = source_cam.fx * p.x / p.z + source_cam.cx;
            let v = source_cam.fy * p.y / p.z + source_cam.cy;
            coords.push([u, v]);
            valid.push(source_cam.contains(u, v));
        }
        (coords, valid)
    });
    let mut coords = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for (c, v) in rows {
        coords.extend(c);
        valid.extend(v);
    }
    WarpGrid { height: h, width: w, coords, valid }
}

#[inline]
fn in_bounds(u: f64, v: f64, width: usize, height: usize) -> bool {
    const EPS: f64 = crate::geometry::CameraModel::<f64>::EDGE_EPS;
    u >= -EPS && u <= (width - 1) as f64 + EPS && v >= -EPS && v <= (height - 1) as f64 + EPS
}

/// Floor into `[0, n-2]` so the `+1` neighbor stays in range, with the
/// fractional part relative to that cell.
#[inline]
fn cell<S: Real>(g: S, n: usize) -> (usize, S) {
    let clamped = g.to_f64().clamp(0.0, (n - 1) as f64);
    let i0 = (clamped.floor() as usize).min(n.saturating_sub(2));
    (i0, g - S::lit(i0 as f64))
}

/// Bilinear sampling of `source` at `grid` locations.
pub fn sample_bilinear<S: Real>(source: &Image<S>, grid: &WarpGrid<S>) -> WarpResult<S> {
    let ch = source.channels;
    let mut image = Image::zeros(grid.height, grid.width, ch);
    let mut valid = vec![false; grid.height * grid.width];
    let w_in = source.width;
    let h_in = source.height;
    parallel::for_each_chunk(&mut image.data, grid.width * ch, |y, row| {
        for x in 0..grid.width {
            let p = y * grid.width + x;
            if !grid.valid[p] {
                continue;
            }
            let [gu, gv] = grid.coords[p];
            if !in_bounds(gu.to_f64(), gv.to_f64(), w_in, h_in) {
                continue;
            }
            let (x0, fu) = cell(gu, w_in);
            let (y0, fv) = cell(gv, h_in);
            let x1 = (x0 + 1).min(w_in - 1);
            let y1 = (y0 + 1).min(h_in - 1);
            let w00 = (S::one() - fu) * (S::one() - fv);
            let w01 = fu * (S::one() - fv);
            let w10 = (S::one() - fu) * fv;
            let w11 = fu * fv;
            for c in 0..ch {
                row[x * ch + c] = source.at(y0, x0, c) * w00
                    + source.at(y0, x1, c) * w01
                    + source.at(y1, x0, c) * w10
                    + source.at(y1, x1, c) * w11;
            }
        }
    });
    // Mask pass mirrors the sampling pass exactly.
    for p in 0..grid.height * grid.width {
        if grid.valid[p] {
            let [gu, gv] = grid.coords[p];
            valid[p] = in_bounds(gu.to_f64(), gv.to_f64(), w_in, h_in);
        }
    }
    WarpResult { image, valid }
}

/// Full view synthesis: `sample_bilinear(source, warp_grid(...))`.
pub fn synthesize<S: Real>(
    target_cam: &CameraModel<S>,
    source_cam: &CameraModel<S>,
    relative_pose: &RigidTransform<S>,
    target_depth: &DepthMap<S>,
    source_image: &Image<S>,
) -> WarpResult<S> {
    let grid = warp_grid(target_cam, source_cam, relative_pose, target_depth);
    sample_bilinear(source_image, &grid)
}

/// Backward of `sample_bilinear`: gradients of a scalar loss with respect to
/// the source image and the grid coordinates, given `d_output`.
pub fn sample_bilinear_backward<S: Real>(
    source: &Image<S>,
    grid: &WarpGrid<S>,
    d_output: &Image<S>,
    want_d_image: bool,
) -> (Option<Image<S>>, Vec<[S; 2]>) {
    let ch = source.channels;
    let w_in = source.width;
    let h_in = source.height;
    // Grid gradients are a gather per target pixel: parallel.
    let d_grid_rows = parallel::map_indexed(grid.height, |y| {
        let mut row = vec![[S::zero(); 2]; grid.width];
        for x in 0..grid.width {
            let p = y * grid.width + x;
            if !grid.valid[p] {
                continue;
            }
            let [gu, gv] = grid.coords[p];
            if !in_bounds(gu.to_f64(), gv.to_f64(), w_in, h_in) {
                continue;
            }
            let (x0, fu) = cell(gu, w_in);
            let (y0, fv) = cell(gv, h_in);
            let x1 = (x0 + 1).min(w_in - 1);
            let y1 = (y0 + 1).min(h_in - 1);
            let mut du = S::zero();
            let mut dv = S::zero();
            for c in 0..ch {
                let g = d_output.at(y, x, c);
                let i00 = source.at(y0, x0, c);
                let i01 = source.at(y0, x1, c);
                let i10 = source.at(y1, x0, c);
                let i11 = source.at(y1, x1, c);
                du += g * ((S::one() - fv) * (i01 - i00) + fv * (i11 - i10));
                dv += g * ((S::one() - fu) * (i10 - i00) + fu * (i11 - i01));
            }
            row[x] = [du, dv];
        }
        row
    });
    let mut d_grid = Vec::with_capacity(grid.height * grid.width);
    for row in d_grid_rows {
        d_grid.extend(row);
    }

    // Image gradients scatter into four neighbors; accumulate sequentially
    // in pixel order so the result never depends on thread count.
    let d_image = want_d_image.then(|| {
        let mut d_img = Image::zeros(h_in, w_in, ch);
        for y in 0..grid.height {
            for x in 0..grid.width {
                let p = y * grid.width + x;
                if !grid.valid[p] {
                    continue;
                }
                let [gu, gv] = grid.coords[p];
                if !in_bounds(gu.to_f64(), gv.to_f64(), w_in, h_in) {
                    continue;
                }
                let (x0, fu) = cell(gu, w_in);
                let (y0, fv) = cell(gv, h_in);
                let x1 = (x0 + 1).min(w_in - 1);
                let y1 = (y0 + 1).min(h_in - 1);
                for c in 0..ch {
                    let g = d_output.at(y, x, c);
                    *d_img.at_mut(y0, x0, c) += g * (S::one() - fu) * (S::one() - fv);
                    *d_img.at_mut(y0, x1, c) += g * fu * (S::one() - fv);
                    *d_img.at_mut(y1, x0, c) += g * (S::one() - fu) * fv;
                    *d_img.at_mut(y1, x1, c) += g * fu * fv;
                }
            }
        }
        d_img
    });
    (d_image, d_grid)
}

/// Backward of `warp_grid` with respect to depth and, optionally, the 6-DoF
/// motion inside `chain`. `d_grid` carries the incoming per-pixel gradient;
/// entries at invalid pixels are ignored.
pub fn warp_grid_backward<S: Real>(
    target_cam: &CameraModel<S>,
    source_cam: &CameraModel<S>,
    chain: &PoseChain<S>,
    pose6: &[S; 6],
    target_depth: &DepthMap<S>,
    grid: &WarpGrid<S>,
    d_grid: &[[S; 2]],
    want_d_pose: bool,
) -> (Vec<S>, Option<[S; 6]>) {
    let (h, w) = (target_depth.height, target_depth.width);
    let axis_angle = Vector3::new(pose6[0], pose6[1], pose6[2]);
    let motion = RigidTransform::from_axis_angle(axis_angle, Vector3::new(pose6[3], pose6[4], pose6[5]));
    let relative = chain.pre.compose(&motion).compose(&chain.post);
    let rot_jac: [Matrix3<S>; 3] = rotation_axis_angle_jacobian(axis_angle);

    struct RowGrad<S> {
        d_depth: Vec<S>,
        d_pose: [S; 6],
    }
    let rows = parallel::map_indexed(h, |y| {
        let mut out = RowGrad { d_depth: vec![S::zero(); w], d_pose: [S::zero(); 6] };
        for x in 0..w {
            let p = y * w + x;
            if !grid.valid[p] {
                continue;
            }
            let g = d_grid[p];
            if g[0] == S::zero() && g[1] == S::zero() {
                continue;
            }
            let d = target_depth.at(y, x);
            let ray = target_cam.ray(S::lit(x as f64), S::lit(y as f64));
            let x_t = ray * d;
            let pt = relative.apply(&x_t);
            let inv_z = S::one() / pt.z;
            // d(u,v)/d(pt)
            let du_dp = Vector3::new(source_cam.fx * inv_z, S::zero(), -source_cam.fx * pt.x * inv_z * inv_z);
            let dv_dp = Vector3::new(S::zero(), source_cam.fy * inv_z, -source_cam.fy * pt.y * inv_z * inv_z);
            let d_pt = du_dp * g[0] + dv_dp * g[1];
            // Depth: pt = R_rel (d * ray) + t_rel
            out.d_depth[x] = d_pt.dot(&(relative.rotation * ray));
            if want_d_pose {
                // pt = R_pre (R_aa y + t_aa) + t_pre with y = post(x_t)
                let y_vec = chain.post.apply(&x_t);
                let d_inner = chain.pre.rotation.transpose() * d_pt;
                for i in 0..3 {
                    out.d_pose[i] += d_inner.dot(&(rot_jac[i] * y_vec));
                    out.d_pose[3 + i] += d_inner[i];
                }
            }
        }
        out
    });
    let mut d_depth = Vec::with_capacity(h * w);
    let mut d_pose = [S::zero(); 6];
    for row in rows {
        d_depth.extend(row.d_depth);
        for i in 0..6 {
            d_pose[i] += row.d_pose[i];
        }
    }
    (d_depth, want_d_pose.then_some(d_pose))
}
