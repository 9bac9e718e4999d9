//! Training objectives: SSIM, masked photometric reprojection, edge-aware
//! smoothness, context-source selection across the rig, and the localization
//! and rendering losses that combine them.
//!
//! Every differentiable loss is built once as tape ops; the plain-array
//! entry points wrap a throwaway tape so evaluation and training share one
//! implementation.

use crate::autodiff::{chw_to_image, image_to_chw, Tape, Tensor, Var};
use crate::geometry::{CameraRig, RigidTransform};
use crate::img::Image;
use crate::warp::{PoseChain, WarpResult};
use crate::Real;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
}

/// Loss weights. Defaults follow the training recipe this pipeline uses:
/// eta 0.15, lambda_sp 0.03, lambda_sp_tm 0.1, lambda_smooth 0.001,
/// beta 1, gamma 0.05, lambda_render 0.01.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta: f64,
    pub lambda_sp: f64,
    pub lambda_sp_tm: f64,
    pub lambda_smooth: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_render: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 0.15,
            lambda_sp: 0.03,
            lambda_sp_tm: 0.1,
            lambda_smooth: 0.001,
            beta: 1.0,
            gamma: 0.05,
            lambda_render: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.eta,
            self.lambda_sp,
            self.lambda_sp_tm,
            self.lambda_smooth,
            self.beta,
            self.gamma,
            self.lambda_render,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || self.eta > 1.0 {
            return Err(LossError::ShapeMismatch("invalid loss weights".into()));
        }
        Ok(())
    }
}

/// Which image serves as the photometric source for a target view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContextKind {
    Temporal,
    Spatial,
    SpatialTemporal,
}

/// One photometric supervision pair: warp `source` into the target view.
#[derive(Debug, Clone)]
pub struct ContextSpec<S> {
    pub kind: ContextKind,
    pub source_camera: usize,
    /// Source timestep; equals the center timestep for spatial contexts.
    pub source_timestep: i64,
    /// Target-camera-to-source-camera transform.
    pub relative_pose: RigidTransform<S>,
}

/// Enumerate photometric contexts for `camera` at `center_timestep`.
///
/// `vehicle_motions` holds the vehicle motion from the center timestep to
/// each available adjacent timestep, in the order given by
/// `adjacent_timesteps`. Relative poses compose the fixed rig extrinsics
/// with those motions: temporal `E_i^{-1} T E_i`, spatial `E_j^{-1} E_i`,
/// spatial-temporal `E_j^{-1} T E_i` (cam-to-vehicle `E`).
pub fn build_contexts<S: Real>(
    rig: &CameraRig<S>,
    camera: usize,
    adjacent_timesteps: &[i64],
    vehicle_motions: &[RigidTransform<S>],
    center_timestep: i64,
) -> Vec<ContextSpec<S>> {
    assert_eq!(adjacent_timesteps.len(), vehicle_motions.len());
    let e_i = &rig.camera(camera).cam_to_vehicle;
    let (left, right) = rig.neighbors(camera);
    let mut out = Vec::new();
    for (&t_src, motion) in adjacent_timesteps.iter().zip(vehicle_motions) {
        debug_assert_ne!(t_src, center_timestep);
        out.push(ContextSpec {
            kind: ContextKind::Temporal,
            source_camera: camera,
            source_timestep: t_src,
            relative_pose: e_i.inverse().compose(motion).compose(e_i),
        });
    }
    for j in [left, right] {
        let e_j = &rig.camera(j).cam_to_vehicle;
        out.push(ContextSpec {
            kind: ContextKind::Spatial,
            source_camera: j,
            source_timestep: center_timestep,
            relative_pose: e_j.inverse().compose(e_i),
        });
    }
    for j in [left, right] {
        let e_j = &rig.camera(j).cam_to_vehicle;
        for (&t_src, motion) in adjacent_timesteps.iter().zip(vehicle_motions) {
            out.push(ContextSpec {
                kind: ContextKind::SpatialTemporal,
                source_camera: j,
                source_timestep: t_src,
                relative_pose: e_j.inverse().compose(motion).compose(e_i),
            });
        }
    }
    out
}

/// Decomposition of a context's relative pose around the raw front-camera
/// motion, for gradient flow into the pose network. Returns `None` for
/// spatial contexts (their pose is constant).
///
/// With the vehicle motion `T_veh = E_f T_front E_f^{-1}`:
/// temporal        `E_i^{-1} T_veh E_i = (E_i^{-1} E_f) T_front (E_f^{-1} E_i)`,
/// spatial-temporal `E_j^{-1} T_veh E_i = (E_j^{-1} E_f) T_front (E_f^{-1} E_i)`.
pub fn context_pose_chain<S: Real>(
    rig: &CameraRig<S>,
    front_camera: usize,
    target_camera: usize,
    ctx: &ContextSpec<S>,
) -> Option<PoseChain<S>> {
    let e_f = &rig.camera(front_camera).cam_to_vehicle;
    let e_i = &rig.camera(target_camera).cam_to_vehicle;
    match ctx.kind {
        ContextKind::Spatial => None,
        ContextKind::Temporal | ContextKind::SpatialTemporal => {
            let e_j = &rig.camera(ctx.source_camera).cam_to_vehicle;
            Some(PoseChain {
                pre: e_j.inverse().compose(e_f),
                post: e_f.inverse().compose(e_i),
            })
        }
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel SSIM map on the tape: inputs are [3,H,W], output [1,H,W]
/// (channel mean). Local statistics use the count-normalized 3x3 box mean.
pub fn ssim_map_op<S: Real>(tape: &mut Tape<S>, a: Var, b: Var) -> Var {
    let mu_a = tape.box_mean3(a);
    let mu_b = tape.box_mean3(b);
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let mu_aa = tape.box_mean3(aa);
    let mu_bb = tape.box_mean3(bb);
    let mu_ab = tape.box_mean3(ab);
    let mu_a2 = tape.mul(mu_a, mu_a);
    let mu_b2 = tape.mul(mu_b, mu_b);
    let mu_a_mu_b = tape.mul(mu_a, mu_b);
    let sigma_a = tape.sub(mu_aa, mu_a2);
    let sigma_b = tape.sub(mu_bb, mu_b2);
    let cov = tape.sub(mu_ab, mu_a_mu_b);

    let two_mu = tape.mul_const(mu_a_mu_b, 2.0);
    let num1 = tape.add_const(two_mu, SSIM_C1);
    let two_cov = tape.mul_const(cov, 2.0);
    let num2 = tape.add_const(two_cov, SSIM_C2);
    let num = tape.mul(num1, num2);

    let mu_sum = tape.add(mu_a2, mu_b2);
    let den1 = tape.add_const(mu_sum, SSIM_C1);
    let sig_sum = tape.add(sigma_a, sigma_b);
    let den2 = tape.add_const(sig_sum, SSIM_C2);
    let den = tape.mul(den1, den2);

    let per_channel = tape.div(num, den);
    tape.mean_c(per_channel)
}

/// Photometric reprojection loss on the tape:
/// masked mean of `eta (1 - SSIM)/2 + (1 - eta) L1`.
pub fn reprojection_loss_op<S: Real>(
    tape: &mut Tape<S>,
    target: Var,
    synthesized: Var,
    valid: Arc<Vec<bool>>,
    eta: f64,
) -> Var {
    let ssim = ssim_map_op(tape, target, synthesized);
    let one_minus = tape.mul_const(ssim, -1.0);
    let one_minus = tape.add_const(one_minus, 1.0);
    let ssim_term = tape.mul_const(one_minus, eta * 0.5);

    let diff = tape.sub(target, synthesized);
    let l1 = tape.abs(diff);
    let l1 = tape.mean_c(l1);
    let l1_term = tape.mul_const(l1, 1.0 - eta);

    let per_pixel = tape.add(ssim_term, l1_term);
    tape.masked_mean(per_pixel, valid)
}

/// Edge-aware smoothness on the tape: disparity [1,H,W], image [3,H,W].
/// The disparity is mean-normalized first.
pub fn smoothness_loss_op<S: Real>(tape: &mut Tape<S>, disparity: Var, image: Var) -> Var {
    let mean = tape.mean_all(disparity);
    let inv = {
        let one = tape.constant(Tensor::scalar(S::one()));
        tape.div(one, mean)
    };
    let norm_disp = tape.bscale(disparity, inv);

    let dx = tape.diff_x(norm_disp);
    let dx = tape.abs(dx);
    let ix = tape.diff_x(image);
    let ix = tape.abs(ix);
    let ix = tape.mean_c(ix);
    let ix = tape.mul_const(ix, -1.0);
    let wx = tape.exp(ix);
    let tx = tape.mul(dx, wx);
    let mx = tape.mean_all(tx);

    let dy = tape.diff_y(norm_disp);
    let dy = tape.abs(dy);
    let iy = tape.diff_y(image);
    let iy = tape.abs(iy);
    let iy = tape.mean_c(iy);
    let iy = tape.mul_const(iy, -1.0);
    let wy = tape.exp(iy);
    let ty = tape.mul(dy, wy);
    let my = tape.mean_all(ty);

    tape.weighted_sum(&[(mx, 1.0), (my, 1.0)])
}

/// Per-pixel SSIM map of two images (plain-array wrapper).
pub fn ssim<S: Real>(a: &Image<S>, b: &Image<S>) -> Result<Image<S>, LossError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch(format!(
            "ssim inputs {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let mut tape = Tape::new();
    let av = tape.constant(image_to_chw(a));
    let bv = tape.constant(image_to_chw(b));
    let map = ssim_map_op(&mut tape, av, bv);
    Ok(chw_to_image(tape.value(map)))
}

/// Masked photometric reprojection loss (plain-array wrapper). Returns 0
/// when the valid mask is empty.
pub fn reprojection_loss<S: Real>(target: &Image<S>, synthesized: &WarpResult<S>, eta: f64) -> S {
    assert!(target.same_shape(&synthesized.image), "reprojection shape mismatch");
    let mut tape = Tape::new();
    let t = tape.constant(image_to_chw(target));
    let s = tape.constant(image_to_chw(&synthesized.image));
    let loss = reprojection_loss_op(&mut tape, t, s, Arc::new(synthesized.valid.clone()), eta);
    tape.value(loss).item()
}

/// Edge-aware smoothness loss (plain-array wrapper). `disparity` is 1/depth.
pub fn smoothness_loss<S: Real>(disparity: &Image<S>, image: &Image<S>) -> S {
    assert_eq!(disparity.channels, 1);
    let mut tape = Tape::new();
    let d = tape.constant(image_to_chw(disparity));
    let i = tape.constant(image_to_chw(image));
    let loss = smoothness_loss_op(&mut tape, d, i);
    tape.value(loss).item()
}

/// Weighted localization objective: mean reprojection loss per context kind
/// combined as `L_tm + sp L_sp + sp_tm L_sp_tm + smooth L_smooth`. Kinds
/// with no contexts contribute nothing.
pub fn localization_loss<S: Real>(
    per_context: &[(ContextKind, S)],
    smoothness: S,
    weights: &LossWeights,
) -> Result<S, LossError> {
    let mut sums = [S::zero(); 3];
    let mut counts = [0usize; 3];
    for &(kind, loss) in per_context {
        if !loss.to_f64().is_finite() {
            return Err(LossError::NonFinite {
                component: match kind {
                    ContextKind::Temporal => "temporal reprojection",
                    ContextKind::Spatial => "spatial reprojection",
                    ContextKind::SpatialTemporal => "spatial-temporal reprojection",
                },
            });
        }
        let k = kind as usize;
        sums[k] += loss;
        counts[k] += 1;
    }
    if !smoothness.to_f64().is_finite() {
        return Err(LossError::NonFinite { component: "smoothness" });
    }
    let mean = |k: ContextKind| -> S {
        let k = k as usize;
        if counts[k] == 0 {
            S::zero()
        } else {
            sums[k] / S::lit(counts[k] as f64)
        }
    };
    Ok(mean(ContextKind::Temporal)
        + S::lit(weights.lambda_sp) * mean(ContextKind::Spatial)
        + S::lit(weights.lambda_sp_tm) * mean(ContextKind::SpatialTemporal)
        + S::lit(weights.lambda_smooth) * smoothness)
}

/// Pluggable perceptual distance for the rendering loss and reports.
pub trait PerceptualMetric<S>: Send + Sync {
    fn distance(&self, a: &Image<S>, b: &Image<S>) -> S;
    fn name(&self) -> &str {
        "perceptual"
    }
}

/// Rendering loss `beta * MSE + gamma * perceptual`. Without a perceptual
/// plug-in the gamma term is zero; run manifests record its absence.
pub fn render_loss<S: Real>(
    rendered: &Image<S>,
    ground_truth: &Image<S>,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualMetric<S>>,
) -> S {
    assert!(rendered.same_shape(ground_truth), "render loss shape mismatch");
    let n = rendered.data.len().max(1);
    let mse = rendered
        .data
        .iter()
        .zip(&ground_truth.data)
        .map(|(&a, &b)| (a - b) * (a - b))
        .fold(S::zero(), |acc, v| acc + v)
        / S::lit(n as f64);
    let mut loss = S::lit(weights.beta) * mse;
    if let Some(p) = perceptual {
        loss += S::lit(weights.gamma) * p.distance(rendered, ground_truth);
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraModel, CameraRig, RigCamera};
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut StdRng, h: usize, w: usize, c: usize) -> Image<f64> {
        Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
    }

    /// Scalar 3x3 sliding-window SSIM with count normalization, channel mean.
    fn ssim_oracle(a: &Image<f64>, b: &Image<f64>) -> Image<f64> {
        let (h, w) = (a.height, a.width);
        let window = |img: &Image<f64>, f: &dyn Fn(usize, usize, usize) -> f64, y: usize, x: usize, c: usize| -> f64 {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    acc += f(yy as usize, xx as usize, c);
                    n += 1.0;
                }
            }
            let _ = img;
            acc / n
        };
        Image::from_fn(h, w, 1, |y, x, _| {
            let mut total = 0.0;
            for c in 0..a.channels {
                let mu_a = window(a, &|y, x, c| a.at(y, x, c), y, x, c);
                let mu_b = window(b, &|y, x, c| b.at(y, x, c), y, x, c);
                let mu_aa = window(a, &|y, x, c| a.at(y, x, c).powi(2), y, x, c);
                let mu_bb = window(b, &|y, x, c| b.at(y, x, c).powi(2), y, x, c);
                let mu_ab = window(a, &|y, x, c| a.at(y, x, c) * b.at(y, x, c), y, x, c);
                let sa = mu_aa - mu_a * mu_a;
                let sb = mu_bb - mu_b * mu_b;
                let cov = mu_ab - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sa + sb + SSIM_C2));
            }
            total / a.channels as f64
        })
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let mut rng = StdRng::seed_from_u64(1);
        let img = random_image(&mut rng, 9, 11, 3);
        let map = ssim(&img, &img).unwrap();
        for &v in &map.data {
            assert!((v - 1.0).abs() < 1e-9, "ssim(x,x) = {v}");
        }
    }

    #[test]
    fn ssim_constant_images_match_oracle() {
        let zeros = Image::<f64>::zeros(7, 8, 3);
        let ones = zeros.map(|_| 1.0);
        let map = ssim(&zeros, &ones).unwrap();
        let oracle = ssim_oracle(&zeros, &ones);
        assert!(map.max_abs_diff(&oracle) < 1e-12);
        // C-stabilized low value, far below 1.
        assert!(map.data[0] < 1e-3);
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = random_image(&mut rng, 10, 13, 3);
        let b = random_image(&mut rng, 10, 13, 3);
        let map = ssim(&a, &b).unwrap();
        let oracle = ssim_oracle(&a, &b);
        assert!(map.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = random_image(&mut rng, 8, 8, 3);
        let b = random_image(&mut rng, 8, 8, 3);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!(ab.max_abs_diff(&ba) < 1e-7);
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = Image::<f64>::zeros(4, 4, 3);
        let b = Image::<f64>::zeros(4, 5, 3);
        assert!(matches!(ssim(&a, &b), Err(LossError::ShapeMismatch(_))));
    }

    fn full_warp(img: &Image<f64>) -> WarpResult<f64> {
        WarpResult { image: img.clone(), valid: vec![true; img.height * img.width] }
    }

    #[test]
    fn reprojection_of_identical_images_is_zero() {
        let mut rng = StdRng::seed_from_u64(4);
        let img = random_image(&mut rng, 8, 9, 3);
        let loss = reprojection_loss(&img, &full_warp(&img), 0.15);
        assert!(loss.abs() < 1e-7);
    }

    #[test]
    fn reprojection_empty_mask_is_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let img = random_image(&mut rng, 6, 6, 3);
        let synth = WarpResult { image: Image::zeros(6, 6, 3), valid: vec![false; 36] };
        assert_eq!(reprojection_loss(&img, &synth, 0.15), 0.0);
    }

    #[test]
    fn reprojection_composes_l1_and_ssim_terms() {
        // target all 0, synthesized all 1: L1 = 1, SSIM from the oracle.
        let target = Image::<f64>::zeros(7, 8, 3);
        let synth_img = target.map(|_| 1.0);
        let ssim01 = ssim_oracle(&target, &synth_img).data[3 * 8 + 4]; // interior value
        // Interior and border SSIM values are identical for constant images.
        let loss = reprojection_loss(&target, &full_warp(&synth_img), 0.15);
        let expect = 0.85 * 1.0 + 0.15 * (1.0 - ssim01) / 2.0;
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn reprojection_is_nonnegative_and_zero_iff_identical() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..10 {
            let a = random_image(&mut rng, 6, 7, 3);
            let mut b = a.clone();
            let loss_same = reprojection_loss(&a, &full_warp(&b), 0.15);
            assert!(loss_same.abs() < 1e-7);
            b.data[17] = (b.data[17] + 0.5) % 1.0;
            let loss_diff = reprojection_loss(&a, &full_warp(&b), 0.15);
            assert!(loss_diff > 1e-7);
        }
    }

    #[test]
    fn smoothness_constant_disparity_is_zero() {
        let mut rng = StdRng::seed_from_u64(7);
        let img = random_image(&mut rng, 6, 8, 3);
        let disp = Image::from_fn(6, 8, 1, |_, _, _| 0.37);
        assert!(smoothness_loss(&disp, &img).abs() < 1e-12);
    }

    #[test]
    fn smoothness_linear_ramp_is_analytic() {
        // disparity = 1 + x on a constant image: normalized slope is
        // 1/mean, weights are exp(0) = 1, y gradients vanish.
        let (h, w) = (5usize, 9usize);
        let img = Image::from_fn(h, w, 3, |_, _, _| 0.5);
        let disp = Image::from_fn(h, w, 1, |_, x, _| 1.0 + x as f64);
        let mean = (0..w).map(|x| 1.0 + x as f64).sum::<f64>() / w as f64;
        let expect = 1.0 / mean;
        let got = smoothness_loss(&disp, &img);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    // Oracle: direct per-pixel finite differences of the definition.
    #[test]
    fn smoothness_matches_per_pixel_oracle() {
        let mut rng = StdRng::seed_from_u64(8);
        let (h, w) = (7usize, 9usize);
        let img = random_image(&mut rng, h, w, 3);
        let disp = Image::from_fn(h, w, 1, |_, _, _| rng.gen_range(0.2..2.0));
        let mean: f64 = disp.data.iter().sum::<f64>() / disp.data.len() as f64;
        let mut acc_x = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                let dd = (disp.at(y, x + 1, 0) - disp.at(y, x, 0)).abs() / mean;
                let di: f64 = (0..3).map(|c| (img.at(y, x + 1, c) - img.at(y, x, c)).abs()).sum::<f64>() / 3.0;
                acc_x += dd * (-di).exp();
            }
        }
        let mut acc_y = 0.0;
        for y in 0..h - 1 {
            for x in 0..w {
                let dd = (disp.at(y + 1, x, 0) - disp.at(y, x, 0)).abs() / mean;
                let di: f64 = (0..3).map(|c| (img.at(y + 1, x, c) - img.at(y, x, c)).abs()).sum::<f64>() / 3.0;
                acc_y += dd * (-di).exp();
            }
        }
        let oracle = acc_x / (h * (w - 1)) as f64 + acc_y / ((h - 1) * w) as f64;
        let got = smoothness_loss(&disp, &img);
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    fn ring_rig(n: usize) -> CameraRig<f64> {
        let cam = CameraModel::new(80.0, 80.0, 15.5, 11.5, 32, 24);
        let cams = (0..n)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::TAU / n as f64;
                RigCamera {
                    name: format!("cam{i}"),
                    model: cam,
                    cam_to_vehicle: RigidTransform::from_axis_angle(
                        Vector3::new(0.0, 0.0, yaw),
                        Vector3::new(yaw.cos(), yaw.sin(), 1.5),
                    ),
                }
            })
            .collect();
        CameraRig::ring(cams).unwrap()
    }

    #[test]
    fn six_camera_ring_yields_eight_contexts() {
        let rig = ring_rig(6);
        let motions = [
            RigidTransform::from_translation(Vector3::new(-0.5, 0.0, 0.0)),
            RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)),
        ];
        let ctxs = build_contexts(&rig, 2, &[4, 6], &motions, 5);
        assert_eq!(ctxs.len(), 8);
        let count = |k: ContextKind| ctxs.iter().filter(|c| c.kind == k).count();
        assert_eq!(count(ContextKind::Temporal), 2);
        assert_eq!(count(ContextKind::Spatial), 2);
        assert_eq!(count(ContextKind::SpatialTemporal), 4);
        for c in &ctxs {
            match c.kind {
                ContextKind::Temporal => {
                    assert_eq!(c.source_camera, 2);
                    assert_ne!(c.source_timestep, 5);
                }
                ContextKind::Spatial => {
                    assert!(c.source_camera == 1 || c.source_camera == 3);
                    assert_eq!(c.source_timestep, 5);
                }
                ContextKind::SpatialTemporal => {
                    assert!(c.source_camera == 1 || c.source_camera == 3);
                    assert_ne!(c.source_timestep, 5);
                }
            }
            c.relative_pose.validate().unwrap();
        }
    }

    #[test]
    fn identity_motion_makes_spatial_temporal_equal_spatial() {
        let rig = ring_rig(6);
        let ctxs = build_contexts(&rig, 0, &[1], &[RigidTransform::identity()], 0i64);
        let spatial: Vec<_> = ctxs.iter().filter(|c| c.kind == ContextKind::Spatial).collect();
        let sp_tm: Vec<_> = ctxs
            .iter()
            .filter(|c| c.kind == ContextKind::SpatialTemporal)
            .collect();
        for st in &sp_tm {
            let mate = spatial.iter().find(|s| s.source_camera == st.source_camera).unwrap();
            assert!(st.relative_pose.max_abs_diff(&mate.relative_pose) < 1e-12);
        }
    }

    // Oracle: homogeneous product of vehicle-to-camera extrinsics,
    // `E_j E_i^{-1} T` with `E = cam_to_vehicle^{-1}`.
    #[test]
    fn spatial_temporal_pose_matches_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(9);
        let rig = ring_rig(6);
        for _ in 0..10 {
            let t_cam = RigidTransform::from_axis_angle(
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ),
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
            );
            let i = 2usize;
            // Vehicle motion corresponding to camera-i motion t_cam.
            let e_i_c2v = rig.camera(i).cam_to_vehicle;
            let t_veh = e_i_c2v.compose(&t_cam).compose(&e_i_c2v.inverse());
            let ctxs = build_contexts(&rig, i, &[1], &[t_veh], 0i64);
            for c in ctxs.iter().filter(|c| c.kind == ContextKind::SpatialTemporal) {
                let e_i = e_i_c2v.inverse().to_homogeneous(); // vehicle-to-camera
                let e_j = rig.camera(c.source_camera).cam_to_vehicle.inverse().to_homogeneous();
                // Temporal motion of camera i is exactly t_cam by construction.
                let oracle = e_j * e_i.try_inverse().unwrap() * t_cam.to_homogeneous();
                let got = c.relative_pose.to_homogeneous();
                assert!((got - oracle).abs().max() < 1e-10);
            }
            // Pose-chain decomposition reproduces the same relative pose.
            let front = 0usize;
            let e_f = rig.camera(front).cam_to_vehicle;
            let t_front = e_f.inverse().compose(&t_veh).compose(&e_f);
            let aa = {
                // Recover axis-angle from the rotation via quaternion.
                let q = t_front.rotation_quaternion();
                let angle = 2.0 * q[0].clamp(-1.0, 1.0).acos();
                let s = (1.0 - q[0] * q[0]).max(1e-18).sqrt();
                Vector3::new(q[1], q[2], q[3]) * if s < 1e-9 { 2.0 } else { angle / s }
            };
            let pose6 = [aa.x, aa.y, aa.z, t_front.translation.x, t_front.translation.y, t_front.translation.z];
            for c in &ctxs {
                if let Some(chain) = context_pose_chain(&rig, front, i, c) {
                    let rebuilt = chain.relative_pose(&pose6);
                    assert!(rebuilt.max_abs_diff(&c.relative_pose) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn localization_loss_arithmetic() {
        let w = LossWeights::default();
        // All-zero components.
        let zero = localization_loss::<f64>(
            &[(ContextKind::Temporal, 0.0), (ContextKind::Spatial, 0.0)],
            0.0,
            &w,
        )
        .unwrap();
        assert_eq!(zero, 0.0);
        // Unit components: 1 + 0.03 + 0.1 + 0.001.
        let unit = localization_loss::<f64>(
            &[
                (ContextKind::Temporal, 1.0),
                (ContextKind::Spatial, 1.0),
                (ContextKind::SpatialTemporal, 1.0),
            ],
            1.0,
            &w,
        )
        .unwrap();
        assert!((unit - 1.131).abs() < 1e-12);
        // Means within kinds, then the weighted sum.
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..10 {
            let tm = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let sp = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let st = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let sm = rng.gen_range(0.0..1.0);
            let got = localization_loss::<f64>(
                &[
                    (ContextKind::Temporal, tm[0]),
                    (ContextKind::Temporal, tm[1]),
                    (ContextKind::Spatial, sp[0]),
                    (ContextKind::Spatial, sp[1]),
                    (ContextKind::SpatialTemporal, st[0]),
                    (ContextKind::SpatialTemporal, st[1]),
                ],
                sm,
                &w,
            )
            .unwrap();
            let oracle = (tm[0] + tm[1]) / 2.0
                + 0.03 * (sp[0] + sp[1]) / 2.0
                + 0.1 * (st[0] + st[1]) / 2.0
                + 0.001 * sm;
            assert!((got - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn localization_loss_is_linear_in_each_component() {
        let w = LossWeights::default();
        let base = localization_loss::<f64>(&[(ContextKind::Spatial, 1.0)], 0.0, &w).unwrap();
        let scaled = localization_loss::<f64>(&[(ContextKind::Spatial, 3.0)], 0.0, &w).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn localization_loss_rejects_nan() {
        let w = LossWeights::default();
        assert!(matches!(
            localization_loss::<f64>(&[(ContextKind::Temporal, f64::NAN)], 0.0, &w),
            Err(LossError::NonFinite { .. })
        ));
        assert!(matches!(
            localization_loss::<f64>(&[], f64::NAN, &w),
            Err(LossError::NonFinite { component: "smoothness" })
        ));
    }

    struct StubPerceptual(f64);
    impl PerceptualMetric<f64> for StubPerceptual {
        fn distance(&self, _: &Image<f64>, _: &Image<f64>) -> f64 {
            self.0
        }
    }

    #[test]
    fn render_loss_composition() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = random_image(&mut rng, 5, 5, 3);
        let w = LossWeights::default();
        assert_eq!(render_loss(&a, &a, &w, None), 0.0);
        // Uniform difference of 0.2: MSE = 0.04 with beta = 1.
        let b = a.map(|v| (v + 0.2).min(1.2));
        let mse_loss = render_loss(&a, &b, &w, None);
        assert!((mse_loss - 0.04).abs() < 1e-12);
        // Stub perceptual metric contributes gamma * 0.5.
        let with_p = render_loss(&a, &b, &w, Some(&StubPerceptual(0.5)));
        assert!((with_p - (0.04 + 0.05 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn reprojection_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(12);
        let target = random_image(&mut rng, 6, 7, 3);
        let synth = random_image(&mut rng, 6, 7, 3);
        let mut valid = vec![true; 42];
        valid[3] = false;
        valid[20] = false;
        let valid = Arc::new(valid);
        let run = |img: &Image<f64>| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let t = tape.constant(image_to_chw(&target));
            let s = tape.leaf(image_to_chw(img));
            let loss = reprojection_loss_op(&mut tape, t, s, valid.clone(), 0.15);
            let value = tape.value(loss).item();
            let grads = tape.backward(loss);
            (value, grads.get(s).map(|g| g.data.clone()))
        };
        let (_, grad) = run(&synth);
        let grad = grad.unwrap();
        let step = 1e-6;
        for probe in 0..24 {
            let idx = probe * 5 % (42 * 3);
            // grad is CHW; perturb the matching image entry.
            let c = idx / 42;
            let pix = idx % 42;
            let (y, x) = (pix / 7, pix % 7);
            let mut plus = synth.clone();
            let mut minus = synth.clone();
            *plus.at_mut(y, x, c) += step;
            *minus.at_mut(y, x, c) -= step;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * step);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-6);
            assert!(
                (fd - grad[idx]).abs() / denom < 1e-3,
                "entry {idx}: {} vs {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn smoothness_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let img = random_image(&mut rng, 5, 6, 3);
        let disp = Image::from_fn(5, 6, 1, |_, _, _| rng.gen_range(0.3..1.5));
        let run = |d: &Image<f64>| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let dv = tape.leaf(image_to_chw(d));
            let iv = tape.constant(image_to_chw(&img));
            let loss = smoothness_loss_op(&mut tape, dv, iv);
            let value = tape.value(loss).item();
            let grads = tape.backward(loss);
            (value, grads.get(dv).map(|g| g.data.clone()))
        };
        let (_, grad) = run(&disp);
        let grad = grad.unwrap();
        let step = 1e-6;
        for idx in 0..30 {
            let mut plus = disp.clone();
            let mut minus = disp.clone();
            plus.data[idx] += step;
            minus.data[idx] -= step;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * step);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-5);
            assert!((fd - grad[idx]).abs() / denom < 1e-3, "pixel {idx}");
        }
    }
}
