//! Tape ops that bridge networks to geometry and rendering: differentiable
//! view synthesis, cloud positioning, rigid quaternion rotation, and the
//! splat-render op.

use super::{Tape, Tensor, Var, VarId};
use crate::geometry::{
    quaternion_axis_angle_jacobian, quaternion_from_axis_angle, quaternion_from_rotation,
    quaternion_multiply, CameraModel, RigidTransform,
};
use crate::img::Image;
use crate::primitives::{GaussianCloud, SourceTag};
use crate::renderer::{render, render_backward, RenderOptions};
use crate::warp::{
    sample_bilinear, sample_bilinear_backward, warp_grid, warp_grid_backward, DepthMap, PoseChain,
};
use crate::Real;
use nalgebra::Vector3;
use std::sync::Arc;

/// Cloud attribute variables feeding the render op.
#[derive(Debug, Clone, Copy)]
pub struct CloudVars {
    /// [M, 3] positions in the render-target frame.
    pub positions: Var,
    /// [M, 3] positive scales.
    pub scales: Var,
    /// [M, 4] unit quaternions (w, x, y, z).
    pub rotations: Var,
    /// [M] opacities in [0, 1].
    pub opacities: Var,
    /// [M, 3 * basis] SH coefficients, color-major.
    pub sh: Var,
}

const ZERO_POSE: [f64; 6] = [0.0; 6];

fn pose6_of<S: Real>(t: Option<&Tensor<S>>) -> [S; 6] {
    match t {
        Some(t) => {
            assert_eq!(t.len(), 6, "pose tensor must have 6 entries");
            let mut out = [S::zero(); 6];
            out.copy_from_slice(&t.data);
            out
        }
        None => ZERO_POSE.map(S::lit),
    }
}

fn depth_map_of<S: Real>(t: &Tensor<S>) -> DepthMap<S> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 1, "depth tensor must be single-channel");
    DepthMap::new(h, w, t.data.clone())
}

impl<S: Real> Tape<S> {
    /// Differentiable view synthesis: warp a constant source image into the
    /// target view using `depth` ([1,H,W]) and the relative pose
    /// `chain.pre ∘ T(pose) ∘ chain.post`. Returns the synthesized image
    /// ([3,H,W], invalid pixels zero) and the validity mask.
    pub fn synthesize_op(
        &mut self,
        depth: Var,
        pose: Option<Var>,
        chain: PoseChain<S>,
        target_cam: CameraModel<S>,
        source_cam: CameraModel<S>,
        source_image: Arc<Image<S>>,
    ) -> (Var, Arc<Vec<bool>>) {
        let pose6 = pose6_of(pose.map(|p| self.value(p)));
        let relative = chain.relative_pose(&pose6);
        let depth_map = depth_map_of(self.value(depth));
        let grid = warp_grid(&target_cam, &source_cam, &relative, &depth_map);
        let result = sample_bilinear(source_image.as_ref(), &grid);
        let mask = Arc::new(result.valid.clone());
        let (h, w) = (grid.height, grid.width);
        let value = {
            let mut data = vec![S::zero(); 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        data[(ch * h + y) * w + x] = result.image.at(y, x, ch);
                    }
                }
            }
            Tensor::new(vec![3, h, w], data)
        };

        let grid = Arc::new(grid);
        let parents: Vec<Var> = std::iter::once(depth).chain(pose).collect();
        let depth_id = depth.id;
        let pose_id: Option<VarId> = pose.map(|p| p.id);
        let out = self.op(
            &parents,
            value,
            Box::new(move |vals, g, store| {
                // d_output arrives CHW; the warp backward wants HWC.
                let mut d_out = Image::zeros(h, w, 3);
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..3 {
                            *d_out.at_mut(y, x, ch) = g.data[(ch * h + y) * w + x];
                        }
                    }
                }
                let (_, d_grid) = sample_bilinear_backward(source_image.as_ref(), &grid, &d_out, false);
                let depth_map = depth_map_of(vals.get(depth_id));
                let pose6 = pose6_of(pose_id.map(|id| vals.get(id)));
                let (d_depth, d_pose) = warp_grid_backward(
                    &target_cam,
                    &source_cam,
                    &chain,
                    &pose6,
                    &depth_map,
                    &grid,
                    &d_grid,
                    pose_id.is_some(),
                );
                store.accumulate(depth_id, Tensor::new(vec![1, h, w], d_depth));
                if let (Some(id), Some(dp)) = (pose_id, d_pose) {
                    store.accumulate(id, Tensor::new(vec![6], dp.to_vec()));
                }
            }),
        );
        (out, mask)
    }

    /// Per-pixel primitive positions in the render-target frame:
    /// `position = chain(pose) * (cam_to_vehicle * unproject(depth))`.
    /// Output shape [H*W, 3], row-major pixel order.
    pub fn cloud_positions_op(
        &mut self,
        depth: Var,
        pose: Option<Var>,
        chain: PoseChain<S>,
        cam: CameraModel<S>,
        cam_to_vehicle: RigidTransform<S>,
    ) -> Var {
        let pose6 = pose6_of(pose.map(|p| self.value(p)));
        let motion = chain.relative_pose(&pose6);
        let total = motion.compose(&cam_to_vehicle);
        let depth_map = depth_map_of(self.value(depth));
        let (h, w) = (depth_map.height, depth_map.width);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let ray = cam.ray(S::lit(x as f64), S::lit(y as f64));
                let p = total.apply(&(ray * depth_map.at(y, x)));
                data.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
        let parents: Vec<Var> = std::iter::once(depth).chain(pose).collect();
        let depth_id = depth.id;
        let pose_id: Option<VarId> = pose.map(|p| p.id);
        self.op(
            &parents,
            Tensor::new(vec![h * w, 3], data),
            Box::new(move |vals, g, store| {
                let depth_map = depth_map_of(vals.get(depth_id));
                let pose6 = pose6_of(pose_id.map(|id| vals.get(id)));
                let motion = chain.relative_pose(&pose6);
                let total = motion.compose(&cam_to_vehicle);
                let rot_jac =
                    crate::geometry::rotation_axis_angle_jacobian(Vector3::new(pose6[0], pose6[1], pose6[2]));
                let mut d_depth = vec![S::zero(); h * w];
                let mut d_pose = [S::zero(); 6];
                for y in 0..h {
                    for x in 0..w {
                        let i = y * w + x;
                        let d_p = Vector3::new(g.data[i * 3], g.data[i * 3 + 1], g.data[i * 3 + 2]);
                        let ray = cam.ray(S::lit(x as f64), S::lit(y as f64));
                        d_depth[i] = d_p.dot(&(total.rotation * ray));
                        if pose_id.is_some() {
                            // p = R_pre (R_aa y + t_aa) + t_pre with
                            // y = post(cam_to_vehicle(x_cam)).
                            let x_cam = ray * depth_map.at(y, x);
                            let y_vec = chain.post.apply(&cam_to_vehicle.apply(&x_cam));
                            let d_inner = chain.pre.rotation.transpose() * d_p;
                            for k in 0..3 {
                                d_pose[k] += d_inner.dot(&(rot_jac[k] * y_vec));
                                d_pose[3 + k] += d_inner[k];
                            }
                        }
                    }
                }
                store.accumulate(depth_id, Tensor::new(vec![1, h, w], d_depth));
                if let Some(id) = pose_id {
                    store.accumulate(id, Tensor::new(vec![6], d_pose.to_vec()));
                }
            }),
        )
    }

    /// Rotate per-primitive quaternions by the chain rotation:
    /// `q' = quat(chain(pose).rotation) ⊗ q`. Shapes [M,4] -> [M,4].
    pub fn rotate_quats_op(&mut self, quats: Var, pose: Option<Var>, chain: PoseChain<S>) -> Var {
        let pose6 = pose6_of(pose.map(|p| self.value(p)));
        let q_pre = quaternion_from_rotation(&chain.pre.rotation);
        let q_post = quaternion_from_rotation(&chain.post.rotation);
        let q_aa = quaternion_from_axis_angle(Vector3::new(pose6[0], pose6[1], pose6[2]));
        let q_chain = quaternion_multiply(quaternion_multiply(q_pre, q_aa), q_post);
        let qv = self.value(quats);
        assert_eq!(qv.shape[1], 4);
        let m = qv.shape[0];
        let mut data = Vec::with_capacity(m * 4);
        for k in 0..m {
            let q = [qv.data[k * 4], qv.data[k * 4 + 1], qv.data[k * 4 + 2], qv.data[k * 4 + 3]];
            data.extend_from_slice(&quaternion_multiply(q_chain, q));
        }
        let parents: Vec<Var> = std::iter::once(quats).chain(pose).collect();
        let quats_id = quats.id;
        let pose_id: Option<VarId> = pose.map(|p| p.id);
        self.op(
            &parents,
            Tensor::new(vec![m, 4], data),
            Box::new(move |vals, g, store| {
                let qv = vals.get(quats_id);
                let pose6 = pose6_of(pose_id.map(|id| vals.get(id)));
                let q_aa = quaternion_from_axis_angle(Vector3::new(pose6[0], pose6[1], pose6[2]));
                let q_chain = quaternion_multiply(quaternion_multiply(q_pre, q_aa), q_post);
                // q' = L(q_chain) q: the left-multiplication matrix.
                let l = left_mul_matrix(q_chain);
                let mut d_q = vec![S::zero(); m * 4];
                for k in 0..m {
                    for i in 0..4 {
                        let mut acc = S::zero();
                        for r in 0..4 {
                            acc += l[r][i] * g.data[k * 4 + r];
                        }
                        d_q[k * 4 + i] = acc;
                    }
                }
                store.accumulate(quats_id, Tensor::new(vec![m, 4], d_q));
                if let Some(id) = pose_id {
                    // q' = L(q_pre) R(q_post ⊗ q) q_aa per primitive.
                    let jac = quaternion_axis_angle_jacobian(Vector3::new(pose6[0], pose6[1], pose6[2]));
                    let l_pre = left_mul_matrix(q_pre);
                    let mut d_aa = [S::zero(); 3];
                    for k in 0..m {
                        let q = [qv.data[k * 4], qv.data[k * 4 + 1], qv.data[k * 4 + 2], qv.data[k * 4 + 3]];
                        let u = quaternion_multiply(q_post, q);
                        let r_u = right_mul_matrix(u);
                        // d(q')/d(q_aa) = L(q_pre) R(u)
                        for a in 0..3 {
                            let mut acc = S::zero();
                            for r in 0..4 {
                                let gr = g.data[k * 4 + r];
                                if gr == S::zero() {
                                    continue;
                                }
                                for c in 0..4 {
                                    let mut lr = S::zero();
                                    for t in 0..4 {
                                        lr += l_pre[r][t] * r_u[t][c];
                                    }
                                    acc += gr * lr * jac[c][a];
                                }
                            }
                            d_aa[a] += acc;
                        }
                    }
                    let mut d_pose = vec![S::zero(); 6];
                    d_pose[..3].copy_from_slice(&d_aa);
                    store.accumulate(id, Tensor::new(vec![6], d_pose));
                }
            }),
        )
    }

    /// Differentiable splat rendering. Produces the image as [3,H,W].
    /// `tags` annotate provenance only; the camera pose is a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn render_op(
        &mut self,
        vars: CloudVars,
        sh_degree: usize,
        tags: Arc<Vec<SourceTag>>,
        cam: CameraModel<S>,
        cam_pose: RigidTransform<S>,
        opts: RenderOptions<S>,
    ) -> Var {
        let cloud = Arc::new(cloud_from_vars(self, &vars, sh_degree, &tags));
        let out = render(cloud.as_ref(), &cam, &cam_pose, &opts).expect("render forward");
        let (h, w) = (cam.height, cam.width);
        let mut data = vec![S::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data[(ch * h + y) * w + x] = out.image.at(y, x, ch);
                }
            }
        }
        let parents = [vars.positions, vars.scales, vars.rotations, vars.opacities, vars.sh];
        self.op(
            &parents,
            Tensor::new(vec![3, h, w], data),
            Box::new(move |_, g, store| {
                let mut d_image = Image::zeros(h, w, 3);
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..3 {
                            *d_image.at_mut(y, x, ch) = g.data[(ch * h + y) * w + x];
                        }
                    }
                }
                let grads =
                    render_backward(cloud.as_ref(), &cam, &cam_pose, &opts, &d_image).expect("render backward");
                let m = cloud.len();
                let mut d_pos = Vec::with_capacity(m * 3);
                let mut d_scale = Vec::with_capacity(m * 3);
                let mut d_rot = Vec::with_capacity(m * 4);
                for k in 0..m {
                    d_pos.extend_from_slice(&[grads.positions[k].x, grads.positions[k].y, grads.positions[k].z]);
                    d_scale.extend_from_slice(&[grads.scales[k].x, grads.scales[k].y, grads.scales[k].z]);
                    d_rot.extend_from_slice(&grads.rotations[k]);
                }
                store.accumulate(vars.positions.id, Tensor::new(vec![m, 3], d_pos));
                store.accumulate(vars.scales.id, Tensor::new(vec![m, 3], d_scale));
                store.accumulate(vars.rotations.id, Tensor::new(vec![m, 4], d_rot));
                store.accumulate(vars.opacities.id, Tensor::new(vec![m], grads.opacities));
                let sh_len = grads.sh.len();
                store.accumulate(vars.sh.id, Tensor::new(vec![m, sh_len / m.max(1)], grads.sh));
            }),
        )
    }

    /// Concatenate per-view attribute matrices along the primitive axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.value(xs[0]).shape[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            assert_eq!(t.shape.len(), 2);
            assert_eq!(t.shape[1], cols);
            rows += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let parents: Vec<Var> = xs.to_vec();
        let sizes: Vec<usize> = xs.iter().map(|v| self.value(*v).shape[0]).collect();
        let ids: Vec<VarId> = xs.iter().map(|v| v.id).collect();
        self.op(
            &parents,
            Tensor::new(vec![rows, cols], data),
            Box::new(move |_, g, store| {
                let mut offset = 0;
                for (&id, &n) in ids.iter().zip(&sizes) {
                    let chunk = Tensor::new(vec![n, cols], g.data[offset..offset + n * cols].to_vec());
                    store.accumulate(id, chunk);
                    offset += n * cols;
                }
            }),
        )
    }

    /// Flatten [M, 1] or [1,H,W] style tensors into [M].
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.len();
        let value = Tensor::new(vec![n], t.data.clone());
        let shape = t.shape.clone();
        let id = x.id;
        self.op(
            &[x],
            value,
            Box::new(move |_, g, store| {
                store.accumulate(id, Tensor::new(shape.clone(), g.data.clone()));
            }),
        )
    }
}

/// Materialize a [`GaussianCloud`] from tape variables.
pub fn cloud_from_vars<S: Real>(
    tape: &Tape<S>,
    vars: &CloudVars,
    sh_degree: usize,
    tags: &Arc<Vec<SourceTag>>,
) -> GaussianCloud<S> {
    let pos = tape.value(vars.positions);
    let scale = tape.value(vars.scales);
    let rot = tape.value(vars.rotations);
    let opa = tape.value(vars.opacities);
    let sh = tape.value(vars.sh);
    let m = pos.shape[0];
    assert_eq!(tags.len(), m, "one source tag per primitive");
    GaussianCloud {
        sh_degree,
        positions: (0..m)
            .map(|k| Vector3::new(pos.data[k * 3], pos.data[k * 3 + 1], pos.data[k * 3 + 2]))
            .collect(),
        scales: (0..m)
            .map(|k| Vector3::new(scale.data[k * 3], scale.data[k * 3 + 1], scale.data[k * 3 + 2]))
            .collect(),
        rotations: (0..m)
            .map(|k| [rot.data[k * 4], rot.data[k * 4 + 1], rot.data[k * 4 + 2], rot.data[k * 4 + 3]])
            .collect(),
        opacities: opa.data.clone(),
        sh: sh.data.clone(),
        tags: tags.as_ref().clone(),
    }
}

/// Left Hamilton multiplication matrix: `a ⊗ b = L(a) b`.
fn left_mul_matrix<S: Real>(a: [S; 4]) -> [[S; 4]; 4] {
    let (w, x, y, z) = (a[0], a[1], a[2], a[3]);
    [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
}

/// Right Hamilton multiplication matrix: `a ⊗ b = R(b) a`.
fn right_mul_matrix<S: Real>(b: [S; 4]) -> [[S; 4]; 4] {
    let (w, x, y, z) = (b[0], b[1], b[2], b[3]);
    [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
}
