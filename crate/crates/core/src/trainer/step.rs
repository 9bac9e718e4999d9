//! One optimizer step: forward graph, loss assembly, backward, Adam update.

use super::{param_sets, TrainConfig, TrainError, TrainState};
use crate::autodiff::{image_to_chw, CloudVars, Tape, Tensor, Var};
use crate::dataio::FrameBundle;
use crate::geometry::CameraRig;
use crate::img::Image;
use crate::losses::{
    build_contexts, context_pose_chain, reprojection_loss_op, smoothness_loss_op, ContextKind,
};
use crate::primitives::SourceTag;
use crate::renderer::RenderOptions;
use crate::warp::PoseChain;
use crate::Real;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// One training sample: the center frame plus both neighbors.
pub struct SampleImages<'a, S> {
    pub prev: &'a FrameBundle<S>,
    pub center: &'a FrameBundle<S>,
    pub next: &'a FrameBundle<S>,
}

/// Which parts of the model a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Joint,
    /// Depth + pose on the localization loss only (two-stage, stage 1).
    LocalizationOnly,
    /// Gaussian network on the render loss only; depth/pose frozen.
    RenderOnly,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::LocalizationOnly => "loc",
            Stage::RenderOnly => "render",
        }
    }
}

/// Per-step loss components, one JSON record per line in the loss log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub stage: String,
    pub total: f64,
    pub loc: Option<f64>,
    pub temporal: Option<f64>,
    pub spatial: Option<f64>,
    pub spatial_temporal: Option<f64>,
    pub smoothness: Option<f64>,
    /// The render term `beta * MSE + gamma * perceptual`.
    pub render: Option<f64>,
}

pub(crate) struct SampleGraph<S: Real> {
    pub(crate) tape: Tape<S>,
    pub(crate) total: Var,
    /// Bound parameter vars per set (depth, pose, gaussian); `None` when a
    /// set was not bound at all this stage.
    pub(crate) param_vars: [Option<Vec<Var>>; 3],
    pub(crate) breakdown: LossBreakdown,
}

fn finite_or_err<S: Real>(tape: &Tape<S>, items: &[(&'static str, Var)], step: u64) -> Result<(), TrainError> {
    for (name, v) in items {
        if !tape.value(*v).is_finite() {
            return Err(TrainError::NonFinite { component: name.to_string(), step });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_sample_graph<S: Real>(
    state: &TrainState<S>,
    rig: &CameraRig<S>,
    sample: &SampleImages<'_, S>,
    config: &TrainConfig,
    stage: Stage,
    step: u64,
) -> Result<SampleGraph<S>, TrainError> {
    let nets = &state.networks;
    let mut tape = Tape::new();
    let train_depth_pose = stage != Stage::RenderOnly;
    let bound_depth = if train_depth_pose {
        nets.depth.bind(&mut tape)
    } else {
        nets.depth.bind_frozen(&mut tape)
    };
    let bound_pose = if train_depth_pose {
        nets.pose.bind(&mut tape)
    } else {
        nets.pose.bind_frozen(&mut tape)
    };
    let bound_gauss = (stage != Stage::LocalizationOnly).then(|| nets.gaussian.bind(&mut tape));
    let param_vars: [Option<Vec<Var>>; 3] = [
        train_depth_pose.then(|| bound_depth.vars().to_vec()),
        train_depth_pose.then(|| bound_pose.vars().to_vec()),
        bound_gauss.as_ref().map(|b| b.vars().to_vec()),
    ];

    let front = rig
        .index_of(&config.front_camera)
        .ok_or_else(|| TrainError::Config(format!("front camera {:?} not in rig", config.front_camera)))?;
    let n_cams = rig.len();
    let (h, w) = (sample.center.images[0].height, sample.center.images[0].width);

    // Source images as shared arrays for warping, plus CHW constants for
    // network input.
    let arc_images = |bundle: &FrameBundle<S>| -> Vec<Arc<Image<S>>> {
        bundle.images.iter().map(|img| Arc::new(img.clone())).collect()
    };
    let prev_arc = arc_images(sample.prev);
    let center_arc = arc_images(sample.center);
    let next_arc = arc_images(sample.next);
    let center_chw: Vec<Var> = sample
        .center
        .images
        .iter()
        .map(|img| tape.constant(image_to_chw(img)))
        .collect();

    // Front-camera motions t -> t-1 and t -> t+1.
    let pose_pair = |tape: &mut Tape<S>, other: &Image<S>| -> Var {
        let mut data = image_to_chw(&sample.center.images[front]).data;
        data.extend(image_to_chw(other).data);
        tape.constant(Tensor::new(vec![6, h, w], data))
    };
    let pair_prev = pose_pair(&mut tape, &sample.prev.images[front]);
    let pair_next = pose_pair(&mut tape, &sample.next.images[front]);
    let pose_prev = nets.pose_forward_op(&mut tape, &bound_pose, pair_prev)?;
    let pose_next = nets.pose_forward_op(&mut tape, &bound_pose, pair_next)?;
    let e_front = rig.camera(front).cam_to_vehicle;
    let pose_value = |tape: &Tape<S>, v: Var| -> crate::geometry::RigidTransform<S> {
        let p = tape.value(v);
        let motion = crate::geometry::RigidTransform::from_axis_angle(
            nalgebra::Vector3::new(p.data[0], p.data[1], p.data[2]),
            nalgebra::Vector3::new(p.data[3], p.data[4], p.data[5]),
        );
        e_front.compose(&motion).compose(&e_front.inverse())
    };

    let t_prev = sample.prev.timestep;
    let t_center = sample.center.timestep;
    let t_next = sample.next.timestep;

    // Depth per camera at the center frame.
    let mut depth_fwd = Vec::with_capacity(n_cams);
    for &img in &center_chw {
        depth_fwd.push(nets.depth_forward_op(&mut tape, &bound_depth, img)?);
    }

    // Localization loss over photometric contexts.
    let vehicle_motions = [pose_value(&tape, pose_prev), pose_value(&tape, pose_next)];
    let mut per_kind: [Vec<Var>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut smooth_terms = Vec::with_capacity(n_cams);
    for i in 0..n_cams {
        let contexts = build_contexts(rig, i, &[t_prev, t_next], &vehicle_motions, t_center);
        for ctx in &contexts {
            if !config.scale_aware && ctx.kind != ContextKind::Temporal {
                continue;
            }
            let (chain, pose_var) = match context_pose_chain(rig, front, i, ctx) {
                Some(chain) => {
                    let pv = if ctx.source_timestep == t_prev { pose_prev } else { pose_next };
                    (chain, Some(pv))
                }
                None => (
                    PoseChain { pre: ctx.relative_pose, post: crate::geometry::RigidTransform::identity() },
                    None,
                ),
            };
            let source = match (ctx.kind, ctx.source_timestep) {
                (ContextKind::Spatial, _) => center_arc[ctx.source_camera].clone(),
                (_, t) if t == t_prev => prev_arc[ctx.source_camera].clone(),
                _ => next_arc[ctx.source_camera].clone(),
            };
            let (synth, mask) = tape.synthesize_op(
                depth_fwd[i].depth,
                pose_var,
                chain,
                rig.camera(i).model,
                rig.camera(ctx.source_camera).model,
                source,
            );
            let loss = reprojection_loss_op(&mut tape, center_chw[i], synth, mask, config.weights.eta);
            per_kind[ctx.kind as usize].push(loss);
        }
        smooth_terms.push(smoothness_loss_op(&mut tape, depth_fwd[i].disparity, center_chw[i]));
    }
    let tm = tape.mean_of(&per_kind[ContextKind::Temporal as usize]);
    let sp = (!per_kind[ContextKind::Spatial as usize].is_empty())
        .then(|| tape.mean_of(&per_kind[ContextKind::Spatial as usize]));
    let sp_tm = (!per_kind[ContextKind::SpatialTemporal as usize].is_empty())
        .then(|| tape.mean_of(&per_kind[ContextKind::SpatialTemporal as usize]));
    let smooth = tape.mean_of(&smooth_terms);
    let mut loc_terms = vec![(tm, 1.0)];
    if let Some(sp) = sp {
        loc_terms.push((sp, config.weights.lambda_sp));
    }
    if let Some(sp_tm) = sp_tm {
        loc_terms.push((sp_tm, config.weights.lambda_sp_tm));
    }
    loc_terms.push((smooth, config.weights.lambda_smooth));
    let l_loc = tape.weighted_sum(&loc_terms);

    // Render loss: both adjacent frames as novel views of the frame-t cloud.
    let render = if let Some(bound_gauss) = &bound_gauss {
        let mut scale_mc = Vec::with_capacity(n_cams);
        let mut rot_mc = Vec::with_capacity(n_cams);
        let mut opa_flat = Vec::with_capacity(n_cams);
        let mut sh_mc = Vec::with_capacity(n_cams);
        for i in 0..n_cams {
            let features = if config.feature_share {
                depth_fwd[i].features.clone()
            } else {
                nets.gaussian_image_encoder_op(&mut tape, bound_gauss, center_chw[i])
            };
            if config.feature_share {
                // Pipeline provenance: the Gaussian network must consume the
                // exact stack the depth network emitted.
                debug_assert_eq!(
                    features.provenance_ids(),
                    depth_fwd[i].features.provenance_ids()
                );
            }
            let maps =
                nets.gaussian_forward_op(&mut tape, bound_gauss, depth_fwd[i].disparity_norm, &features)?;
            scale_mc.push(tape.chw_to_mc(maps.scale));
            rot_mc.push(tape.chw_to_mc(maps.rotation));
            let o = tape.chw_to_mc(maps.opacity);
            opa_flat.push(tape.flatten(o));
            sh_mc.push(tape.chw_to_mc(maps.sh));
        }
        let scales = tape.concat_rows(&scale_mc);
        let opacities = {
            // Flat [M] concat via rows of width 1.
            let as_rows: Vec<Var> = opa_flat
                .iter()
                .map(|&v| {
                    let n = tape.value(v).len();
                    tape.reshape(v, vec![n, 1])
                })
                .collect();
            let cat = tape.concat_rows(&as_rows);
            let n = tape.value(cat).len();
            tape.reshape(cat, vec![n])
        };
        let sh = tape.concat_rows(&sh_mc);
        let mut tags = Vec::with_capacity(n_cams * h * w);
        for i in 0..n_cams {
            tags.extend(std::iter::repeat_n(
                SourceTag { camera: i as u32, timestep: t_center },
                h * w,
            ));
        }
        let tags = Arc::new(tags);
        let chain_vehicle = PoseChain { pre: e_front, post: e_front.inverse() };
        let opts = RenderOptions::<S> { exact: config.render_exact, ..Default::default() };
        let mut mse_terms = Vec::new();
        for (bundle, pose_var) in [(sample.prev, pose_prev), (sample.next, pose_next)] {
            let mut pos_parts = Vec::with_capacity(n_cams);
            let mut rot_parts = Vec::with_capacity(n_cams);
            for i in 0..n_cams {
                pos_parts.push(tape.cloud_positions_op(
                    depth_fwd[i].depth,
                    Some(pose_var),
                    chain_vehicle,
                    rig.camera(i).model,
                    rig.camera(i).cam_to_vehicle,
                ));
                rot_parts.push(tape.rotate_quats_op(rot_mc[i], Some(pose_var), chain_vehicle));
            }
            let cloud = CloudVars {
                positions: tape.concat_rows(&pos_parts),
                scales,
                rotations: tape.concat_rows(&rot_parts),
                opacities,
                sh,
            };
            for j in 0..n_cams {
                let img = tape.render_op(
                    cloud,
                    nets.config.sh_degree,
                    tags.clone(),
                    rig.camera(j).model,
                    rig.camera(j).cam_to_vehicle,
                    opts,
                );
                let gt = tape.constant(image_to_chw(&bundle.images[j]));
                let diff = tape.sub(img, gt);
                let sq = tape.square(diff);
                mse_terms.push(tape.mean_all(sq));
            }
        }
        let mse = tape.mean_of(&mse_terms);
        Some(tape.mul_const(mse, config.weights.beta))
    } else {
        None
    };

    let (total, loc_opt, render_opt) = match stage {
        Stage::Joint => {
            let render = render.expect("joint stage renders");
            let total = tape.weighted_sum(&[(l_loc, 1.0), (render, config.weights.lambda_render)]);
            (total, Some(l_loc), Some(render))
        }
        Stage::LocalizationOnly => (l_loc, Some(l_loc), None),
        Stage::RenderOnly => {
            let render = render.expect("render stage renders");
            let total = tape.mul_const(render, config.weights.lambda_render);
            (total, None, Some(render))
        }
    };

    let mut components: Vec<(&'static str, Var)> = vec![("total", total), ("temporal", tm), ("smoothness", smooth)];
    if let Some(v) = loc_opt {
        components.push(("localization", v));
    }
    if let Some(v) = sp {
        components.push(("spatial", v));
    }
    if let Some(v) = sp_tm {
        components.push(("spatial-temporal", v));
    }
    if let Some(v) = render_opt {
        components.push(("render", v));
    }
    finite_or_err(&tape, &components, step)?;

    let value = |v: Var| tape.value(v).item().to_f64();
    let breakdown = LossBreakdown {
        step,
        stage: stage.label().to_string(),
        total: value(total),
        loc: loc_opt.map(value),
        temporal: Some(value(tm)),
        spatial: sp.map(value),
        spatial_temporal: sp_tm.map(value),
        smoothness: Some(value(smooth)),
        render: render_opt.map(value),
    };
    Ok(SampleGraph { tape, total, param_vars, breakdown })
}

/// Run one optimizer step over a batch of samples (losses and gradients are
/// averaged across the batch). Returns the averaged loss breakdown.
pub fn train_step<S: Real>(
    state: &mut TrainState<S>,
    rig: &CameraRig<S>,
    samples: &[SampleImages<'_, S>],
    config: &TrainConfig,
    stage: Stage,
) -> Result<LossBreakdown, TrainError> {
    assert!(!samples.is_empty());
    let step = state.step;
    let slot_count: usize = param_sets(&state.networks).iter().map(|(_, s)| s.len()).sum();
    let mut grad_acc: Vec<Option<Tensor<S>>> = (0..slot_count).map(|_| None).collect();
    let inv_batch = 1.0 / samples.len() as f64;
    let mut mean: Option<LossBreakdown> = None;

    for sample in samples {
        let graph = build_sample_graph(state, rig, sample, config, stage, step)?;
        let grads = graph.tape.backward(graph.total);
        // Walk the three sets in canonical order; slots align with
        // `param_sets` regardless of which sets were bound this stage.
        let mut slot = 0usize;
        for (set_idx, (prefix, set)) in param_sets(&state.networks).iter().enumerate() {
            if let Some(vars) = &graph.param_vars[set_idx] {
                debug_assert_eq!(vars.len(), set.len());
                for (local, &var) in vars.iter().enumerate() {
                    if let Some(g) = grads.get(var) {
                        if !g.is_finite() {
                            return Err(TrainError::NonFinite {
                                component: format!("gradient of {prefix}{}", set.names()[local]),
                                step,
                            });
                        }
                        let scaled = Tensor::new(
                            g.shape.clone(),
                            g.data.iter().map(|&v| v * S::lit(inv_batch)).collect(),
                        );
                        match &mut grad_acc[slot + local] {
                            Some(acc) => {
                                for (a, b) in acc.data.iter_mut().zip(&scaled.data) {
                                    *a += *b;
                                }
                            }
                            out @ None => *out = Some(scaled),
                        }
                    }
                }
            }
            slot += set.len();
        }
        mean = Some(match mean {
            None => scale_breakdown(&graph.breakdown, inv_batch),
            Some(acc) => add_breakdown(acc, &scale_breakdown(&graph.breakdown, inv_batch)),
        });
    }

    // Apply the update.
    let nets = &mut state.networks;
    let mut flat: Vec<&mut Tensor<S>> = Vec::with_capacity(slot_count);
    let (d, p, g) = (&mut nets.depth, &mut nets.pose, &mut nets.gaussian);
    for set in [d, p, g] {
        for i in 0..set.len() {
            // Safety: disjoint indices across disjoint sets.
            let t = set.tensor_mut(i) as *mut Tensor<S>;
            flat.push(unsafe { &mut *t });
        }
    }
    state.opt.step(&mut flat, &mut grad_acc, config.grad_clip);
    state.step += 1;
    let mut breakdown = mean.expect("non-empty batch");
    breakdown.step = step;
    state.loss_ema = Some(match state.loss_ema {
        None => breakdown.total,
        Some(ema) => 0.98 * ema + 0.02 * breakdown.total,
    });
    Ok(breakdown)
}

fn scale_breakdown(b: &LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        step: b.step,
        stage: b.stage.clone(),
        total: b.total * k,
        loc: b.loc.map(|v| v * k),
        temporal: b.temporal.map(|v| v * k),
        spatial: b.spatial.map(|v| v * k),
        spatial_temporal: b.spatial_temporal.map(|v| v * k),
        smoothness: b.smoothness.map(|v| v * k),
        render: b.render.map(|v| v * k),
    }
}

fn add_breakdown(mut a: LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    let add = |x: &mut Option<f64>, y: Option<f64>| {
        *x = match (*x, y) {
            (Some(p), Some(q)) => Some(p + q),
            (p, None) => p,
            (None, q) => q,
        }
    };
    a.total += b.total;
    add(&mut a.loc, b.loc);
    add(&mut a.temporal, b.temporal);
    add(&mut a.spatial, b.spatial);
    add(&mut a.spatial_temporal, b.spatial_temporal);
    add(&mut a.smoothness, b.smoothness);
    add(&mut a.render, b.render);
    a
}
