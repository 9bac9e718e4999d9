//! Feed-forward inference: depth + Gaussian networks only. The caller
//! supplies vehicle motions (from the pose network on an adjacent pair, or
//! from recorded ego poses).

use super::TrainError;
use crate::dataio::FrameBundle;
use crate::geometry::{CameraRig, RigidTransform};
use crate::img::Image;
use crate::networks::Networks;
use crate::primitives::{aggregate, assemble, localize, GaussianCloud, SourceTag};
use crate::renderer::{render, RenderOptions};
use crate::Real;

/// Rendered surround views plus the cloud they came from.
pub struct InferOutput<S> {
    pub target_timestep: i64,
    pub images: Vec<Image<S>>,
    pub cloud: GaussianCloud<S>,
}

/// Predict one frame's per-pixel primitives in that frame's vehicle
/// coordinates: one cloud entry per pixel per camera, in rig order.
pub fn predict_view_cloud<S: Real>(
    nets: &Networks<S>,
    rig: &CameraRig<S>,
    frame: &FrameBundle<S>,
) -> Result<GaussianCloud<S>, TrainError> {
    let mut per_camera = Vec::with_capacity(rig.len());
    for (i, cam) in rig.cameras().iter().enumerate() {
        let (depth, features) = nets.depth_forward(&frame.images[i])?;
        let maps = nets.gaussian_forward(&depth, &features)?;
        let positions = localize(&cam.model, &cam.cam_to_vehicle, &depth);
        let cloud = assemble(
            positions,
            &maps,
            SourceTag { camera: i as u32, timestep: frame.timestep },
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        per_camera.push(cloud);
    }
    let poses = vec![RigidTransform::identity(); per_camera.len()];
    Ok(aggregate(&per_camera, &poses))
}

fn render_bundle<S: Real>(
    rig: &CameraRig<S>,
    cloud: &GaussianCloud<S>,
    opts: &RenderOptions<S>,
) -> Result<Vec<Image<S>>, TrainError> {
    let mut images = Vec::with_capacity(rig.len());
    for cam in rig.cameras() {
        let out = render(cloud, &cam.model, &cam.cam_to_vehicle, opts)?;
        images.push(out.image);
    }
    Ok(images)
}

/// Single-frame mode: build the cloud from frame t, move it by the vehicle
/// motion `t -> target`, and render every rig camera at the target frame.
pub fn infer_sf<S: Real>(
    nets: &Networks<S>,
    rig: &CameraRig<S>,
    frame_t: &FrameBundle<S>,
    motion_to_target: &RigidTransform<S>,
    target_timestep: i64,
    opts: &RenderOptions<S>,
) -> Result<InferOutput<S>, TrainError> {
    let cloud = predict_view_cloud(nets, rig, frame_t)?;
    let moved = aggregate(&[cloud], &[*motion_to_target]);
    let images = render_bundle(rig, &moved, opts)?;
    Ok(InferOutput { target_timestep, images, cloud: moved })
}

/// Multi-frame mode: union the clouds of two frames, each aligned into the
/// target frame's vehicle coordinates, and render the rig there.
#[allow(clippy::too_many_arguments)]
pub fn infer_mf<S: Real>(
    nets: &Networks<S>,
    rig: &CameraRig<S>,
    frame_a: &FrameBundle<S>,
    motion_a_to_target: &RigidTransform<S>,
    frame_b: &FrameBundle<S>,
    motion_b_to_target: &RigidTransform<S>,
    target_timestep: i64,
    opts: &RenderOptions<S>,
) -> Result<InferOutput<S>, TrainError> {
    let cloud_a = predict_view_cloud(nets, rig, frame_a)?;
    let cloud_b = predict_view_cloud(nets, rig, frame_b)?;
    let union = aggregate(&[cloud_a, cloud_b], &[*motion_a_to_target, *motion_b_to_target]);
    let images = render_bundle(rig, &union, opts)?;
    Ok(InferOutput { target_timestep, images, cloud: union })
}
