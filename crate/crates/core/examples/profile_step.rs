//! Rough timing of training-step components at full desk scale.

use rigsplat_core::autodiff::{image_to_chw, Tape};
use rigsplat_core::dataio::{build_rig, build_world, render_view, vehicle_pose, GeneratorConfig};
use rigsplat_core::img::Image;
use rigsplat_core::networks::{NetworkConfig, Networks};
use rigsplat_core::primitives::{assemble, localize, SourceTag};
use rigsplat_core::renderer::{render, render_backward, RenderOptions};
use rigsplat_core::warp::DepthMap;
use std::time::Instant;

fn main() {
    let cfg = GeneratorConfig::default();
    let rig = build_rig(&cfg);
    let world = build_world(&cfg);
    let vehicle = vehicle_pose(&cfg, 1);
    let mut images: Vec<Image<f32>> = Vec::new();
    let mut depths = Vec::new();
    for cam in rig.cameras() {
        let (img, d) = render_view(&world, &cam.model, &vehicle.compose(&cam.cam_to_vehicle));
        images.push(Image {
            height: img.height,
            width: img.width,
            channels: 3,
            data: img.data.iter().map(|&v| v as f32).collect(),
        });
        depths.push(DepthMap::new(96, 160, d.iter().map(|&v| v as f32).collect()));
    }
    let nets = Networks::<f32>::new(NetworkConfig::default(), 7);

    // Depth forward on the tape (with grads).
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let bound = nets.depth.bind(&mut tape);
    let img_var = tape.constant(image_to_chw(&images[0]));
    let dfwd = nets.depth_forward_op(&mut tape, &bound, img_var).unwrap();
    println!("depth fwd (1 cam): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let bound_g = nets.gaussian.bind(&mut tape);
    let maps = nets
        .gaussian_forward_op(&mut tape, &bound_g, dfwd.disparity_norm, &dfwd.features)
        .unwrap();
    println!("gaussian fwd (1 cam): {:?}", t0.elapsed());

    let t0 = Instant::now();
    let s = tape.mean_all(maps.sh);
    let d = tape.mean_all(dfwd.depth);
    let loss = tape.weighted_sum(&[(s, 1.0), (d, 1.0)]);
    let _grads = tape.backward(loss);
    println!("depth+gaussian bwd (1 cam): {:?}", t0.elapsed());

    // Cloud for renders: 6 cams.
    let rig32 = {
        let cams: Vec<rigsplat_core::geometry::RigCamera<f32>> = rig
            .cameras()
            .iter()
            .map(|c| rigsplat_core::geometry::RigCamera {
                name: c.name.clone(),
                model: rigsplat_core::geometry::CameraModel::new(
                    c.model.fx as f32,
                    c.model.fy as f32,
                    c.model.cx as f32,
                    c.model.cy as f32,
                    c.model.width,
                    c.model.height,
                ),
                cam_to_vehicle: rigsplat_core::geometry::RigidTransform {
                    rotation: c.cam_to_vehicle.rotation.map(|v| v as f32),
                    translation: c.cam_to_vehicle.translation.map(|v| v as f32),
                },
            })
            .collect();
        rigsplat_core::geometry::CameraRig::ring(cams).unwrap()
    };
    let t0 = Instant::now();
    let mut clouds = Vec::new();
    for (i, cam) in rig32.cameras().iter().enumerate() {
        let (depth, feats) = nets.depth_forward(&images[i]).unwrap();
        let maps = nets.gaussian_forward(&depth, &feats).unwrap();
        let pos = localize(&cam.model, &cam.cam_to_vehicle, &depth);
        clouds.push(assemble(pos, &maps, SourceTag { camera: i as u32, timestep: 0 }).unwrap());
    }
    let cloud = rigsplat_core::primitives::aggregate(
        &clouds,
        &vec![rigsplat_core::geometry::RigidTransform::identity(); 6],
    );
    println!("cloud build (6 cams, nets): {:?} ({} prims)", t0.elapsed(), cloud.len());

    let opts = RenderOptions::default();
    let t0 = Instant::now();
    let out = render(&cloud, &rig32.camera(0).model, &rig32.camera(0).cam_to_vehicle, &opts).unwrap();
    println!("render fwd: {:?} (mean hits {:.1})", t0.elapsed(), out.hit_counts.iter().map(|&h| h as f64).sum::<f64>() / out.hit_counts.len() as f64);

    let d_img = Image::zeros(96, 160, 3).map(|_| 1e-4f32);
    let t0 = Instant::now();
    let _g = render_backward(&cloud, &rig32.camera(0).model, &rig32.camera(0).cam_to_vehicle, &opts, &d_img).unwrap();
    println!("render bwd: {:?}", t0.elapsed());
}
