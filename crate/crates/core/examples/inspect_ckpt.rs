//! Inspect a checkpoint: pose predictions vs ground-truth ego motion and
//! depth statistics vs ground truth.

use rigsplat_core::dataio::{load_scene, Scene};
use rigsplat_core::trainer::resume_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let scene_dir = &args[2];
    let (state, config) = resume_checkpoint::<f32>(ckpt.as_ref()).unwrap();
    let scene: Scene<f32> = load_scene(scene_dir.as_ref()).unwrap();
    println!("checkpoint at step {}", state.step);
    let front = scene.rig.index_of(&config.front_camera).unwrap();
    let e_front = scene.rig.camera(front).cam_to_vehicle;

    for t in [2i64, 5, 9] {
        let a = scene.load_frame(t).unwrap();
        let b = scene.load_frame(t + 1).unwrap();
        let pred = state
            .networks
            .canonical_vehicle_motion(&a.images[front], &b.images[front], &e_front)
            .unwrap();
        let gt = scene.ego_motion(t, t + 1).unwrap();
        println!(
            "t {t}->{}: pred t = ({:+.3}, {:+.3}, {:+.3})  gt t = ({:+.3}, {:+.3}, {:+.3})",
            t + 1,
            pred.translation.x,
            pred.translation.y,
            pred.translation.z,
            gt.translation.x,
            gt.translation.y,
            gt.translation.z
        );
    }
    // Depth ratio stats on frame 5.
    let frame = scene.load_frame(5).unwrap();
    let gt = frame.depths.as_ref().unwrap();
    for cam in 0..scene.rig.len() {
        let (pred, _) = state.networks.depth_forward(&frame.images[cam]).unwrap();
        let mut ratios: Vec<f32> = pred
            .values
            .iter()
            .zip(&gt[cam].values)
            .map(|(p, g)| p / g)
            .collect();
        ratios.sort_by(f32::total_cmp);
        let (dmin, dmax) = pred.min_max();
        println!(
            "cam {cam}: depth [{dmin:.2}, {dmax:.2}] ratio median {:.3} p10 {:.3} p90 {:.3}",
            ratios[ratios.len() / 2],
            ratios[ratios.len() / 10],
            ratios[9 * ratios.len() / 10]
        );
    }
}
