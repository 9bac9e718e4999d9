//! Diagnose cross-camera warp error composition on the default scene.

use rigsplat_core::dataio::{build_rig, build_world, render_view, vehicle_pose, GeneratorConfig};
use rigsplat_core::warp::{synthesize, DepthMap};

fn main() {
    let cfg = GeneratorConfig { timesteps: 3, ..Default::default() };
    let rig = build_rig(&cfg);
    let world = build_world(&cfg);
    let vehicle = vehicle_pose(&cfg, 1);
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for cam in rig.cameras() {
        let (img, d) = render_view(&world, &cam.model, &vehicle.compose(&cam.cam_to_vehicle));
        images.push(img);
        depths.push(DepthMap::new(96, 160, d));
    }
    for i in 0..rig.len() {
        let (_, right) = rig.neighbors(i);
        let cam_i = rig.camera(i);
        let cam_j = rig.camera(right);
        let rel = cam_j.cam_to_vehicle.inverse().compose(&cam_i.cam_to_vehicle);
        let result = synthesize(&cam_i.model, &cam_j.model, &rel, &depths[i], &images[right]);
        let (mut err, mut count) = (0.0, 0.0);
        let (mut err_smooth, mut count_smooth) = (0.0, 0.0);
        let mut big = 0usize;
        for y in 2..94 {
            for x in 2..158 {
                if !result.valid[y * 160 + x] {
                    continue;
                }
                let mut e = 0.0;
                for c in 0..3 {
                    e += (result.image.at(y, x, c) - images[i].at(y, x, c)).abs();
                }
                err += e;
                count += 3.0;
                if e / 3.0 > 0.1 {
                    big += 1;
                }
                // Depth-smooth pixels: no discontinuity within 2 px.
                let d0 = depths[i].at(y, x);
                let mut smooth = true;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let dn = depths[i].at((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                        if (dn - d0).abs() / d0 > 0.03 {
                            smooth = false;
                        }
                    }
                }
                if smooth {
                    err_smooth += e;
                    count_smooth += 3.0;
                }
            }
        }
        println!(
            "cam {i} <- {right}: mean {:.5}, smooth-only {:.5} ({:.0}% smooth), big-err px {}",
            err / count,
            err_smooth / count_smooth,
            100.0 * count_smooth / count,
            big
        );
        if i == 0 {
            // Dump error and validity maps for inspection.
            let mut img = image::RgbImage::new(160, 96);
            for y in 0..96 {
                for x in 0..160 {
                    let p = y * 160 + x;
                    let mut e = 0.0;
                    for c in 0..3 {
                        e += (result.image.at(y, x, c) - images[i].at(y, x, c)).abs();
                    }
                    let v = ((e / 3.0) * 2550.0).min(255.0) as u8;
                    let valid = if result.valid[p] { 60u8 } else { 0 };
                    img.put_pixel(x as u32, y as u32, image::Rgb([v, valid, (depths[i].at(y, x) as u8).min(255)]));
                }
            }
            img.save("/tmp/warp_err_cam0.png").unwrap();
        }
    }
}
