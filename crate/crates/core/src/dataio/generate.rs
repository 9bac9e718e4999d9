//! Procedural surround-view scene generator.
//!
//! Ray-casts a static Lambertian world (textured ground plane, scattered
//! boxes and spheres, an enclosing textured dome) from a ring of cameras on
//! a vehicle that drives a smooth trajectory. Emits images, exact per-pixel
//! depth along the camera z-axis, and exact ego poses. Everything is a pure
//! function of the seed, so identical configs produce identical scenes
//! byte for byte.

use super::{scene_paths, DataError, SceneManifest};
use crate::geometry::{CameraModel, CameraRig, RigCamera, RigidTransform};
use crate::img::Image;
use crate::parallel;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub cameras: usize,
    pub hfov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub timesteps: usize,
    /// Forward travel per frame (meters).
    pub step_length: f64,
    /// Amplitude of the sinusoidal lateral sway (meters).
    pub lateral_amplitude: f64,
    pub boxes: usize,
    pub spheres: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            hfov_deg: 70.0,
            width: 160,
            height: 96,
            timesteps: 12,
            step_length: 0.5,
            lateral_amplitude: 0.05,
            boxes: 6,
            spheres: 5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub warnings: Vec<String>,
}

/// Vehicle frame: x forward, y left, z up. Camera k looks along yaw
/// `k * 360 / N` degrees, mounted on a small ring at 1.6 m height.
pub fn build_rig(cfg: &GeneratorConfig) -> CameraRig<f64> {
    let model = CameraModel::from_hfov(cfg.hfov_deg, cfg.width, cfg.height);
    let cams = (0..cfg.cameras)
        .map(|k| {
            let yaw = k as f64 * std::f64::consts::TAU / cfg.cameras as f64;
            let (s, c) = yaw.sin_cos();
            // Columns: camera x (image right), y (image down), z (view dir)
            // expressed in the vehicle frame.
            let rotation = Matrix3::new(
                s, 0.0, c, //
                -c, 0.0, s, //
                0.0, -1.0, 0.0,
            );
            // Small mounting ring keeps the adjacent-camera baseline well
            // below scene depths, so angular overlap survives parallax.
            let translation = Vector3::new(0.15 * c, 0.15 * s, 1.6);
            RigCamera {
                name: format!("cam{k}"),
                model,
                cam_to_vehicle: RigidTransform::new(rotation, translation),
            }
        })
        .collect();
    CameraRig::ring(cams).expect("generator rig is a valid ring")
}

/// Vehicle-to-world pose at timestep `t`.
pub fn vehicle_pose(cfg: &GeneratorConfig, t: usize) -> RigidTransform<f64> {
    let x = cfg.step_length * t as f64;
    let y = cfg.lateral_amplitude * (0.9 * t as f64).sin();
    RigidTransform::from_translation(Vector3::new(x, y, 0.0))
}

#[derive(Debug, Clone)]
pub enum Shape {
    /// Ground plane z = 0.
    Ground,
    /// Solid sphere.
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Yaw-rotated box.
    Block { center: Vector3<f64>, half: Vector3<f64>, yaw: f64 },
    /// Enclosing dome: sphere hit from the inside.
    Dome { center: Vector3<f64>, radius: f64 },
}

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub shape: Shape,
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub tex_scale: f64,
    pub tex_seed: u64,
}

#[derive(Debug, Clone)]
pub struct World {
    pub objects: Vec<SceneObject>,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    object: usize,
}

/// Deterministic integer hash to [0, 1).
fn hash01(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ seed.wrapping_mul(0x165667B19E3779F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth two-octave value noise in [0, 1].
fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let mut total = 0.0;
    let mut amp = 0.78;
    let mut freq = 1.0;
    for octave in 0..2 {
        let (x, y) = (u * freq, v * freq);
        let (ix, iy) = (x.floor() as i64, y.floor() as i64);
        let (fx, fy) = (x - x.floor(), y - y.floor());
        // Smoothstep interpolation between lattice values.
        let sx = fx * fx * (3.0 - 2.0 * fx);
        let sy = fy * fy * (3.0 - 2.0 * fy);
        let s = seed.wrapping_add(octave * 7919);
        let v00 = hash01(ix, iy, s);
        let v01 = hash01(ix + 1, iy, s);
        let v10 = hash01(ix, iy + 1, s);
        let v11 = hash01(ix + 1, iy + 1, s);
        let val = v00 * (1.0 - sx) * (1.0 - sy)
            + v01 * sx * (1.0 - sy)
            + v10 * (1.0 - sx) * sy
            + v11 * sx * sy;
        total += amp * val;
        amp *= 0.22;
        freq *= 2.3;
    }
    total.clamp(0.0, 1.0)
}

impl SceneObject {
    /// Albedo at a world-space point. Texture coordinates are anchored to
    /// the world so the scene is static under vehicle motion.
    fn albedo(&self, p: &Vector3<f64>) -> [f64; 3] {
        let (u, v) = match &self.shape {
            Shape::Ground => (p.x, p.y),
            Shape::Sphere { center, radius } | Shape::Dome { center, radius } => {
                let d = (p - center) / *radius;
                (d.y.atan2(d.x) * 3.0, d.z.asin() * 3.0)
            }
            Shape::Block { center, yaw, .. } => {
                let d = p - center;
                let (s, c) = yaw.sin_cos();
                (c * d.x + s * d.y + d.z, -s * d.x + c * d.y + d.z * 0.5)
            }
        };
        let n = value_noise(u / self.tex_scale, v / self.tex_scale, self.tex_seed);
        // Mild checker modulation adds crisp photometric gradients.
        let checker = ((u / (2.0 * self.tex_scale)).floor() as i64
            + (v / (2.0 * self.tex_scale)).floor() as i64)
            .rem_euclid(2) as f64;
        let m = 0.95 + 0.1 * checker;
        let mut rgb = [0.0; 3];
        for c in 0..3 {
            rgb[c] = (self.base[c] + (self.accent[c] - self.base[c]) * n) * m;
        }
        rgb
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        const EPS: f64 = 1e-9;
        match &self.shape {
            Shape::Ground => {
                if dir.z.abs() < EPS {
                    return None;
                }
                let t = -origin.z / dir.z;
                (t > EPS).then_some((t, Vector3::new(0.0, 0.0, 1.0)))
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= EPS {
                    return None;
                }
                let n = (origin + dir * t - center) / *radius;
                Some((t, n))
            }
            Shape::Dome { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                // Inside the dome: take the far root, flip the normal inward.
                let t = -b + disc.sqrt();
                if t <= EPS {
                    return None;
                }
                let n = -(origin + dir * t - center) / *radius;
                Some((t, n))
            }
            Shape::Block { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let rot = |v: &Vector3<f64>| Vector3::new(c * v.x + s * v.y, -s * v.x + c * v.y, v.z);
                let o = rot(&(origin - center));
                let d = rot(dir);
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0usize;
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (mut lo, mut hi) = ((-half[a] - o[a]) * inv, (half[a] - o[a]) * inv);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo > t0 {
                        t0 = lo;
                        axis0 = a;
                    }
                    t1 = t1.min(hi);
                    if t0 > t1 {
                        return None;
                    }
                }
                if t0 <= EPS {
                    return None;
                }
                let p_local = o + d * t0;
                let mut n_local = Vector3::zeros();
                n_local[axis0] = p_local[axis0].signum();
                let n_world = Vector3::new(
                    c * n_local.x - s * n_local.y,
                    s * n_local.x + c * n_local.y,
                    n_local.z,
                );
                Some((t0, n_world))
            }
        }
    }
}

impl World {
    fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, obj) in self.objects.iter().enumerate() {
            if let Some((t, normal)) = obj.intersect(origin, dir) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, normal, object: i });
                }
            }
        }
        best
    }
}

/// Place the static world for a config. Objects straddle two corridors
/// beside the driving lane so every camera sees nearby structure.
pub fn build_world(cfg: &GeneratorConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut objects = Vec::new();
    let palette = |rng: &mut ChaCha8Rng| -> ([f64; 3], [f64; 3]) {
        let base: [f64; 3] = [
            rng.gen_range(0.15..0.75),
            rng.gen_range(0.15..0.75),
            rng.gen_range(0.15..0.75),
        ];
        let accent = [
            (base[0] + rng.gen_range(0.15..0.4)).min(0.95),
            (base[1] + rng.gen_range(0.15..0.4)).min(0.95),
            (base[2] + rng.gen_range(0.15..0.4)).min(0.95),
        ];
        (base, accent)
    };

    let (base, accent) = palette(&mut rng);
    objects.push(SceneObject {
        shape: Shape::Ground,
        base,
        accent,
        tex_scale: 2.8,
        tex_seed: rng.gen(),
    });

    let travel = cfg.step_length * cfg.timesteps as f64;
    let center = Vector3::new(travel / 2.0, 0.0, 0.0);
    let (base, accent) = palette(&mut rng);
    objects.push(SceneObject {
        shape: Shape::Dome { center, radius: 60.0 },
        base,
        accent,
        tex_scale: 9.0,
        tex_seed: rng.gen(),
    });

    for i in 0..cfg.boxes {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let half = Vector3::new(
            rng.gen_range(0.4..1.3),
            rng.gen_range(0.4..1.3),
            rng.gen_range(0.5..1.6),
        );
        let x = rng.gen_range(-8.0..travel + 12.0);
        let y = side * rng.gen_range(8.0..16.0);
        let (base, accent) = palette(&mut rng);
        objects.push(SceneObject {
            shape: Shape::Block {
                center: Vector3::new(x, y, half.z),
                half,
                yaw: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            base,
            accent,
            tex_scale: 0.55,
            tex_seed: rng.gen(),
        });
    }
    for i in 0..cfg.spheres {
        let side = if i % 2 == 0 { -1.0 } else { 1.0 };
        let radius = rng.gen_range(0.4..1.2);
        let x = rng.gen_range(-8.0..travel + 12.0);
        let y = side * rng.gen_range(9.0..18.0);
        let (base, accent) = palette(&mut rng);
        objects.push(SceneObject {
            shape: Shape::Sphere {
                center: Vector3::new(x, y, radius * rng.gen_range(0.6..1.4)),
                radius,
            },
            base,
            accent,
            tex_scale: 0.5,
            tex_seed: rng.gen(),
        });
    }
    World { objects }
}

const SUN: Vector3<f64> = Vector3::new(0.35, 0.2, 0.92);

/// Ray-cast one camera view. Returns the shaded image and per-pixel depth
/// along the camera z-axis.
pub fn render_view(
    world: &World,
    cam: &CameraModel<f64>,
    cam_to_world: &RigidTransform<f64>,
) -> (Image<f64>, Vec<f64>) {
    let (h, w) = (cam.height, cam.width);
    let sun = SUN / SUN.norm();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = parallel::map_indexed(h, |y| {
        let mut rgb = vec![0.0f64; w * 3];
        let mut depth = vec![0.0f64; w];
        for x in 0..w {
            let ray_cam = cam.ray(x as f64, y as f64);
            let ray_cam = ray_cam / ray_cam.norm();
            let dir = cam_to_world.rotation * ray_cam;
            let origin = cam_to_world.translation;
            if let Some(hit) = world.trace(&origin, &dir) {
                let p = origin + dir * hit.t;
                let albedo = world.objects[hit.object].albedo(&p);
                let shade = 0.45 + 0.55 * hit.normal.dot(&sun).max(0.0);
                for c in 0..3 {
                    rgb[x * 3 + c] = (albedo[c] * shade).clamp(0.0, 1.0);
                }
                depth[x] = hit.t * ray_cam.z;
            } else {
                // The dome encloses everything; a miss can only happen on
                // numerically grazing rays. Paint it sky-gray, far depth.
                rgb[x * 3] = 0.6;
                rgb[x * 3 + 1] = 0.65;
                rgb[x * 3 + 2] = 0.7;
                depth[x] = 75.0;
            }
        }
        (rgb, depth)
    });
    let mut image = Image::zeros(h, w, 3);
    let mut depth = vec![0.0f64; h * w];
    for (y, (rgb, d)) in rows.into_iter().enumerate() {
        image.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&rgb);
        depth[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    (image, depth)
}

/// Generate a scene directory: `rig.json`, `frames/<t>/<cam>.png`,
/// `gt_depth/<t>/<cam>.pfm`, `ego.json`.
pub fn generate_scene(cfg: &GeneratorConfig, out_dir: &Path) -> Result<GenerateReport, DataError> {
    let mut warnings = Vec::new();
    if cfg.boxes == 0 && cfg.spheres == 0 {
        warnings.push("no objects configured; scene is ground and dome only".to_string());
    }
    if cfg.step_length == 0.0 {
        warnings.push("zero step length; vehicle does not move".to_string());
    }
    if cfg.timesteps == 0 {
        return Err(DataError::Malformed {
            path: out_dir.to_path_buf(),
            reason: "timesteps must be positive".into(),
        });
    }
    let rig = build_rig(cfg);
    let world = build_world(cfg);
    let timesteps: Vec<i64> = (0..cfg.timesteps as i64).collect();

    std::fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let manifest = SceneManifest::from_rig(&rig, &timesteps);
    manifest.save(&scene_paths::manifest(out_dir))?;

    let mut ego = Vec::new();
    for (ti, &t) in timesteps.iter().enumerate() {
        let vehicle = vehicle_pose(cfg, ti);
        ego.push((t, vehicle));
        let frame_dir = scene_paths::frame_dir(out_dir, t);
        let depth_dir = scene_paths::depth_dir(out_dir, t);
        std::fs::create_dir_all(&frame_dir).map_err(|e| DataError::io(&frame_dir, e))?;
        std::fs::create_dir_all(&depth_dir).map_err(|e| DataError::io(&depth_dir, e))?;
        for cam in rig.cameras() {
            let cam_to_world = vehicle.compose(&cam.cam_to_vehicle);
            let (image, depth) = render_view(&world, &cam.model, &cam_to_world);
            let png_path = scene_paths::image(out_dir, t, &cam.name);
            image
                .to_rgb8()
                .save(&png_path)
                .map_err(|e| DataError::Malformed {
                    path: png_path.clone(),
                    reason: e.to_string(),
                })?;
            let depth32: Vec<f32> = depth.iter().map(|&d| d as f32).collect();
            super::pfm::write_pfm(
                &scene_paths::depth(out_dir, t, &cam.name),
                cam.model.height,
                cam.model.width,
                &depth32,
            )?;
        }
    }
    super::save_ego(&scene_paths::ego(out_dir), &ego)?;
    Ok(GenerateReport { warnings })
}
