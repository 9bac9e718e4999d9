//! Scene storage: a manifest-driven directory of PNG frames and PFM depth
//! rasters, plus the procedural generator that produces ground-truth scenes.
//!
//! Layout: `rig.json` (manifest), `frames/<t>/<camera>.png`,
//! `gt_depth/<t>/<camera>.pfm`, `ego.json` (optional vehicle poses).
//! Ingesting a real dataset means converting it into this layout: one PNG
//! per camera per timestep, intrinsics and cam-to-vehicle extrinsics in the
//! manifest, timestamps as integer timesteps.

mod generate;
mod pfm;

pub use generate::{
    build_rig, build_world, generate_scene, render_view, vehicle_pose, GenerateReport,
    GeneratorConfig, SceneObject, Shape, World,
};
pub use pfm::{read_pfm, write_pfm};

use crate::geometry::{CameraModel, CameraRig, RigCamera, RigidTransform};
use crate::img::Image;
use crate::warp::DepthMap;
use crate::Real;
use nalgebra::Matrix4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("missing file {path} (camera {camera}, timestep {timestep})")]
    MissingFrame { path: PathBuf, camera: String, timestep: i64 },
    #[error("rig: {0}")]
    Rig(#[from] crate::geometry::RigError),
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Canonical paths inside a scene directory.
pub mod scene_paths {
    use std::path::{Path, PathBuf};

    pub fn manifest(root: &Path) -> PathBuf {
        root.join("rig.json")
    }
    pub fn ego(root: &Path) -> PathBuf {
        root.join("ego.json")
    }
    pub fn frame_dir(root: &Path, t: i64) -> PathBuf {
        root.join("frames").join(t.to_string())
    }
    pub fn depth_dir(root: &Path, t: i64) -> PathBuf {
        root.join("gt_depth").join(t.to_string())
    }
    pub fn image(root: &Path, t: i64, camera: &str) -> PathBuf {
        frame_dir(root, t).join(format!("{camera}.png"))
    }
    pub fn depth(root: &Path, t: i64, camera: &str) -> PathBuf {
        depth_dir(root, t).join(format!("{camera}.pfm"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestCamera {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major 4x4 cam-to-vehicle transform.
    pub cam_to_vehicle: [[f64; 4]; 4],
    pub left: String,
    pub right: String,
}

/// The scene manifest stored as `rig.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneManifest {
    pub cameras: Vec<ManifestCamera>,
    pub timesteps: Vec<i64>,
}

impl SceneManifest {
    pub fn from_rig(rig: &CameraRig<f64>, timesteps: &[i64]) -> Self {
        let cameras = (0..rig.len())
            .map(|i| {
                let cam = rig.camera(i);
                let (l, r) = rig.neighbors(i);
                let h = cam.cam_to_vehicle.to_homogeneous();
                let mut m = [[0.0; 4]; 4];
                for row in 0..4 {
                    for col in 0..4 {
                        m[row][col] = h[(row, col)];
                    }
                }
                ManifestCamera {
                    name: cam.name.clone(),
                    fx: cam.model.fx,
                    fy: cam.model.fy,
                    cx: cam.model.cx,
                    cy: cam.model.cy,
                    width: cam.model.width,
                    height: cam.model.height,
                    cam_to_vehicle: m,
                    left: rig.camera(l).name.clone(),
                    right: rig.camera(r).name.clone(),
                }
            })
            .collect();
        Self { cameras, timesteps: timesteps.to_vec() }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Build the validated rig (checks ring symmetry and extrinsics).
    pub fn to_rig<S: Real>(&self) -> Result<CameraRig<S>, DataError> {
        let names: Vec<&str> = self.cameras.iter().map(|c| c.name.as_str()).collect();
        let index_of = |name: &str, path: &Path| -> Result<usize, DataError> {
            names.iter().position(|n| *n == name).ok_or_else(|| DataError::Malformed {
                path: path.to_path_buf(),
                reason: format!("unknown neighbor camera {name:?}"),
            })
        };
        let dummy = PathBuf::from("rig.json");
        let mut cams = Vec::new();
        let mut adjacency = Vec::new();
        for c in &self.cameras {
            let mut h = Matrix4::<S>::identity();
            for row in 0..4 {
                for col in 0..4 {
                    h[(row, col)] = S::lit(c.cam_to_vehicle[row][col]);
                }
            }
            cams.push(RigCamera {
                name: c.name.clone(),
                model: CameraModel::new(
                    S::lit(c.fx),
                    S::lit(c.fy),
                    S::lit(c.cx),
                    S::lit(c.cy),
                    c.width,
                    c.height,
                ),
                cam_to_vehicle: RigidTransform::from_homogeneous(&h),
            });
            adjacency.push((index_of(&c.left, &dummy)?, index_of(&c.right, &dummy)?));
        }
        Ok(CameraRig::new(cams, adjacency)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EgoRecord {
    timestep: i64,
    /// Row-major 4x4 vehicle-to-world pose.
    vehicle_to_world: [[f64; 4]; 4],
}

pub(crate) fn save_ego(path: &Path, poses: &[(i64, RigidTransform<f64>)]) -> Result<(), DataError> {
    let records: Vec<EgoRecord> = poses
        .iter()
        .map(|(t, pose)| {
            let h = pose.to_homogeneous();
            let mut m = [[0.0; 4]; 4];
            for row in 0..4 {
                for col in 0..4 {
                    m[row][col] = h[(row, col)];
                }
            }
            EgoRecord { timestep: *t, vehicle_to_world: m }
        })
        .collect();
    let json = serde_json::to_string_pretty(&records).expect("ego serializes");
    std::fs::write(path, json).map_err(|e| DataError::io(path, e))
}

fn load_ego<S: Real>(path: &Path) -> Result<BTreeMap<i64, RigidTransform<S>>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let records: Vec<EgoRecord> = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = BTreeMap::new();
    for r in records {
        let mut h = Matrix4::<S>::identity();
        for row in 0..4 {
            for col in 0..4 {
                h[(row, col)] = S::lit(r.vehicle_to_world[row][col]);
            }
        }
        out.insert(r.timestep, RigidTransform::from_homogeneous(&h));
    }
    Ok(out)
}

/// One timestep of surround-view images, cameras in rig order.
#[derive(Debug, Clone)]
pub struct FrameBundle<S> {
    pub timestep: i64,
    pub images: Vec<Image<S>>,
    /// Ground-truth depth rasters when the scene provides them.
    pub depths: Option<Vec<DepthMap<S>>>,
}

/// A loaded scene: validated manifest, rig, optional ego poses, lazy frames.
pub struct Scene<S> {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub rig: CameraRig<S>,
    pub ego: Option<BTreeMap<i64, RigidTransform<S>>>,
}

impl<S: Real> Scene<S> {
    pub fn timesteps(&self) -> &[i64] {
        &self.manifest.timesteps
    }

    pub fn has_depth(&self) -> bool {
        self.manifest
            .timesteps
            .first()
            .map(|&t| scene_paths::depth(&self.root, t, &self.rig.camera(0).name).exists())
            .unwrap_or(false)
    }

    /// Ego pose (vehicle-to-world) at `t`, if the scene carries poses.
    pub fn ego_pose(&self, t: i64) -> Option<RigidTransform<S>> {
        self.ego.as_ref().and_then(|m| m.get(&t).copied())
    }

    /// Vehicle motion from `t_from` to `t_to` (points move frame-to-frame):
    /// `W(t_to)^{-1} W(t_from)`.
    pub fn ego_motion(&self, t_from: i64, t_to: i64) -> Option<RigidTransform<S>> {
        let from = self.ego_pose(t_from)?;
        let to = self.ego_pose(t_to)?;
        Some(to.inverse().compose(&from))
    }

    pub fn load_frame(&self, t: i64) -> Result<FrameBundle<S>, DataError> {
        let mut images = Vec::with_capacity(self.rig.len());
        let mut depths = Vec::new();
        let want_depth = self.has_depth();
        for cam in self.rig.cameras() {
            let path = scene_paths::image(&self.root, t, &cam.name);
            let img = image::open(&path)
                .map_err(|_| DataError::MissingFrame {
                    path: path.clone(),
                    camera: cam.name.clone(),
                    timestep: t,
                })?
                .to_rgb8();
            let decoded = Image::from_rgb8(&img);
            if decoded.height != cam.model.height || decoded.width != cam.model.width {
                return Err(DataError::Malformed {
                    path,
                    reason: format!(
                        "resolution {}x{} does not match the rig's {}x{}",
                        decoded.height, decoded.width, cam.model.height, cam.model.width
                    ),
                });
            }
            images.push(decoded);
            if want_depth {
                let dpath = scene_paths::depth(&self.root, t, &cam.name);
                let (h, w, data) = read_pfm(&dpath)?;
                if h != cam.model.height || w != cam.model.width {
                    return Err(DataError::Malformed {
                        path: dpath,
                        reason: "depth raster resolution mismatch".into(),
                    });
                }
                depths.push(DepthMap::new(h, w, data.iter().map(|&v| S::lit(v as f64)).collect()));
            }
        }
        Ok(FrameBundle {
            timestep: t,
            images,
            depths: want_depth.then_some(depths),
        })
    }

    /// All frames in timestep order.
    pub fn frames(&self) -> impl Iterator<Item = Result<FrameBundle<S>, DataError>> + '_ {
        self.manifest.timesteps.iter().map(move |&t| self.load_frame(t))
    }
}

/// Load and validate a scene directory.
pub fn load_scene<S: Real>(root: &Path) -> Result<Scene<S>, DataError> {
    let manifest = SceneManifest::load(&scene_paths::manifest(root))?;
    let rig: CameraRig<S> = manifest.to_rig()?;
    // Every referenced image must exist up front.
    for &t in &manifest.timesteps {
        for cam in rig.cameras() {
            let path = scene_paths::image(root, t, &cam.name);
            if !path.exists() {
                return Err(DataError::MissingFrame {
                    path,
                    camera: cam.name.clone(),
                    timestep: t,
                });
            }
        }
    }
    let ego_path = scene_paths::ego(root);
    let ego = if ego_path.exists() {
        Some(load_ego(&ego_path)?)
    } else {
        None
    };
    Ok(Scene { root: root.to_path_buf(), manifest, rig, ego })
}

/// Training triplets `(t-1, t, t+1)` over interior timesteps, shuffled
/// deterministically per (seed, epoch). Fewer than three timesteps yields
/// an empty list.
pub fn make_training_samples(timesteps: &[i64], seed: u64, epoch: u64) -> Vec<(i64, i64, i64)> {
    if timesteps.len() < 3 {
        return Vec::new();
    }
    let mut sorted = timesteps.to_vec();
    sorted.sort_unstable();
    let mut triplets: Vec<(i64, i64, i64)> = sorted
        .windows(3)
        .map(|w| (w[0], w[1], w[2]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15));
    triplets.shuffle(&mut rng);
    triplets
}
