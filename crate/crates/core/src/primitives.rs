//! Gaussian primitive construction: per-pixel localization by unprojection,
//! assembly with predicted parameter maps, and aggregation of per-view clouds
//! into a common vehicle frame.
//!
//! One pixel becomes exactly one primitive; nothing is pruned or duplicated
//! anywhere in the pipeline, so cloud sizes are always `views * H * W`.

use crate::geometry::{quaternion_from_rotation, quaternion_multiply, CameraModel, RigidTransform};
use crate::warp::DepthMap;
use crate::Real;
use nalgebra::Vector3;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrimitiveError {
    #[error("parameter maps cover {params} pixels but {positions} positions were given")]
    CountMismatch { positions: usize, params: usize },
    #[error("invalid parameter maps: {0}")]
    InvalidParams(String),
    #[error("cloud export/import: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed cloud header: {0}")]
    BadHeader(String),
}

/// Identifies which view a primitive came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceTag {
    pub camera: u32,
    pub timestep: i64,
}

/// Number of spherical-harmonic basis functions for degree `l`.
pub fn sh_basis_count(l: usize) -> usize {
    (l + 1) * (l + 1)
}

/// Per-pixel primitive parameter maps predicted by the Gaussian network.
/// Row-major pixel order; `sh` holds `3 * basis` coefficients per pixel,
/// color-major (r coefficients, then g, then b).
#[derive(Debug, Clone)]
pub struct GaussianParamMaps<S> {
    pub height: usize,
    pub width: usize,
    pub sh_degree: usize,
    pub scales: Vec<[S; 3]>,
    pub rotations: Vec<[S; 4]>,
    pub opacities: Vec<S>,
    pub sh: Vec<S>,
}

impl<S: Real> GaussianParamMaps<S> {
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self, max_scale: f64) -> Result<(), PrimitiveError> {
        let n = self.pixel_count();
        if self.scales.len() != n || self.rotations.len() != n || self.opacities.len() != n {
            return Err(PrimitiveError::InvalidParams("field length mismatch".into()));
        }
        let basis = sh_basis_count(self.sh_degree);
        if self.sh.len() != n * 3 * basis {
            return Err(PrimitiveError::InvalidParams("sh length mismatch".into()));
        }
        for (i, s) in self.scales.iter().enumerate() {
            for &v in s {
                let v = v.to_f64();
                if !(v > 0.0 && v <= max_scale + 1e-9) {
                    return Err(PrimitiveError::InvalidParams(format!(
                        "scale out of range at pixel {i}: {v}"
                    )));
                }
            }
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let norm: f64 = q.iter().map(|&c| c.to_f64() * c.to_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(PrimitiveError::InvalidParams(format!(
                    "non-unit quaternion at pixel {i}: |q| = {norm}"
                )));
            }
        }
        for (i, &a) in self.opacities.iter().enumerate() {
            let a = a.to_f64();
            if !(0.0..=1.0).contains(&a) {
                return Err(PrimitiveError::InvalidParams(format!(
                    "opacity out of range at pixel {i}: {a}"
                )));
            }
        }
        Ok(())
    }
}

/// A flat set of Gaussian primitives in a common (vehicle) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud<S> {
    pub sh_degree: usize,
    pub positions: Vec<Vector3<S>>,
    pub scales: Vec<Vector3<S>>,
    /// Unit quaternions (w, x, y, z).
    pub rotations: Vec<[S; 4]>,
    pub opacities: Vec<S>,
    /// `len * 3 * basis`, color-major per primitive.
    pub sh: Vec<S>,
    pub tags: Vec<SourceTag>,
}

impl<S: Real> GaussianCloud<S> {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            positions: Vec::new(),
            scales: Vec::new(),
            rotations: Vec::new(),
            opacities: Vec::new(),
            sh: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_basis(&self) -> usize {
        sh_basis_count(self.sh_degree)
    }

    /// SH coefficient for primitive `m`, color channel `c`, basis `b`.
    #[inline]
    pub fn sh_at(&self, m: usize, c: usize, b: usize) -> S {
        let basis = self.sh_basis();
        self.sh[(m * 3 + c) * basis + b]
    }

    /// First primitive index whose attributes are not finite, if any.
    pub fn find_non_finite(&self) -> Option<usize> {
        let basis = self.sh_basis();
        (0..self.len()).find(|&m| {
            let finite = self.positions[m].iter().all(|&v| v.to_f64().is_finite())
                && self.scales[m].iter().all(|&v| v.to_f64().is_finite())
                && self.rotations[m].iter().all(|&v| v.to_f64().is_finite())
                && self.opacities[m].to_f64().is_finite()
                && self.sh[m * 3 * basis..(m + 1) * 3 * basis]
                    .iter()
                    .all(|&v| v.to_f64().is_finite());
            !finite
        })
    }
}

/// Unproject every pixel of a depth map into the vehicle frame:
/// `position = E * (K^{-1} (u, v, 1) * depth)`.
pub fn localize<S: Real>(
    cam: &CameraModel<S>,
    cam_to_vehicle: &RigidTransform<S>,
    depth: &DepthMap<S>,
) -> Vec<Vector3<S>> {
    assert_eq!(depth.height, cam.height);
    assert_eq!(depth.width, cam.width);
    let mut out = Vec::with_capacity(depth.height * depth.width);
    for y in 0..depth.height {
        for x in 0..depth.width {
            let ray = cam.ray(S::lit(x as f64), S::lit(y as f64));
            out.push(cam_to_vehicle.apply(&(ray * depth.at(y, x))));
        }
    }
    out
}

/// Flatten localized positions and parameter maps into a cloud. Order is
/// row-major pixel order, deterministically.
pub fn assemble<S: Real>(
    positions: Vec<Vector3<S>>,
    params: &GaussianParamMaps<S>,
    tag: SourceTag,
) -> Result<GaussianCloud<S>, PrimitiveError> {
    if positions.len() != params.pixel_count() {
        return Err(PrimitiveError::CountMismatch {
            positions: positions.len(),
            params: params.pixel_count(),
        });
    }
    let n = positions.len();
    Ok(GaussianCloud {
        sh_degree: params.sh_degree,
        positions,
        scales: params.scales.iter().map(|s| Vector3::new(s[0], s[1], s[2])).collect(),
        rotations: params.rotations.clone(),
        opacities: params.opacities.clone(),
        sh: params.sh.clone(),
        tags: vec![tag; n],
    })
}

/// Rigidly transform per-view clouds into a shared target frame and
/// concatenate them in input order. Rotations compose with the pose
/// rotation; scales, opacities, and SH coefficients pass through.
pub fn aggregate<S: Real>(
    clouds: &[GaussianCloud<S>],
    frame_to_target_poses: &[RigidTransform<S>],
) -> GaussianCloud<S> {
    assert_eq!(clouds.len(), frame_to_target_poses.len(), "one pose per cloud");
    assert!(!clouds.is_empty());
    let sh_degree = clouds[0].sh_degree;
    let mut out = GaussianCloud::empty(sh_degree);
    for (cloud, pose) in clouds.iter().zip(frame_to_target_poses) {
        assert_eq!(cloud.sh_degree, sh_degree, "mixed SH degrees");
        let q_pose = quaternion_from_rotation(&pose.rotation);
        for m in 0..cloud.len() {
            out.positions.push(pose.apply(&cloud.positions[m]));
            out.rotations.push(quaternion_multiply(q_pose, cloud.rotations[m]));
        }
        out.scales.extend_from_slice(&cloud.scales);
        out.opacities.extend_from_slice(&cloud.opacities);
        out.sh.extend_from_slice(&cloud.sh);
        out.tags.extend_from_slice(&cloud.tags);
    }
    out
}

const CLOUD_MAGIC: &str = "gsplat-cloud 1";

/// Write the flat binary cloud format: a short text header followed by
/// little-endian f32 records `(pos 3, scale 3, rot 4, opacity 1, sh 3B)`.
pub fn write_cloud<S: Real, W: Write>(cloud: &GaussianCloud<S>, mut w: W) -> Result<(), PrimitiveError> {
    writeln!(w, "{CLOUD_MAGIC}")?;
    writeln!(w, "count {}", cloud.len())?;
    writeln!(w, "sh_degree {}", cloud.sh_degree)?;
    writeln!(w, "end_header")?;
    let basis = cloud.sh_basis();
    let mut record: Vec<f32> = Vec::with_capacity(11 + 3 * basis);
    for m in 0..cloud.len() {
        record.clear();
        record.extend(cloud.positions[m].iter().map(|&v| v.to_f64() as f32));
        record.extend(cloud.scales[m].iter().map(|&v| v.to_f64() as f32));
        record.extend(cloud.rotations[m].iter().map(|&v| v.to_f64() as f32));
        record.push(cloud.opacities[m].to_f64() as f32);
        record.extend(
            cloud.sh[m * 3 * basis..(m + 1) * 3 * basis]
                .iter()
                .map(|&v| v.to_f64() as f32),
        );
        for v in &record {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a cloud written by [`write_cloud`]. Source tags are not part of the
/// format; they are restored as camera 0 / timestep 0.
pub fn read_cloud<S: Real, R: BufRead>(mut r: R) -> Result<GaussianCloud<S>, PrimitiveError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != CLOUD_MAGIC {
        return Err(PrimitiveError::BadHeader(format!("bad magic {line:?}")));
    }
    let mut count = None;
    let mut sh_degree = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(PrimitiveError::BadHeader("unexpected EOF in header".into()));
        }
        let trimmed = line.trim();
        if trimmed == "end_header" {
            break;
        }
        if let Some(v) = trimmed.strip_prefix("count ") {
            count = Some(v.parse::<usize>().map_err(|e| PrimitiveError::BadHeader(e.to_string()))?);
        } else if let Some(v) = trimmed.strip_prefix("sh_degree ") {
            sh_degree = Some(v.parse::<usize>().map_err(|e| PrimitiveError::BadHeader(e.to_string()))?);
        } else {
            return Err(PrimitiveError::BadHeader(format!("unknown field {trimmed:?}")));
        }
    }
    let count = count.ok_or_else(|| PrimitiveError::BadHeader("missing count".into()))?;
    let sh_degree = sh_degree.ok_or_else(|| PrimitiveError::BadHeader("missing sh_degree".into()))?;
    let basis = sh_basis_count(sh_degree);
    let floats_per = 11 + 3 * basis;
    let mut bytes = vec![0u8; floats_per * 4];
    let mut cloud = GaussianCloud::empty(sh_degree);
    for _ in 0..count {
        r.read_exact(&mut bytes)?;
        let fs: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        cloud.positions.push(Vector3::new(
            S::lit(fs[0] as f64),
            S::lit(fs[1] as f64),
            S::lit(fs[2] as f64),
        ));
        cloud.scales.push(Vector3::new(
            S::lit(fs[3] as f64),
            S::lit(fs[4] as f64),
            S::lit(fs[5] as f64),
        ));
        cloud.rotations.push([
            S::lit(fs[6] as f64),
            S::lit(fs[7] as f64),
            S::lit(fs[8] as f64),
            S::lit(fs[9] as f64),
        ]);
        cloud.opacities.push(S::lit(fs[10] as f64));
        cloud.sh.extend(fs[11..].iter().map(|&v| S::lit(v as f64)));
        cloud.tags.push(SourceTag { camera: 0, timestep: 0 });
    }
    Ok(cloud)
}
