//! The three learned function blocks: a depth network, a pose network
//! (training only), and a Gaussian parameter network.
//!
//! All are plain convolutional stacks on the autodiff tape. The depth
//! network parameterizes depth as a sigmoid disparity mapped into
//! `[1/d_max, 1/d_min]`, so its range holds by construction. The Gaussian
//! network fuses the depth map with the depth network's image features
//! (shared feature stack) and emits per-pixel scale, rotation, opacity and
//! SH coefficient maps through two-conv heads.

mod blocks;
mod params;

pub use blocks::level_channels;
pub use params::{load_into, read_archive, write_archive, BoundParams, ParamSet, StoreError};

use crate::autodiff::{image_to_chw, Tape, Tensor, Var};
use crate::geometry::RigidTransform;
use crate::img::Image;
use crate::primitives::{sh_basis_count, GaussianParamMaps};
use crate::warp::DepthMap;
use crate::Real;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("non-finite activations in {stage}")]
    NonFinite { stage: &'static str },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("feature stack provenance mismatch (expected {expected}, got {got})")]
    Provenance { expected: u64, got: u64 },
}

/// Architecture and output-range configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub blocks_per_stage: usize,
    /// Encoder levels; features live at strides 2, 4, ..., 2^levels.
    pub levels: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub sh_degree: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    /// When false, the Gaussian network uses its own image encoder instead
    /// of the depth network's features (ablation).
    pub feature_share: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            blocks_per_stage: 1,
            levels: 5,
            d_min: 0.5,
            d_max: 80.0,
            sh_degree: 1,
            min_scale: 1e-4,
            max_scale: 2.0,
            feature_share: true,
        }
    }
}

impl NetworkConfig {
    /// A small configuration for fast tests.
    pub fn tiny() -> Self {
        Self { base_width: 4, levels: 4, ..Default::default() }
    }

    pub fn stride(&self) -> usize {
        1 << self.levels
    }

    pub fn sh_channels(&self) -> usize {
        3 * sh_basis_count(self.sh_degree)
    }

    /// Total Gaussian head output channels: scale 3 + rotation 4 +
    /// opacity 1 + SH.
    pub fn head_channels(&self) -> usize {
        3 + 4 + 1 + self.sh_channels()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<(), NetworkError> {
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(NetworkError::BadInput(format!(
                "image {h}x{w} not divisible by the encoder stride {s}"
            )));
        }
        Ok(())
    }
}

/// Per-level image features (values), with a provenance token tying them to
/// the depth forward pass that produced them.
#[derive(Debug, Clone)]
pub struct FeatureStack<S> {
    pub levels: Vec<Tensor<S>>,
    pub provenance: u64,
}

impl<S: Real> FeatureStack<S> {
    pub fn strides(&self) -> Vec<usize> {
        (1..=self.levels.len()).map(|l| 1 << l).collect()
    }
}

/// Tape handles for a feature stack.
#[derive(Debug, Clone)]
pub struct FeatureStackVars {
    pub levels: Vec<Var>,
}

impl FeatureStackVars {
    /// Identity of the producing vars; the trainer asserts the Gaussian
    /// network consumes exactly the depth network's stack.
    pub fn provenance_ids(&self) -> Vec<usize> {
        self.levels.iter().map(|v| v.id).collect()
    }
}

/// 6-DoF motion as predicted by the pose network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams<S> {
    pub axis_angle: Vector3<S>,
    pub translation: Vector3<S>,
}

impl<S: Real> PoseParams<S> {
    pub fn from_vec6(v: &[S]) -> Self {
        Self {
            axis_angle: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vec6(&self) -> [S; 6] {
        [
            self.axis_angle.x,
            self.axis_angle.y,
            self.axis_angle.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn to_transform(&self) -> RigidTransform<S> {
        RigidTransform::from_axis_angle(self.axis_angle, self.translation)
    }

    pub fn rotation_angle(&self) -> f64 {
        self.axis_angle.norm().to_f64()
    }
}

/// Outputs of a depth forward pass on the tape.
pub struct DepthForwardVars {
    /// Depth map [1,H,W] in meters, bounded to [d_min, d_max].
    pub depth: Var,
    /// Metric disparity 1/depth [1,H,W].
    pub disparity: Var,
    /// Normalized disparity in (0,1), the Gaussian depth-encoder input.
    pub disparity_norm: Var,
    pub features: FeatureStackVars,
}

/// Gaussian parameter maps on the tape.
pub struct GaussianMapVars {
    /// [3,H,W], positive, clamped to the configured range.
    pub scale: Var,
    /// [4,H,W] unit quaternions.
    pub rotation: Var,
    /// [1,H,W] in (0,1).
    pub opacity: Var,
    /// [3*(L+1)^2, H, W].
    pub sh: Var,
}

/// The three parameter sets plus their shared configuration.
#[derive(Debug, Clone)]
pub struct Networks<S> {
    pub config: NetworkConfig,
    pub depth: ParamSet<S>,
    pub pose: ParamSet<S>,
    pub gaussian: ParamSet<S>,
}

fn skip_channels(cfg: &NetworkConfig) -> Vec<usize> {
    (1..=cfg.levels).map(|l| level_channels(cfg.base_width, l)).collect()
}

impl<S: Real> Networks<S> {
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_width;
        let levels = config.levels;
        let top = level_channels(c, levels);
        let enc_skips = skip_channels(&config);

        let mut depth = ParamSet::new();
        blocks::register_encoder(&mut depth, &mut rng, "enc", 3, c, levels, config.blocks_per_stage);
        blocks::register_decoder(&mut depth, &mut rng, "dec", c, levels, top, &enc_skips);
        // Disparity head bias targets a mid-scene initial depth (about a
        // fifth of d_max) rather than the degenerate near plane.
        let init_depth = (config.d_max / 5.0).max(config.d_min * 2.0);
        let lo = 1.0 / config.d_max;
        let hi = 1.0 / config.d_min;
        let s0 = ((1.0 / init_depth - lo) / (hi - lo)).clamp(1e-4, 1.0 - 1e-4);
        let bias = (s0 / (1.0 - s0)).ln();
        depth.register("disp.w", params::conv_init(&mut rng, vec![1, c, 3, 3]));
        depth.register("disp.b", Tensor::new(vec![1], vec![S::lit(bias)]));

        let mut pose = ParamSet::new();
        blocks::register_encoder(&mut pose, &mut rng, "enc", 6, c, levels, config.blocks_per_stage);
        // Small final-layer init: the untrained network predicts
        // near-identity motion without a permanent output scale that the
        // optimizer would have to fight.
        blocks::register_head(&mut pose, &mut rng, "head", top, top, 6, None, 0.01);

        let mut gaussian = ParamSet::new();
        blocks::register_encoder(&mut gaussian, &mut rng, "enc", 1, c, levels, config.blocks_per_stage);
        if !config.feature_share {
            // Ablation: an independent image encoder of identical shape.
            blocks::register_encoder(&mut gaussian, &mut rng, "imgenc", 3, c, levels, config.blocks_per_stage);
        }
        // Fused decoder sees depth-encoder + image-feature channels.
        let fused: Vec<usize> = enc_skips.iter().map(|&ch| 2 * ch).collect();
        blocks::register_decoder(&mut gaussian, &mut rng, "dec", c, levels, 2 * top, &fused);
        let head_hidden = (c / 2).max(4);
        blocks::register_head(&mut gaussian, &mut rng, "head.scale", c, head_hidden, 3, Some(&[-2.0, -2.0, -2.0]), 1.0);
        blocks::register_head(&mut gaussian, &mut rng, "head.rot", c, head_hidden, 4, None, 1.0);
        // Low initial opacity: early render gradients stay gentle while
        // depth and colors are still settling.
        blocks::register_head(&mut gaussian, &mut rng, "head.opacity", c, head_hidden, 1, Some(&[-2.0]), 1.0);
        let sh_ch = config.sh_channels();
        blocks::register_head(&mut gaussian, &mut rng, "head.sh", c, head_hidden, sh_ch, Some(&vec![0.0; sh_ch]), 1.0);

        Self { config, depth, pose, gaussian }
    }

    // ---- tape-level forwards ----

    /// Depth network forward. `image` is a [3,H,W] tensor on the tape.
    pub fn depth_forward_op(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        image: Var,
    ) -> Result<DepthForwardVars, NetworkError> {
        let (c, h, w) = tape.value(image).chw();
        if c != 3 {
            return Err(NetworkError::BadInput(format!("expected 3 channels, got {c}")));
        }
        self.config.check_input(h, w)?;
        let cfg = &self.config;
        let feats = blocks::encoder_forward(tape, bound, "enc", image, cfg.levels, cfg.blocks_per_stage);
        let skips: Vec<Vec<Var>> = feats.iter().map(|&f| vec![f]).collect();
        let top = feats[cfg.levels - 1];
        let trunk = blocks::decoder_forward(tape, bound, "dec", &skips, cfg.levels, top);
        let w_disp = bound.get("disp.w");
        let b_disp = bound.get("disp.b");
        let raw = tape.conv2d(trunk, w_disp, b_disp, 1, 1);
        let disparity_norm = tape.sigmoid(raw);
        // disparity = 1/d_max + s * (1/d_min - 1/d_max); depth = 1/disparity.
        let lo = 1.0 / cfg.d_max;
        let hi = 1.0 / cfg.d_min;
        let scaled = tape.mul_const(disparity_norm, hi - lo);
        let disparity = tape.add_const(scaled, lo);
        let depth = tape.recip(disparity);
        if !tape.value(depth).is_finite() {
            return Err(NetworkError::NonFinite { stage: "depth network" });
        }
        Ok(DepthForwardVars {
            depth,
            disparity,
            disparity_norm,
            features: FeatureStackVars { levels: feats },
        })
    }

    /// Pose network forward on a concatenated image pair [6,H,W].
    /// Output motions are scaled by 0.01 so an untrained network predicts
    /// near-identity motion.
    pub fn pose_forward_op(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        pair: Var,
    ) -> Result<Var, NetworkError> {
        let (c, h, w) = tape.value(pair).chw();
        if c != 6 {
            return Err(NetworkError::BadInput(format!("expected 6 channels, got {c}")));
        }
        self.config.check_input(h, w)?;
        let cfg = &self.config;
        let feats = blocks::encoder_forward(tape, bound, "enc", pair, cfg.levels, cfg.blocks_per_stage);
        let head = blocks::head_forward(tape, bound, "head", feats[cfg.levels - 1]);
        let out = tape.global_mean(head);
        if !tape.value(out).is_finite() {
            return Err(NetworkError::NonFinite { stage: "pose network" });
        }
        Ok(out)
    }

    /// Gaussian network forward: depth encoder on the normalized disparity,
    /// fusion decoder over concatenated (depth, image) features, four heads.
    pub fn gaussian_forward_op(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        disparity_norm: Var,
        image_features: &FeatureStackVars,
    ) -> Result<GaussianMapVars, NetworkError> {
        let cfg = &self.config;
        if image_features.levels.len() != cfg.levels {
            return Err(NetworkError::BadInput(format!(
                "feature stack has {} levels, expected {}",
                image_features.levels.len(),
                cfg.levels
            )));
        }
        let (c, h, w) = tape.value(disparity_norm).chw();
        if c != 1 {
            return Err(NetworkError::BadInput("disparity input must be 1-channel".into()));
        }
        self.config.check_input(h, w)?;
        // Per-level spatial shapes must line up with the image features.
        for (l, &f) in image_features.levels.iter().enumerate() {
            let (_, fh, fw) = tape.value(f).chw();
            if fh != h >> (l + 1) || fw != w >> (l + 1) {
                return Err(NetworkError::BadInput(format!(
                    "feature level {l} is {fh}x{fw}, expected {}x{}",
                    h >> (l + 1),
                    w >> (l + 1)
                )));
            }
        }
        let depth_feats =
            blocks::encoder_forward(tape, bound, "enc", disparity_norm, cfg.levels, cfg.blocks_per_stage);
        let skips: Vec<Vec<Var>> = depth_feats
            .iter()
            .zip(&image_features.levels)
            .map(|(&d, &i)| vec![d, i])
            .collect();
        let top = tape.concat_c(&[depth_feats[cfg.levels - 1], image_features.levels[cfg.levels - 1]]);
        let trunk = blocks::decoder_forward(tape, bound, "dec", &skips, cfg.levels, top);

        let scale_raw = blocks::head_forward(tape, bound, "head.scale", trunk);
        let scale_sp = tape.softplus(scale_raw);
        let scale = tape.clamp(scale_sp, cfg.min_scale, cfg.max_scale);

        let rot_raw = blocks::head_forward(tape, bound, "head.rot", trunk);
        // Offset from the identity quaternion keeps outputs away from the
        // un-normalizable zero vector.
        let identity_offset = {
            let mut t = Tensor::zeros(vec![4, h, w]);
            for v in t.data.iter_mut().take(h * w) {
                *v = S::one();
            }
            tape.constant(t)
        };
        let rot_off = tape.add(rot_raw, identity_offset);
        let rotation = tape.normalize_pixels(rot_off);

        let opa_raw = blocks::head_forward(tape, bound, "head.opacity", trunk);
        let opacity = tape.sigmoid(opa_raw);

        let sh = blocks::head_forward(tape, bound, "head.sh", trunk);
        for (var, stage) in [(scale, "scale head"), (rotation, "rotation head"), (opacity, "opacity head"), (sh, "sh head")] {
            if !tape.value(var).is_finite() {
                return Err(NetworkError::NonFinite { stage });
            }
        }
        Ok(GaussianMapVars { scale, rotation, opacity, sh })
    }

    /// The ablation image encoder (`feature_share = false`): produces an
    /// independent feature stack of identical shape from the raw image.
    pub fn gaussian_image_encoder_op(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        image: Var,
    ) -> FeatureStackVars {
        assert!(
            !self.config.feature_share,
            "independent encoder only exists when feature sharing is off"
        );
        let feats = blocks::encoder_forward(
            tape,
            bound,
            "imgenc",
            image,
            self.config.levels,
            self.config.blocks_per_stage,
        );
        FeatureStackVars { levels: feats }
    }

    // ---- plain-value wrappers ----

    /// Run the depth network on an image. Deterministic: identical inputs
    /// produce bitwise-identical outputs.
    pub fn depth_forward(&self, image: &Image<S>) -> Result<(DepthMap<S>, FeatureStack<S>), NetworkError> {
        let mut tape = Tape::new();
        let bound = self.depth.bind_frozen(&mut tape);
        let img = tape.constant(image_to_chw(image));
        let out = self.depth_forward_op(&mut tape, &bound, img)?;
        let depth_t = tape.value(out.depth);
        let (_, h, w) = depth_t.chw();
        let depth = DepthMap::new(h, w, depth_t.data.clone());
        let levels = out
            .features
            .levels
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect();
        Ok((depth, FeatureStack { levels, provenance: next_provenance() }))
    }

    /// Run the pose network on an image pair.
    pub fn pose_forward(&self, image_t: &Image<S>, image_other: &Image<S>) -> Result<PoseParams<S>, NetworkError> {
        if !image_t.same_shape(image_other) {
            return Err(NetworkError::BadInput("pose pair shape mismatch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.pose.bind_frozen(&mut tape);
        let a = image_to_chw(image_t);
        let b = image_to_chw(image_other);
        let mut data = a.data;
        data.extend(b.data);
        let (_, h, w) = (3, image_t.height, image_t.width);
        let pair = tape.constant(Tensor::new(vec![6, h, w], data));
        let out = self.pose_forward_op(&mut tape, &bound, pair)?;
        Ok(PoseParams::from_vec6(&tape.value(out).data))
    }

    /// Run the Gaussian network on a predicted depth map plus the feature
    /// stack from the depth forward pass.
    pub fn gaussian_forward(
        &self,
        depth: &DepthMap<S>,
        features: &FeatureStack<S>,
    ) -> Result<GaussianParamMaps<S>, NetworkError> {
        let mut tape = Tape::new();
        let bound = self.gaussian.bind_frozen(&mut tape);
        let disparity_norm = self.normalized_disparity(depth);
        let d = tape.constant(Tensor::new(vec![1, depth.height, depth.width], disparity_norm));
        let levels = features.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let fv = FeatureStackVars { levels };
        let maps = self.gaussian_forward_op(&mut tape, &bound, d, &fv)?;
        Ok(self.maps_from_tape(&tape, &maps))
    }

    /// Single vehicle motion from the front-camera pair:
    /// `T_vehicle = E_front * T_front_cam * E_front^{-1}`.
    pub fn canonical_vehicle_motion(
        &self,
        front_t: &Image<S>,
        front_other: &Image<S>,
        front_cam_to_vehicle: &RigidTransform<S>,
    ) -> Result<RigidTransform<S>, NetworkError> {
        let pose = self.pose_forward(front_t, front_other)?;
        let t_cam = pose.to_transform();
        Ok(front_cam_to_vehicle
            .compose(&t_cam)
            .compose(&front_cam_to_vehicle.inverse()))
    }

    /// Invert the depth parameterization back to the (0,1) sigmoid output.
    pub fn normalized_disparity(&self, depth: &DepthMap<S>) -> Vec<S> {
        let lo = 1.0 / self.config.d_max;
        let hi = 1.0 / self.config.d_min;
        depth
            .values
            .iter()
            .map(|&d| (S::one() / d - S::lit(lo)) / S::lit(hi - lo))
            .collect()
    }

    /// Materialize tape parameter maps into plain values.
    pub fn maps_from_tape(&self, tape: &Tape<S>, maps: &GaussianMapVars) -> GaussianParamMaps<S> {
        let scale = tape.value(maps.scale);
        let rot = tape.value(maps.rotation);
        let opa = tape.value(maps.opacity);
        let sh = tape.value(maps.sh);
        let (_, h, w) = scale.chw();
        let n = h * w;
        let sh_ch = self.config.sh_channels();
        let mut sh_out = vec![S::zero(); n * sh_ch];
        for i in 0..n {
            for c in 0..sh_ch {
                sh_out[i * sh_ch + c] = sh.data[c * n + i];
            }
        }
        GaussianParamMaps {
            height: h,
            width: w,
            sh_degree: self.config.sh_degree,
            scales: (0..n)
                .map(|i| [scale.data[i], scale.data[n + i], scale.data[2 * n + i]])
                .collect(),
            rotations: (0..n)
                .map(|i| [rot.data[i], rot.data[n + i], rot.data[2 * n + i], rot.data[3 * n + i]])
                .collect(),
            opacities: opa.data.clone(),
            sh: sh_out,
        }
    }
}

fn next_provenance() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut StdRng, h: usize, w: usize) -> Image<f32> {
        Image::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn tiny_nets(seed: u64) -> Networks<f32> {
        Networks::new(NetworkConfig::tiny(), seed)
    }

    #[test]
    fn depth_output_respects_configured_bounds() {
        let mut rng = StdRng::seed_from_u64(1);
        for seed in 0..3 {
            let nets = tiny_nets(seed);
            let img = random_image(&mut rng, 32, 48);
            let (depth, feats) = nets.depth_forward(&img).unwrap();
            let (lo, hi) = depth.min_max();
            assert!(lo >= nets.config.d_min as f32 - 1e-4);
            assert!(hi <= nets.config.d_max as f32 + 1e-3);
            assert_eq!(depth.height, 32);
            assert_eq!(depth.width, 48);
            // Feature stack: strides 2..16, halving sizes.
            assert_eq!(feats.levels.len(), 4);
            for (l, t) in feats.levels.iter().enumerate() {
                let (_, fh, fw) = t.chw();
                assert_eq!(fh, 32 >> (l + 1));
                assert_eq!(fw, 48 >> (l + 1));
            }
        }
    }

    #[test]
    fn depth_forward_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(2);
        let nets = tiny_nets(7);
        let img = random_image(&mut rng, 32, 32);
        let (d1, f1) = nets.depth_forward(&img).unwrap();
        let (d2, f2) = nets.depth_forward(&img).unwrap();
        assert_eq!(d1.values, d2.values);
        for (a, b) in f1.levels.iter().zip(&f2.levels) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn depth_rejects_indivisible_input() {
        let mut rng = StdRng::seed_from_u64(3);
        let nets = tiny_nets(0);
        let img = random_image(&mut rng, 30, 48);
        assert!(matches!(
            nets.depth_forward(&img),
            Err(NetworkError::BadInput(_))
        ));
    }

    #[test]
    fn untrained_pose_is_near_identity() {
        let mut rng = StdRng::seed_from_u64(4);
        for seed in 0..5 {
            let nets = tiny_nets(seed * 31 + 1);
            let a = random_image(&mut rng, 32, 48);
            let b = random_image(&mut rng, 32, 48);
            let pose = nets.pose_forward(&a, &b).unwrap();
            assert!(pose.rotation_angle() < 0.1, "angle {}", pose.rotation_angle());
            assert!(pose.translation.norm() < 0.5, "|t| = {}", pose.translation.norm());
            pose.to_transform().validate().unwrap();
        }
    }

    #[test]
    fn gaussian_maps_satisfy_invariants_for_random_parameters() {
        let mut rng = StdRng::seed_from_u64(5);
        for seed in 0..3 {
            let nets = tiny_nets(seed * 17 + 3);
            let img = random_image(&mut rng, 32, 32);
            let (depth, feats) = nets.depth_forward(&img).unwrap();
            let maps = nets.gaussian_forward(&depth, &feats).unwrap();
            maps.validate(nets.config.max_scale).unwrap();
        }
    }

    #[test]
    fn head_channel_count_matches_parameter_layout() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.head_channels(), 20);
        let nets = Networks::<f32>::new(cfg, 0);
        let total_out: usize = ["scale", "rot", "opacity", "sh"]
            .iter()
            .map(|h| nets.gaussian.by_name(&format!("head.{h}.conv2.b")).unwrap().len())
            .sum();
        assert_eq!(total_out, 20);
    }

    #[test]
    fn zeroed_heads_give_analytic_activations() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut nets = tiny_nets(11);
        for head in ["scale", "rot", "opacity", "sh"] {
            for part in ["conv1.w", "conv1.b", "conv2.w", "conv2.b"] {
                let t = nets.gaussian.by_name_mut(&format!("head.{head}.{part}")).unwrap();
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let img = random_image(&mut rng, 32, 32);
        let (depth, feats) = nets.depth_forward(&img).unwrap();
        let maps = nets.gaussian_forward(&depth, &feats).unwrap();
        for s in &maps.scales {
            for &v in s {
                assert!((v - 2.0f32.ln()).abs() < 1e-5, "softplus(0) = ln 2, got {v}");
            }
        }
        for &o in &maps.opacities {
            assert!((o - 0.5).abs() < 1e-6);
        }
        // Zeroed rotation head falls back to the identity quaternion.
        for q in &maps.rotations {
            assert!((q[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_share_ablation_has_independent_encoder() {
        let cfg = NetworkConfig { feature_share: false, ..NetworkConfig::tiny() };
        let nets = Networks::<f32>::new(cfg, 0);
        assert!(nets.gaussian.by_name("imgenc.stem.w").is_some());
        let shared = Networks::<f32>::new(NetworkConfig::tiny(), 0);
        assert!(shared.gaussian.by_name("imgenc.stem.w").is_none());
    }

    #[test]
    fn canonical_motion_with_identity_extrinsic_matches_pose() {
        let mut rng = StdRng::seed_from_u64(7);
        let nets = tiny_nets(13);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        let pose = nets.pose_forward(&a, &b).unwrap().to_transform();
        let motion = nets
            .canonical_vehicle_motion(&a, &b, &RigidTransform::identity())
            .unwrap();
        assert!(motion.max_abs_diff(&pose) < 1e-6);

        // Per-camera motions are mutually consistent: E_i T_i = T_veh E_i.
        let e_i = RigidTransform::from_axis_angle(
            Vector3::new(0.1f32, -0.2, 0.3),
            Vector3::new(1.0, 0.5, -0.25),
        );
        let t_veh = nets.canonical_vehicle_motion(&a, &b, &e_i).unwrap();
        let t_cam = crate::geometry::camera_motion_from_vehicle(&t_veh, &e_i);
        let lhs = e_i.compose(&t_cam);
        let rhs = t_veh.compose(&e_i);
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn end_to_end_gradients_are_finite() {
        let mut rng = StdRng::seed_from_u64(8);
        let nets = tiny_nets(19);
        let img = random_image(&mut rng, 32, 32);
        let mut tape = Tape::new();
        let bound_d = nets.depth.bind(&mut tape);
        let bound_g = nets.gaussian.bind(&mut tape);
        let image = tape.constant(image_to_chw(&img));
        let dfwd = nets.depth_forward_op(&mut tape, &bound_d, image).unwrap();
        let maps = nets
            .gaussian_forward_op(&mut tape, &bound_g, dfwd.disparity_norm, &dfwd.features)
            .unwrap();
        // A loss touching every output.
        let s1 = tape.mean_all(maps.scale);
        let s2 = tape.mean_all(maps.rotation);
        let s3 = tape.mean_all(maps.opacity);
        let s4 = tape.mean_all(maps.sh);
        let s5 = tape.mean_all(dfwd.depth);
        let loss = tape.weighted_sum(&[(s1, 1.0), (s2, 1.0), (s3, 1.0), (s4, 1.0), (s5, 0.01)]);
        let grads = tape.backward(loss);
        let mut seen = 0;
        for &v in bound_d.vars().iter().chain(bound_g.vars()) {
            if let Some(g) = grads.get(v) {
                assert!(g.is_finite(), "non-finite gradient");
                seen += 1;
            }
        }
        assert!(seen > 20, "gradients reached only {seen} parameter tensors");
    }

    #[test]
    fn pose_gradients_are_finite() {
        let mut rng = StdRng::seed_from_u64(9);
        let nets = tiny_nets(23);
        let mut tape = Tape::new();
        let bound = nets.pose.bind(&mut tape);
        let pair = tape.constant(Tensor::new(
            vec![6, 32, 32],
            (0..6 * 32 * 32).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        ));
        let out = nets.pose_forward_op(&mut tape, &bound, pair).unwrap();
        let sq = tape.square(out);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        for &v in bound.vars() {
            if let Some(g) = grads.get(v) {
                assert!(g.is_finite());
            }
        }
    }
}
