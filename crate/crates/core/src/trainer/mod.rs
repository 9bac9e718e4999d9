//! Joint end-to-end training and single-/multi-frame inference.
//!
//! One training sample is a (t-1, t, t+1) triplet of surround views.
//! Every step runs the depth network on frame t, the pose network on both
//! front-camera pairs, builds the photometric localization loss over
//! temporal/spatial/spatial-temporal contexts, predicts per-pixel Gaussian
//! parameters, renders both adjacent frames from the frame-t cloud, and
//! takes one Adam step on `L_loc + lambda_render * L_render`.

mod adam;
mod infer;
mod run;
mod step;

pub use adam::{AdamConfig, AdamState};
pub use infer::{infer_mf, infer_sf, predict_view_cloud, InferOutput};
pub use run::{resume_checkpoint, train, RunArtifacts, StageSplit};
pub use step::{train_step, LossBreakdown, SampleImages, Stage};

use crate::losses::LossWeights;
use crate::networks::{NetworkConfig, Networks, ParamSet, StoreError};
use crate::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: String, step: u64 },
    #[error("network: {0}")]
    Network(#[from] crate::networks::NetworkError),
    #[error("data: {0}")]
    Data(#[from] crate::dataio::DataError),
    #[error("checkpoint: {0}")]
    Store(#[from] StoreError),
    #[error("render: {0}")]
    Render(#[from] crate::renderer::RenderError),
    #[error("{0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Inference input mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Synthesize frame t+1 from the single frame at t.
    Sf,
    /// Synthesize frame t from frames t-1 and t+1.
    Mf,
}

/// Where inference-time ego motion comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EgoSource {
    FromPoseNetwork,
    FromFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Samples (triplets) per optimizer step.
    pub batch_size: usize,
    pub steps: usize,
    pub mode: Mode,
    pub joint_training: bool,
    pub feature_share: bool,
    /// When false, only temporal contexts supervise localization
    /// (monocular-style ablation).
    pub scale_aware: bool,
    pub seed: u64,
    pub network: NetworkConfig,
    pub grad_clip: f64,
    /// Periodic checkpoint interval in steps (0 = final only).
    pub checkpoint_every: usize,
    pub ego_source: EgoSource,
    /// Timesteps excluded as training-sample centers (held out for eval).
    pub holdout: Vec<i64>,
    /// Expected training resolution; validated against the scene.
    pub image_size: Option<(usize, usize)>,
    /// Render with exhaustive evaluation (no screen bound or early stop).
    /// Slow; used by gradient checks where those cutoffs are discontinuous.
    #[serde(default)]
    pub render_exact: bool,
    /// Name of the camera whose pairs drive the pose network.
    pub front_camera: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            batch_size: 1,
            steps: 2000,
            mode: Mode::Sf,
            joint_training: true,
            feature_share: true,
            scale_aware: true,
            seed: 7,
            network: NetworkConfig::default(),
            grad_clip: 10.0,
            checkpoint_every: 0,
            ego_source: EgoSource::FromPoseNetwork,
            holdout: Vec::new(),
            image_size: None,
            render_exact: false,
            front_camera: "cam0".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("steps and batch size must be positive".into()));
        }
        self.weights
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Mutable training state: parameters, optimizer moments, data-order RNG.
pub struct TrainState<S> {
    pub step: u64,
    pub networks: Networks<S>,
    pub opt: AdamState<S>,
    pub rng: ChaCha8Rng,
    pub loss_ema: Option<f64>,
}

impl<S: Real> TrainState<S> {
    pub fn new(config: &TrainConfig) -> Self {
        let net_config = NetworkConfig {
            feature_share: config.feature_share,
            ..config.network
        };
        let networks = Networks::new(net_config, config.seed);
        let shapes = all_param_shapes(&networks);
        Self {
            step: 0,
            networks,
            opt: AdamState::new(
                AdamConfig { learning_rate: config.learning_rate, ..Default::default() },
                &shapes,
            ),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED)),
            loss_ema: None,
        }
    }
}

pub(crate) fn all_param_shapes<S: Real>(nets: &Networks<S>) -> Vec<Vec<usize>> {
    param_sets(nets)
        .iter()
        .flat_map(|(_, set)| (0..set.len()).map(|i| set.tensor(i).shape.clone()).collect::<Vec<_>>())
        .collect()
}

pub(crate) fn param_sets<'a, S: Real>(nets: &'a Networks<S>) -> [(&'static str, &'a ParamSet<S>); 3] {
    [("depth.", &nets.depth), ("pose.", &nets.pose), ("gauss.", &nets.gaussian)]
}



#[cfg(test)]
mod grad_bisect {
    use super::step::{build_sample_graph, SampleImages, Stage};
    use super::*;
    use crate::dataio::{generate_scene, load_scene, GeneratorConfig, Scene};

    #[test]
    fn bisect_pose_gradient_paths() {
        let cfg = GeneratorConfig {
            cameras: 3,
            width: 48,
            height: 32,
            timesteps: 4,
            boxes: 3,
            spheres: 2,
            seed: 91,
            ..Default::default()
        };
        let dir = std::env::temp_dir().join(format!("rigsplat-bisect-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        generate_scene(&cfg, &dir).unwrap();
        let scene: Scene<f64> = load_scene(&dir).unwrap();
        let prev = scene.load_frame(0).unwrap();
        let center = scene.load_frame(1).unwrap();
        let next = scene.load_frame(2).unwrap();
        let sample = SampleImages { prev: &prev, center: &center, next: &next };

        for (label, lambda_render, scale_aware) in [
            ("warp-only (render weight 0)", 0.0, true),
            ("temporal-warp-only", 0.0, false),
            ("full", 0.01, true),
        ] {
            let mut config = TrainConfig {
                network: NetworkConfig::tiny(),
                seed: 91,
                scale_aware,
                render_exact: true,
                ..Default::default()
            };
            config.weights.lambda_render = lambda_render;
            let state = TrainState::<f64>::new(&config);
            let graph =
                build_sample_graph(&state, &scene.rig, &sample, &config, Stage::Joint, 0).unwrap();
            let grads = graph.tape.backward(graph.total);
            let vars = graph.param_vars[1].as_ref().unwrap();
            // Probe the s2 skip bias (tensor 7), entry 6: the case the
            // broad FD test flagged.
            let ti = 7;
            let entry = 6;
            let analytic = grads.get(vars[ti]).map(|g| g.data[entry]).unwrap_or(0.0);
            let step = 1e-5;
            let mut eval = |delta: f64| -> f64 {
                let mut s2 = TrainState::<f64>::new(&config);
                for i in 0..state.networks.pose.len() {
                    s2.networks.pose.tensor_mut(i).data.clone_from(&state.networks.pose.tensor(i).data);
                }
                s2.networks.pose.tensor_mut(ti).data[entry] += delta;
                build_sample_graph(&s2, &scene.rig, &sample, &config, Stage::Joint, 0)
                    .unwrap()
                    .breakdown
                    .total
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            println!("{label}: analytic {analytic:.6e} fd {fd:.6e} ratio {:.3}", analytic / fd);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
