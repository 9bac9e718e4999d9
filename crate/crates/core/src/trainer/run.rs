//! The training loop: sample scheduling, staging, checkpoints, manifests,
//! and the append-only loss log.

use super::step::{train_step, LossBreakdown, SampleImages, Stage};
use super::{all_param_shapes, param_sets, AdamConfig, AdamState, TrainConfig, TrainError, TrainState};
use crate::dataio::{make_training_samples, FrameBundle, Scene};
use crate::losses::PerceptualMetric;
use crate::networks::{load_into, read_archive, write_archive, Networks, ParamSet};
use crate::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// How steps divide between the two stages when joint training is off:
/// the first half optimizes localization, the second half the renderer.
#[derive(Debug, Clone, Copy)]
pub struct StageSplit {
    pub stage1_steps: u64,
    pub total_steps: u64,
}

impl StageSplit {
    pub fn for_config(config: &TrainConfig) -> Self {
        let total = config.steps as u64;
        let stage1 = if config.joint_training { 0 } else { total.div_ceil(2) };
        Self { stage1_steps: stage1, total_steps: total }
    }

    pub fn stage_at(&self, step: u64, joint: bool) -> Stage {
        if joint {
            Stage::Joint
        } else if step < self.stage1_steps {
            Stage::LocalizationOnly
        } else {
            Stage::RenderOnly
        }
    }
}

pub struct RunArtifacts<S> {
    pub state: TrainState<S>,
    pub final_checkpoint: PathBuf,
    pub manifest_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub last_breakdown: Option<LossBreakdown>,
}

fn rng_state_json(rng: &ChaCha8Rng) -> serde_json::Value {
    let seed = rng.get_seed();
    let hex: String = seed.iter().map(|b| format!("{b:02x}")).collect();
    serde_json::json!({
        "seed_hex": hex,
        "word_pos": rng.get_word_pos().to_string(),
    })
}

fn rng_from_json(value: &serde_json::Value) -> Result<ChaCha8Rng, TrainError> {
    let hex = value["seed_hex"]
        .as_str()
        .ok_or_else(|| TrainError::Config("checkpoint rng missing seed".into()))?;
    let mut seed = [0u8; 32];
    for i in 0..32 {
        seed[i] = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| TrainError::Config("bad rng seed hex".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    let pos: u128 = value["word_pos"]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| TrainError::Config("bad rng word position".into()))?;
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serialize the full training state (parameters, optimizer moments, RNG,
/// config echo) into a single archive file.
pub fn save_checkpoint<S: Real>(
    state: &TrainState<S>,
    config: &TrainConfig,
    path: &Path,
) -> Result<(), TrainError> {
    let manifest = serde_json::json!({
        "format": "rigsplat training checkpoint",
        "step": state.step,
        "config": serde_json::to_value(config).expect("config serializes"),
        "network": serde_json::to_value(state.networks.config).expect("network config serializes"),
        "rng": rng_state_json(&state.rng),
        "loss_ema": state.loss_ema,
        "adam_t": state.opt.t,
    });
    // Optimizer moments travel as extra named sets.
    let mut m_set = ParamSet::new();
    let mut v_set = ParamSet::new();
    let mut slot = 0usize;
    for (prefix, set) in param_sets(&state.networks) {
        for name in set.names() {
            m_set.register(format!("{prefix}{name}"), state.opt.m[slot].clone());
            v_set.register(format!("{prefix}{name}"), state.opt.v[slot].clone());
            slot += 1;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_archive(
        &mut w,
        &manifest,
        &[
            ("depth.", &state.networks.depth),
            ("pose.", &state.networks.pose),
            ("gauss.", &state.networks.gaussian),
            ("adam.m.", &m_set),
            ("adam.v.", &v_set),
        ],
    )?;
    Ok(())
}

/// Restore a checkpoint saved by [`save_checkpoint`].
pub fn resume_checkpoint<S: Real>(path: &Path) -> Result<(TrainState<S>, TrainConfig), TrainError> {
    let file = std::fs::File::open(path)?;
    let (manifest, tensors) = read_archive::<S, _>(std::io::BufReader::new(file))?;
    let config: TrainConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| TrainError::Config(format!("checkpoint config: {e}")))?;
    let net_config = serde_json::from_value(manifest["network"].clone())
        .map_err(|e| TrainError::Config(format!("checkpoint network config: {e}")))?;
    let mut networks = Networks::new(net_config, config.seed);
    load_into(&mut networks.depth, "depth.", &tensors)?;
    load_into(&mut networks.pose, "pose.", &tensors)?;
    load_into(&mut networks.gaussian, "gauss.", &tensors)?;
    let shapes = all_param_shapes(&networks);
    let mut opt = AdamState::new(
        AdamConfig { learning_rate: config.learning_rate, ..Default::default() },
        &shapes,
    );
    let mut slot = 0usize;
    for (prefix, set) in param_sets(&networks) {
        for name in set.names() {
            let m = tensors
                .get(&format!("adam.m.{prefix}{name}"))
                .ok_or_else(|| TrainError::Config(format!("checkpoint missing moment for {name}")))?;
            let v = tensors
                .get(&format!("adam.v.{prefix}{name}"))
                .ok_or_else(|| TrainError::Config(format!("checkpoint missing variance for {name}")))?;
            opt.m[slot] = m.clone();
            opt.v[slot] = v.clone();
            slot += 1;
        }
    }
    if let Some(ts) = manifest["adam_t"].as_array() {
        for (i, t) in ts.iter().enumerate() {
            opt.t[i] = t.as_u64().unwrap_or(0);
        }
    }
    let state = TrainState {
        step: manifest["step"].as_u64().unwrap_or(0),
        networks,
        opt,
        rng: rng_from_json(&manifest["rng"])?,
        loss_ema: manifest["loss_ema"].as_f64(),
    };
    Ok((state, config))
}

/// Training triplet schedule for one epoch: interior timesteps minus
/// held-out centers, shuffled deterministically per (seed, epoch).
pub fn epoch_schedule(config: &TrainConfig, timesteps: &[i64], epoch: u64) -> Vec<(i64, i64, i64)> {
    make_training_samples(timesteps, config.seed, epoch)
        .into_iter()
        .filter(|(_, c, _)| !config.holdout.contains(c))
        .collect()
}

/// Train (or continue training) on one scene, writing the run manifest,
/// loss log, and checkpoints under `out_dir`.
pub fn train<S: Real>(
    scene: &Scene<S>,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    perceptual: Option<&dyn PerceptualMetric<S>>,
) -> Result<RunArtifacts<S>, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let first = scene.rig.camera(0);
    if let Some((h, w)) = config.image_size {
        if (first.model.height, first.model.width) != (h, w) {
            return Err(TrainError::Config(format!(
                "scene resolution {}x{} does not match configured {}x{}",
                first.model.height, first.model.width, h, w
            )));
        }
    }
    if scene.rig.index_of(&config.front_camera).is_none() {
        return Err(TrainError::Config(format!(
            "front camera {:?} not present in the rig",
            config.front_camera
        )));
    }

    let mut state = match resume {
        Some(path) => {
            let (state, ckpt_config) = resume_checkpoint::<S>(path)?;
            // The architecture is pinned by the checkpoint; training
            // hyperparameters come from the caller's config.
            if ckpt_config.seed != config.seed {
                return Err(TrainError::Config(
                    "resume requires the same seed as the original run".into(),
                ));
            }
            state
        }
        None => TrainState::new(config),
    };

    // Preload every frame once; scenes are desk-scale.
    let mut frames: BTreeMap<i64, FrameBundle<S>> = BTreeMap::new();
    for &t in scene.timesteps() {
        frames.insert(t, scene.load_frame(t)?);
    }
    let schedule_len = epoch_schedule(config, scene.timesteps(), 0).len();
    if schedule_len == 0 {
        return Err(TrainError::Config(
            "no training samples: need at least 3 timesteps with non-held-out centers".into(),
        ));
    }

    let manifest_path = out_dir.join("run.json");
    let loss_log_path = out_dir.join("loss_log.jsonl");
    let run_manifest = serde_json::json!({
        "format": "rigsplat run manifest",
        "config": serde_json::to_value(config).expect("config serializes"),
        "scene": scene.root.display().to_string(),
        "image_size": [first.model.height, first.model.width],
        "cameras": scene.rig.len(),
        "samples_per_epoch": schedule_len,
        "perceptual_metric": perceptual.map(|p| p.name().to_string()).unwrap_or_else(|| "none".into()),
        "resumed_from": resume.map(|p| p.display().to_string()),
        "stage_split": {
            "joint": config.joint_training,
            "stage1_steps": StageSplit::for_config(config).stage1_steps,
        },
    });
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&run_manifest).unwrap())?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_log_path)?;

    let split = StageSplit::for_config(config);
    let mut last = None;
    while state.step < split.total_steps {
        let stage = split.stage_at(state.step, config.joint_training);
        // Samples consumed so far determine the epoch and cursor, so a
        // resumed run continues exactly where the original left off.
        let consumed = state.step * config.batch_size as u64;
        let sample_at = |index: u64| -> (i64, i64, i64) {
            let epoch = index / schedule_len as u64;
            let pos = (index % schedule_len as u64) as usize;
            epoch_schedule(config, scene.timesteps(), epoch)[pos]
        };
        let batch_keys: Vec<(i64, i64, i64)> =
            (0..config.batch_size as u64).map(|k| sample_at(consumed + k)).collect();
        let samples: Vec<SampleImages<'_, S>> = batch_keys
            .iter()
            .map(|&(p, c, n)| SampleImages {
                prev: &frames[&p],
                center: &frames[&c],
                next: &frames[&n],
            })
            .collect();
        let breakdown = train_step(&mut state, &scene.rig, &samples, config, stage)?;
        writeln!(log, "{}", serde_json::to_string(&breakdown).unwrap())?;
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every as u64 == 0 {
            save_checkpoint(&state, config, &out_dir.join(format!("ckpt_step_{}.ckpt", state.step)))?;
        }
        let _ = perceptual; // perceptual metrics are evaluation-time; the
                            // render loss gamma term stays 0 in training.
        last = Some(breakdown);
    }
    let final_checkpoint = out_dir.join("ckpt_final.ckpt");
    save_checkpoint(&state, config, &final_checkpoint)?;
    Ok(RunArtifacts {
        state,
        final_checkpoint,
        manifest_path,
        loss_log_path,
        last_breakdown: last,
    })
}
