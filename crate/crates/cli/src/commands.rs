//! Subcommand implementations. Usage and configuration problems exit 2;
//! runtime failures exit 1.

use rigsplat_core::dataio::{self, scene_paths, GeneratorConfig, Scene};
use rigsplat_core::geometry::RigidTransform;
use rigsplat_core::img::Image;
use rigsplat_core::metrics::{evaluate_bundle, BundleReport};
use rigsplat_core::primitives::write_cloud;
use rigsplat_core::renderer::RenderOptions;
use rigsplat_core::trainer::{
    self, infer_mf, infer_sf, resume_checkpoint, EgoSource, TrainConfig,
};
use std::path::PathBuf;
use std::time::Instant;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }
    fn runtime(msg: impl Into<String>) -> Self {
        Self { code: 1, message: msg.into() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_json_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("bad config {}: {e}", path.display())))
}

pub fn generate(
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    cameras: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    timesteps: Option<usize>,
) -> Result<()> {
    let mut cfg: GeneratorConfig = match &config {
        Some(path) => read_json_config(path)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = cameras {
        cfg.cameras = n;
    }
    if let Some(w) = width {
        cfg.width = w;
    }
    if let Some(h) = height {
        cfg.height = h;
    }
    if let Some(t) = timesteps {
        cfg.timesteps = t;
    }
    if cfg.cameras < 3 {
        return Err(CliError::usage("need at least 3 cameras for a closed rig"));
    }
    let report = dataio::generate_scene(&cfg, &out)
        .map_err(|e| CliError::runtime(format!("generation failed: {e}")))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    // Echo the effective config for reproducibility audits.
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(out.join("generator.json"), echo)
        .map_err(|e| CliError::runtime(format!("cannot write generator echo: {e}")))?;
    println!(
        "generated scene: {} cameras x {} timesteps at {}x{} -> {}",
        cfg.cameras,
        cfg.timesteps,
        cfg.height,
        cfg.width,
        out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub scene: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub no_joint: bool,
    pub no_feature_share: bool,
    pub mono_depth: bool,
    pub resume: Option<PathBuf>,
    pub holdout: Vec<i64>,
    pub checkpoint_every: Option<usize>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    // Precedence: CLI flags > config file > built-in defaults.
    let mut config: TrainConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    if args.no_joint {
        config.joint_training = false;
    }
    if args.no_feature_share {
        config.feature_share = false;
    }
    if args.mono_depth {
        config.scale_aware = false;
    }
    if !args.holdout.is_empty() {
        config.holdout = args.holdout.clone();
    }
    config
        .validate()
        .map_err(|e| CliError::usage(format!("invalid training config: {e}")))?;
    let scene: Scene<f32> = dataio::load_scene(&args.scene)
        .map_err(|e| CliError::usage(format!("cannot load scene: {e}")))?;
    let started = Instant::now();
    let run = trainer::train(&scene, &config, &args.out, args.resume.as_deref(), None)
        .map_err(|e| CliError::runtime(format!("training aborted: {e}")))?;
    let last = run.last_breakdown.map(|b| b.total).unwrap_or(f64::NAN);
    println!(
        "trained {} steps in {:.1?} (final loss {last:.5}); checkpoint: {}",
        config.steps,
        started.elapsed(),
        run.final_checkpoint.display()
    );
    Ok(())
}

fn parse_ego(ego: &str) -> EgoSource {
    match ego {
        "from-file" => EgoSource::FromFile,
        _ => EgoSource::FromPoseNetwork,
    }
}

pub fn infer(
    checkpoint: PathBuf,
    scene_dir: PathBuf,
    out: PathBuf,
    mode: &str,
    ego: &str,
    export_cloud: bool,
) -> Result<()> {
    let (state, config) = resume_checkpoint::<f32>(&checkpoint)
        .map_err(|e| CliError::usage(format!("cannot load checkpoint: {e}")))?;
    let scene: Scene<f32> = dataio::load_scene(&scene_dir)
        .map_err(|e| CliError::usage(format!("cannot load scene: {e}")))?;
    let ego_source = parse_ego(ego);
    if ego_source == EgoSource::FromFile && scene.ego.is_none() {
        return Err(CliError::usage(format!(
            "--ego from-file requires {} to exist",
            scene_paths::ego(&scene_dir).display()
        )));
    }
    let front = scene
        .rig
        .index_of(&config.front_camera)
        .ok_or_else(|| CliError::usage("checkpoint front camera missing from scene rig"))?;
    let e_front = scene.rig.camera(front).cam_to_vehicle;
    let nets = &state.networks;
    let opts = RenderOptions::<f32>::default();
    let ts = scene.timesteps().to_vec();
    if ts.len() < 2 {
        return Err(CliError::usage("need at least 2 timesteps for inference"));
    }

    // Vehicle motion between two frames, per the requested source.
    let motion = |t_from: i64, t_to: i64| -> Result<RigidTransform<f32>> {
        match ego_source {
            EgoSource::FromFile => scene.ego_motion(t_from, t_to).ok_or_else(|| {
                CliError::usage(format!("ego.json lacks poses for timesteps {t_from} or {t_to}"))
            }),
            EgoSource::FromPoseNetwork => {
                let a = scene
                    .load_frame(t_from)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                let b = scene
                    .load_frame(t_to)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                nets.canonical_vehicle_motion(&a.images[front], &b.images[front], &e_front)
                    .map_err(|e| CliError::runtime(e.to_string()))
            }
        }
    };

    std::fs::create_dir_all(&out).map_err(|e| CliError::runtime(e.to_string()))?;
    let started = Instant::now();
    let mut rendered = 0usize;
    match mode {
        "sf" => {
            // Each frame after the first is rendered from its predecessor.
            for pair in ts.windows(2) {
                let (t_in, t_out) = (pair[0], pair[1]);
                let frame = scene
                    .load_frame(t_in)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                let m = motion(t_in, t_out)?;
                let result = infer_sf(nets, &scene.rig, &frame, &m, t_out, &opts)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                write_renders(&out, &scene, t_out, &result.images)?;
                if export_cloud {
                    export_cloud_file(&out, t_out, &result.cloud)?;
                }
                rendered += 1;
            }
        }
        "mf" => {
            for window in ts.windows(3) {
                let (t_prev, t_mid, t_next) = (window[0], window[1], window[2]);
                let prev = scene
                    .load_frame(t_prev)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                let next = scene
                    .load_frame(t_next)
                    .map_err(|e| CliError::runtime(e.to_string()))?;
                let m_prev = motion(t_prev, t_mid)?;
                let m_next = motion(t_next, t_mid)?;
                let result = infer_mf(
                    nets, &scene.rig, &prev, &m_prev, &next, &m_next, t_mid, &opts,
                )
                .map_err(|e| CliError::runtime(e.to_string()))?;
                write_renders(&out, &scene, t_mid, &result.images)?;
                if export_cloud {
                    export_cloud_file(&out, t_mid, &result.cloud)?;
                }
                rendered += 1;
            }
        }
        other => return Err(CliError::usage(format!("unknown mode {other:?}"))),
    }
    let elapsed = started.elapsed();
    println!(
        "rendered {rendered} target frames in {elapsed:.1?} ({:.3} s per frame)",
        elapsed.as_secs_f64() / rendered.max(1) as f64
    );
    Ok(())
}

fn write_renders(out: &PathBuf, scene: &Scene<f32>, t: i64, images: &[Image<f32>]) -> Result<()> {
    let dir = out.join(t.to_string());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::runtime(e.to_string()))?;
    for (cam, img) in scene.rig.cameras().iter().zip(images) {
        let path = dir.join(format!("{}.png", cam.name));
        img.to_rgb8()
            .save(&path)
            .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn export_cloud_file(
    out: &PathBuf,
    t: i64,
    cloud: &rigsplat_core::primitives::GaussianCloud<f32>,
) -> Result<()> {
    let path = out.join(format!("{t}.cloud"));
    let file = std::fs::File::create(&path).map_err(|e| CliError::runtime(e.to_string()))?;
    write_cloud(cloud, std::io::BufWriter::new(file))
        .map_err(|e| CliError::runtime(format!("cloud export: {e}")))?;
    Ok(())
}

pub fn eval(rendered: PathBuf, scene_dir: PathBuf, out: PathBuf) -> Result<()> {
    let scene: Scene<f32> = dataio::load_scene(&scene_dir)
        .map_err(|e| CliError::usage(format!("cannot load scene: {e}")))?;
    let names: Vec<String> = scene.rig.cameras().iter().map(|c| c.name.clone()).collect();
    let mut all_rows = Vec::new();
    let mut evaluated = 0usize;
    let mut csv = String::from("camera,psnr_db,ssim,lpips\n");
    for &t in scene.timesteps() {
        let dir = rendered.join(t.to_string());
        if !dir.is_dir() {
            continue;
        }
        let mut rendered_images = Vec::with_capacity(names.len());
        for name in &names {
            let path = dir.join(format!("{name}.png"));
            let img = image_open(&path)?;
            rendered_images.push(img);
        }
        let reference = scene
            .load_frame(t)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let report = evaluate_bundle(&names, &rendered_images, &reference.images, None)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        append_report(&mut csv, t, &report);
        all_rows.extend(report.rows.iter().map(|r| (r.psnr_db, r.ssim)));
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CliError::usage(
            "no overlapping timesteps between the rendered directory and the scene",
        ));
    }
    let n = all_rows.len() as f64;
    let mean_psnr = all_rows.iter().map(|r| r.0).sum::<f64>() / n;
    let mean_ssim = all_rows.iter().map(|r| r.1).sum::<f64>() / n;
    csv.push_str(&format!("mean,{mean_psnr:.6},{mean_ssim:.6},\n"));
    std::fs::write(&out, &csv).map_err(|e| CliError::runtime(e.to_string()))?;
    println!("evaluated {evaluated} frames: mean PSNR {mean_psnr:.2} dB, SSIM {mean_ssim:.4}");
    Ok(())
}

fn append_report(csv: &mut String, t: i64, report: &BundleReport) {
    for row in report.rows.iter().chain(std::iter::once(&report.mean)) {
        let lpips = row.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            "t{t}/{},{:.6},{:.6},{lpips}\n",
            row.camera, row.psnr_db, row.ssim
        ));
    }
}

fn image_open(path: &PathBuf) -> Result<Image<f32>> {
    let img = image::open(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    Ok(Image::from_rgb8(&img))
}
