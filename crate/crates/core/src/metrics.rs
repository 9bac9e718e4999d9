//! Evaluation metrics: PSNR, SSIM, and per-bundle reports with an optional
//! perceptual plug-in column. Metrics are evaluation-only; nothing here
//! participates in gradients.

use crate::img::Image;
use crate::losses::{self, LossError, PerceptualMetric};
use crate::Real;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("bundles disagree: {0}")]
    BundleMismatch(String),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Peak signal-to-noise ratio in dB over all pixels and channels,
/// capped at 100 dB for (near-)identical images.
pub fn psnr<S: Real>(a: &Image<S>, b: &Image<S>) -> Result<f64, MetricError> {
    if !a.same_shape(b) {
        return Err(LossError::ShapeMismatch("psnr inputs differ in shape".into()).into());
    }
    let n = a.data.len().max(1);
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y).to_f64();
            d * d
        })
        .sum::<f64>()
        / n as f64;
    if mse < 1e-10 {
        return Ok(100.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean of the per-pixel SSIM map.
pub fn ssim_score<S: Real>(a: &Image<S>, b: &Image<S>) -> Result<f64, MetricError> {
    let map = losses::ssim(a, b)?;
    let n = map.data.len().max(1);
    Ok(map.data.iter().map(|&v| v.to_f64()).sum::<f64>() / n as f64)
}

/// One metric row (a camera, or the mean).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub camera: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

/// Per-camera metrics plus a mean row.
#[derive(Debug, Clone)]
pub struct BundleReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl BundleReport {
    /// CSV with schema `camera,psnr_db,ssim,lpips`; the lpips column is
    /// left empty when no perceptual plug-in was configured.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("camera,psnr_db,ssim,lpips\n");
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            let lpips = row.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                row.camera, row.psnr_db, row.ssim, lpips
            ));
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), MetricError> {
        w.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Compare a rendered bundle against a reference bundle camera by camera.
/// Camera name lists must match exactly (same rig, same order).
pub fn evaluate_bundle<S: Real>(
    camera_names: &[String],
    rendered: &[Image<S>],
    reference: &[Image<S>],
    perceptual: Option<&dyn PerceptualMetric<S>>,
) -> Result<BundleReport, MetricError> {
    if rendered.len() != reference.len() || rendered.len() != camera_names.len() {
        return Err(MetricError::BundleMismatch(format!(
            "{} rendered vs {} reference images for {} cameras",
            rendered.len(),
            reference.len(),
            camera_names.len()
        )));
    }
    let mut rows = Vec::with_capacity(rendered.len());
    for ((name, r), gt) in camera_names.iter().zip(rendered).zip(reference) {
        if !r.same_shape(gt) {
            return Err(MetricError::BundleMismatch(format!("camera {name}: resolution mismatch")));
        }
        rows.push(MetricRow {
            camera: name.clone(),
            psnr_db: psnr(r, gt)?,
            ssim: ssim_score(r, gt)?,
            lpips: perceptual.map(|p| p.distance(r, gt).to_f64()),
        });
    }
    let n = rows.len().max(1) as f64;
    let mean = MetricRow {
        camera: "mean".to_string(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lpips: perceptual.map(|_| rows.iter().filter_map(|r| r.lpips).sum::<f64>() / n),
    };
    Ok(BundleReport { rows, mean })
}
