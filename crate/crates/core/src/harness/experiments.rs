use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{TrainConfig, TrainMaskMode};
use super::synthetic::SyntheticScene;
use super::train::{train, TrainResult};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::{bernoulli_mask, MaskSample, Scene};
use crate::rasterizer::{render, MaskMode, RenderOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_gaussians: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub mode: TrainMaskMode,
    pub rows: Vec<SweepRow>,
    /// Gaussian count per iteration, one curve per row.
    pub curves: Vec<Vec<usize>>,
}

impl SweepResult {
    /// Plain-text table. With more than one row, counts and PSNR are also
    /// given relative to the first row.
    pub fn table(&self) -> String {
        let compare = self.rows.len() > 1;
        let mut s = String::from("lambda      #GS     PSNR    SSIM");
        if compare {
            s.push_str("   #GS/ref  dPSNR");
        }
        s.push('\n');
        let first = &self.rows[0];
        for r in &self.rows {
            let _ = write!(s, "{:<10.3e} {:>5}  {:>7.3}  {:.4}", r.lambda, r.final_gaussians, r.psnr, r.ssim);
            if compare {
                let ratio = r.final_gaussians as f64 / first.final_gaussians.max(1) as f64;
                let _ = write!(s, "   {:>7.3}  {:>+5.2}", ratio, r.psnr - first.psnr);
            }
            s.push('\n');
        }
        s
    }

    /// `iteration,<lambda>...` with one column per run.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("iteration");
        for r in &self.rows {
            let _ = write!(s, ",{:e}", r.lambda);
        }
        s.push('\n');
        let len = self.curves.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..len {
            let _ = write!(s, "{i}");
            for c in &self.curves {
                match c.get(i) {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn run_arms(cfgs: Vec<TrainConfig>, synth: &SyntheticScene, init: &Scene) -> Result<Vec<TrainResult>> {
    cfgs.into_par_iter().map(|c| train(&c, synth, init.clone())).collect()
}

/// One training run per λ in the template's mask mode, all sharing seed,
/// scene and initialization.
pub fn sweep(template: &TrainConfig, lambdas: &[f64], synth: &SyntheticScene, init: &Scene) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::invalid("sweep needs at least one lambda"));
    }
    if template.mask_mode == TrainMaskMode::None {
        return Err(Error::Config("sweep needs a regularized mask mode".into()));
    }
    let cfgs = lambdas.iter().map(|&l| template.clone().with_mode(template.mask_mode, l)).collect();
    let runs = run_arms(cfgs, synth, init)?;
    let rows = lambdas
        .iter()
        .zip(&runs)
        .map(|(&lambda, r)| SweepRow {
            lambda,
            final_gaussians: r.scene.len(),
            psnr: r.final_eval.psnr,
            ssim: r.final_eval.ssim,
        })
        .collect();
    Ok(SweepResult {
        mode: template.mask_mode,
        rows,
        curves: runs.into_iter().map(|r| r.counts).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: MaskMode,
    pub psnr: f64,
    pub ssim: f64,
    pub final_gaussians: usize,
    /// Share of covered pixels whose spatial-mask value is at least 0.9 of
    /// the image maximum.
    pub saturation: f64,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Spatial-mask image of each arm's final scene from the first camera.
    pub mask_images: Vec<(MaskMode, Image)>,
}

impl AblationResult {
    pub fn table(&self) -> String {
        let mut s = String::from("mode         PSNR    SSIM     #GS  saturation\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10}  {:>7.3}  {:.4}  {:>5}  {:.3}",
                r.mode.name(),
                r.psnr,
                r.ssim,
                r.final_gaussians,
                r.saturation
            );
        }
        s
    }
}

/// Spatial-mask image under `mode` with masks drawn from the current
/// probabilities, plus its saturation share.
pub fn spatial_mask_image(scene: &Scene, synth: &SyntheticScene, mode: MaskMode, seed: u64) -> Result<(Image, f64)> {
    let cam = &synth.cameras[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks: Vec<MaskSample> = scene
        .gaussians
        .iter()
        .map(|g| if bernoulli_mask(g.mask_logit, &mut rng) { MaskSample::ON } else { MaskSample::OFF })
        .collect();
    let out = render::<f64>(scene, cam, &masks, mode, &RenderOptions::default())?;
    let f = out.spatial_mask_f64().unwrap_or_default();
    let max = f.iter().cloned().fold(0.0, f64::max);
    let covered: Vec<f64> = f.iter().zip(&out.frag_count).filter(|(_, &n)| n > 0).map(|(v, _)| *v).collect();
    let saturation = if covered.is_empty() || max <= 0.0 {
        0.0
    } else {
        covered.iter().filter(|&&v| v >= 0.9 * max).count() as f64 / covered.len() as f64
    };
    Ok((Image::new(cam.width, cam.height, 1, f)?, saturation))
}

/// Trains the three spatial aggregations with identical λ, seed and start.
pub fn ablate_forwards(template: &TrainConfig, synth: &SyntheticScene, init: &Scene) -> Result<AblationResult> {
    let lambda = if template.mask_mode.spatial().is_some() {
        template.lambda_f
    } else {
        TrainConfig::default().lambda_f
    };
    let modes = [TrainMaskMode::Proposed, TrainMaskMode::Inverse, TrainMaskMode::Cumulative];
    let cfgs = modes.iter().map(|&m| template.clone().with_mode(m, lambda)).collect();
    let runs = run_arms(cfgs, synth, init)?;
    let mut rows = Vec::new();
    let mut mask_images = Vec::new();
    for (m, r) in modes.iter().zip(&runs) {
        let mode = m.spatial().expect("spatial arm");
        let (img, saturation) = spatial_mask_image(&r.scene, synth, mode, template.seed)?;
        rows.push(AblationRow {
            mode,
            psnr: r.final_eval.psnr,
            ssim: r.final_eval.ssim,
            final_gaussians: r.scene.len(),
            saturation,
        });
        mask_images.push((mode, img));
    }
    Ok(AblationResult { rows, mask_images })
}
