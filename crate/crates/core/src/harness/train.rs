use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Precision, TrainConfig, TrainMaskMode};
use super::synthetic::SyntheticScene;
use crate::error::{Error, Result};
use crate::gradients::{backward, scene_gradients, BackwardOptions};
use crate::imaging::Image;
use crate::losses::{self, LossReport};
use crate::model::{activate, layout, sample_mask, MaskSample, Scene, LOGIT_CLAMP, PARAM_COUNT};
use crate::optim::Adam;
use crate::rasterizer::{render, MaskMode, RenderOptions};
use crate::real::Real;
use crate::schedule::{self, actions_at, DensifyStats};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricsRecord {
    /// Batch losses of the iteration plus all-camera quality metrics.
    Eval {
        iteration: usize,
        gaussian_count: usize,
        lambda: f64,
        loss: f64,
        l_rgb: f64,
        l_mask: f64,
        psnr: f64,
        ssim: f64,
        l1: f64,
        mean_mask_probability: f64,
    },
    Densify {
        iteration: usize,
        before: usize,
        after: usize,
        cloned: usize,
        split: usize,
    },
    Prune {
        iteration: usize,
        before: usize,
        after: usize,
        removed_checksum: String,
    },
    OpacityReset {
        iteration: usize,
        changed: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub scene: Scene,
    pub metrics: Vec<MetricsRecord>,
    /// Gaussian count after every iteration, index 0 being the start.
    pub counts: Vec<usize>,
    pub final_eval: EvalReport,
    pub seconds: f64,
}

impl TrainResult {
    /// The metrics log as line-delimited JSON.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Mean PSNR/SSIM/L1 over all cameras with every mask on.
pub fn evaluate(scene: &Scene, synth: &SyntheticScene, opts: &RenderOptions) -> Result<EvalReport> {
    let masks = vec![MaskSample::ON; scene.len()];
    let n = synth.cameras.len() as f64;
    let mut rep = EvalReport {
        psnr: 0.0,
        ssim: 0.0,
        l1: 0.0,
    };
    for (cam, target) in synth.cameras.iter().zip(&synth.targets) {
        let out = render::<f64>(scene, cam, &masks, MaskMode::None, opts)?;
        let img = Image::new(cam.width, cam.height, 3, out.rgb)?;
        rep.psnr += losses::psnr(&img, target)?.min(100.0) / n;
        rep.ssim += losses::ssim(&img, target)? / n;
        rep.l1 += losses::l1(&img, target)? / n;
    }
    Ok(rep)
}

/// Runs the full main phase plus recovery.
pub fn train(cfg: &TrainConfig, synth: &SyntheticScene, init: Scene) -> Result<TrainResult> {
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, synth, init),
        Precision::F64 => train_with::<f64>(cfg, synth, init),
    }
}

fn learning_rates(cfg: &TrainConfig, iteration: usize, extent: f64, recovery: bool) -> [f64; PARAM_COUNT] {
    let lr = &cfg.lr;
    let total = cfg.schedule.total_iters.max(1) as f64;
    let t = (iteration as f64 / total).min(1.0);
    let pos = (lr.position.ln() * (1.0 - t) + lr.position_final.ln() * t).exp() * extent;
    let mut out = [0.0; PARAM_COUNT];
    for k in layout::POSITION {
        out[k] = pos;
    }
    for k in layout::LOG_SCALE {
        out[k] = lr.scale;
    }
    for k in layout::ROTATION {
        out[k] = lr.rotation;
    }
    out[layout::OPACITY] = lr.opacity;
    for k in layout::COLOR {
        out[k] = if k < layout::COLOR.start + 3 {
            lr.color
        } else {
            lr.color / lr.color_rest_divisor
        };
    }
    out[layout::MASK] = if recovery || cfg.mask_mode == TrainMaskMode::None {
        0.0
    } else {
        lr.mask_logit
    };
    out
}

fn non_finite(iteration: usize, what: &str, report: &LossReport, scene: &Scene) -> Error {
    Error::NonFiniteLoss {
        iteration,
        diagnostic: format!(
            "{what}: l1={} ssim={} l_mask={} total={}, {} gaussians",
            report.l1,
            report.ssim,
            report.l_mask,
            report.total,
            scene.len()
        ),
    }
}

fn train_with<R: Real>(cfg: &TrainConfig, synth: &SyntheticScene, init: Scene) -> Result<TrainResult> {
    cfg.validate()?;
    init.validate()?;
    if init.is_empty() {
        return Err(Error::DegenerateScene { count: 0 });
    }
    if synth.cameras.is_empty() || synth.cameras.len() != synth.targets.len() {
        return Err(Error::invalid("synthetic scene needs one target per camera"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scene = init;
    let mut adam = Adam::new(cfg.adam);
    let mut stats = DensifyStats::default();
    let extent = synth.extent();
    let sched = &cfg.schedule;
    let opts = RenderOptions {
        parallel: !cfg.deterministic,
        ..cfg.render
    };
    let bopts = BackwardOptions {
        mask_through_alpha: cfg.mask_through_alpha,
        parallel: !cfg.deterministic,
    };
    let spatial = cfg.mask_mode.spatial();
    let mut metrics = Vec::new();
    let mut counts = vec![scene.len()];
    let mut order: Vec<usize> = Vec::new();

    for iteration in 1..=sched.end() {
        let recovery = iteration > sched.total_iters;
        if order.is_empty() {
            order = (0..synth.cameras.len()).collect();
            order.shuffle(&mut rng);
        }
        let view = order.pop().expect("refilled above");
        let cam = &synth.cameras[view];
        let target = &synth.targets[view];

        let masks: Vec<MaskSample> = if recovery || cfg.mask_mode == TrainMaskMode::None {
            vec![MaskSample::ON; scene.len()]
        } else {
            scene
                .gaussians
                .iter()
                .map(|g| sample_mask(g.mask_logit, cfg.temperature, &mut rng))
                .collect()
        };
        let spatial_active = spatial.filter(|_| !recovery);
        let out = render::<R>(&scene, cam, &masks, spatial_active.unwrap_or(MaskMode::None), &opts)?;
        let rendered = Image::from_real(cam.width, cam.height, 3, &out.rgb)?;
        let (rgb, d_rgb) = losses::rgb_loss_with_grad(&rendered, target, cfg.rgb_loss)?;
        let d_rgb: Vec<R> = d_rgb.iter().map(|v| R::c(*v)).collect();

        let mut l_mask = 0.0;
        let mut lambda = 0.0;
        let mut d_mask: Option<Vec<R>> = None;
        if let Some(f) = out.spatial_mask_f64() {
            l_mask = losses::spatial_mask_loss(&f);
            lambda = cfg.lambda_f;
            if cfg.lambda_f > 0.0 {
                d_mask = Some(losses::spatial_mask_upstream(&f, cfg.lambda_f).into_iter().map(R::c).collect());
            }
        }
        let global = cfg.mask_mode == TrainMaskMode::Global && !recovery;
        let soft: Vec<f64> = masks.iter().map(|m| m.soft).collect();
        if global {
            l_mask = losses::global_mask_loss(&soft, 1.0)?;
            lambda = cfg.lambda_m;
        }
        let report = LossReport::compose(rgb, l_mask, lambda);
        if !report.total.is_finite() {
            return Err(non_finite(iteration, "loss", &report, &scene));
        }

        let acc = backward(&out, &d_rgb, d_mask.as_deref(), opts.alpha_max, opts.eps_inverse, &bopts)?;
        let mut grads = scene_gradients(&scene, cam, &out, &acc, &masks);
        if global && cfg.lambda_m > 0.0 {
            let g = losses::global_mask_loss_grad(&soft, cfg.lambda_m);
            for ((p, gi), (m, gs)) in grads.params.iter_mut().zip(&g).zip(masks.iter().zip(&scene.gaussians)) {
                if gs.mask_logit.abs() <= LOGIT_CLAMP {
                    p[layout::MASK] += gi * m.dsoft_dlogit();
                }
            }
        }
        if grads.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(non_finite(iteration, "gradient", &report, &scene));
        }
        if !recovery {
            for (g, (&vis, &norm)) in scene.gaussians.iter().zip(grads.visible.iter().zip(&grads.screen_grad_norm)) {
                if vis {
                    stats.record(g.id, norm);
                }
            }
        }
        let lr = learning_rates(cfg, iteration, extent, recovery);
        adam.step(&mut scene, &grads.params, &lr);
        let diverged = scene.gaussians.iter().any(|g| match activate(g, scene.sh_degree) {
            Ok(a) => a.covariance.iter().flatten().any(|v| !v.is_finite()),
            Err(_) => true,
        });
        if diverged {
            return Err(non_finite(iteration, "parameter update", &report, &scene));
        }

        let actions = actions_at(iteration, sched);
        if actions.densify {
            let r = schedule::densify(&mut scene, &mut stats, sched, extent, &mut rng);
            for id in &r.fresh {
                adam.reset(*id);
            }
            metrics.push(MetricsRecord::Densify {
                iteration,
                before: r.before,
                after: r.after,
                cloned: r.cloned,
                split: r.split,
            });
        }
        if actions.prune {
            let r = schedule::prune(&mut scene, &mut rng, sched.prune_samples)?;
            adam.retain(&scene);
            metrics.push(MetricsRecord::Prune {
                iteration,
                before: r.before,
                after: r.survivors,
                removed_checksum: format!("{:016x}", r.checksum),
            });
        }
        if actions.opacity_reset {
            let changed = schedule::reset_opacity(&mut scene);
            for id in &changed {
                adam.reset(*id);
            }
            metrics.push(MetricsRecord::OpacityReset {
                iteration,
                changed: changed.len(),
            });
        }
        counts.push(scene.len());

        if iteration % cfg.eval_interval == 0 || iteration == sched.end() {
            let ev = evaluate(&scene, synth, &opts)?;
            metrics.push(MetricsRecord::Eval {
                iteration,
                gaussian_count: scene.len(),
                lambda: report.lambda_used,
                loss: report.total,
                l_rgb: report.l_rgb,
                l_mask: report.l_mask,
                psnr: ev.psnr,
                ssim: ev.ssim,
                l1: ev.l1,
                mean_mask_probability: scene.gaussians.iter().map(|g| g.mask_probability()).sum::<f64>()
                    / scene.len() as f64,
            });
        }
    }
    let final_eval = evaluate(&scene, synth, &opts)?;
    Ok(TrainResult {
        scene,
        metrics,
        counts,
        final_eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}
