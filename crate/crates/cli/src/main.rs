use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use splatmask::harness::{
    ablate_forwards, generate_scene, init_scene, sweep, train, verify_gradients, Precision, SyntheticScene,
    TrainConfig, TrainMaskMode, VerifyConfig,
};
use splatmask::imaging::Image;
use splatmask::io::{self, JsonLines};
use splatmask::model::{bernoulli_mask, MaskSample};
use splatmask::{render, MaskMode, RenderOptions, Scene};

#[derive(Parser)]
#[command(name = "splatmask", version, about = "Gaussian splat fitting with spatial mask regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check analytic ray gradients against finite differences.
    VerifyGradients {
        #[arg(long, default_value_t = 1000)]
        rays: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic teacher scene, its cameras and target images.
    GenerateScene {
        #[command(flatten)]
        common: Common,
    },
    /// Train a student scene against the synthetic targets.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train once per regularizer weight and tabulate the results.
    Sweep {
        /// Comma-separated weights, e.g. `1e-4,1.25e-4,1.6e-4,2e-4`.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the three spatial-mask designs side by side.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Render one view of a scene plus its spatial mask.
    Render {
        /// Camera table; the synthetic ring is used when omitted.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Draw masks from the scene's mask probabilities instead of all on.
        #[arg(long)]
        sample_masks: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Spatial-mask loss weight.
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Global mean-mask loss weight.
    #[arg(long)]
    lambda_m: Option<f64>,
    /// proposed | inverse | cumulative | global | none
    #[arg(long)]
    mask_mode: Option<TrainMaskMode>,
    /// Seeds the synthetic scene, the initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Main-phase iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Iterations after the main phase with masks fixed on.
    #[arg(long)]
    recovery_iters: Option<usize>,
    /// Scene file (`.txt` for the text form, anything else binary).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// f32 | f64
    #[arg(long)]
    precision: Option<Precision>,
    /// Serial rendering; metrics logs repeat byte for byte.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(mode) = self.mask_mode {
            let lambda = match mode {
                TrainMaskMode::Global => self.lambda_m.unwrap_or(if cfg.lambda_m > 0.0 { cfg.lambda_m } else { 1e-3 }),
                TrainMaskMode::None => 0.0,
                _ => self.lambda_f.unwrap_or(if cfg.lambda_f > 0.0 { cfg.lambda_f } else { 1e-4 }),
            };
            cfg = cfg.with_mode(mode, lambda);
        }
        if let Some(l) = self.lambda_f {
            cfg.lambda_f = l;
        }
        if let Some(l) = self.lambda_m {
            cfg.lambda_m = l;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iters {
            let s = &mut cfg.schedule;
            s.total_iters = n;
            s.densify_end = s.densify_end.min(n);
            s.densify_start = s.densify_start.min(s.densify_end.saturating_sub(1));
        }
        if let Some(n) = self.recovery_iters {
            cfg.schedule.recovery_iters = n;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

fn synthetic(cfg: &TrainConfig) -> Result<SyntheticScene> {
    Ok(generate_scene(cfg.seed, &cfg.scene)?)
}

fn initial_scene(common: &Common, cfg: &TrainConfig, synth: &SyntheticScene) -> Result<Scene> {
    match &common.scene {
        Some(p) => Ok(io::load_scene(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(init_scene(synth, &cfg.init, cfg.mask_logit_init, cfg.seed)?),
    }
}

fn write_mask(img: &Image, dir: &Path, stem: &str) -> Result<()> {
    io::write_png(&io::normalized_for_display(img), &dir.join(format!("{stem}.png")))?;
    io::write_plane(img, BufWriter::new(fs::File::create(dir.join(format!("{stem}.f32")))?))?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::VerifyGradients { rays, common } => {
            let vcfg = VerifyConfig {
                rays,
                seed: common.seed.unwrap_or(0),
                ..Default::default()
            };
            let report = verify_gradients(&vcfg)?;
            let dir = common.out_dir()?;
            let mut log = JsonLines::new(BufWriter::new(fs::File::create(dir.join("verify.jsonl"))?));
            println!("target       coords   max rel err   max abs err (small)  status   seconds");
            for r in &report.rows {
                log.write(r)?;
                println!(
                    "{:<11} {:>7}   {:>11.3e}   {:>19.3e}  {:<6}  {:>7.3}",
                    r.target,
                    r.coordinates,
                    r.max_rel_error,
                    r.max_abs_error_small,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.seconds
                );
            }
            log.flush()?;
            if !report.passed() {
                bail!("gradient check failed");
            }
        }
        Command::GenerateScene { common } => {
            let cfg = common.config()?;
            let synth = synthetic(&cfg)?;
            let dir = common.out_dir()?;
            io::save_scene(&synth.teacher, &dir.join("teacher.bin"))?;
            io::write_cameras(&synth.cameras, BufWriter::new(fs::File::create(dir.join("cameras.txt"))?))?;
            for (k, t) in synth.targets.iter().enumerate() {
                io::write_png(t, &dir.join(format!("target_{k:02}.png")))?;
                io::write_plane(t, BufWriter::new(fs::File::create(dir.join(format!("target_{k:02}.f32")))?))?;
            }
            println!(
                "{} teacher gaussians, {} cameras, {}x{} targets in {}",
                synth.teacher.len(),
                synth.cameras.len(),
                cfg.scene.width,
                cfg.scene.height,
                dir.display()
            );
        }
        Command::Train { common } => {
            let cfg = common.config()?;
            let synth = synthetic(&cfg)?;
            let init = initial_scene(&common, &cfg, &synth)?;
            let dir = common.out_dir()?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let start_count = init.len();
            let result = train(&cfg, &synth, init)?;
            fs::write(dir.join("metrics.jsonl"), result.metrics_jsonl()?)?;
            io::save_scene(&result.scene, &dir.join("scene.bin"))?;
            println!(
                "{} mode, lambda_f {:e}, lambda_m {:e}: {} -> {} gaussians, PSNR {:.3} dB, SSIM {:.4} ({:.1} s)",
                cfg.mask_mode.name(),
                cfg.lambda_f,
                cfg.lambda_m,
                start_count,
                result.scene.len(),
                result.final_eval.psnr,
                result.final_eval.ssim,
                result.seconds
            );
        }
        Command::Sweep { lambdas, common } => {
            let cfg = common.config()?;
            if cfg.mask_mode == TrainMaskMode::None {
                bail!("sweep needs a regularized mask mode");
            }
            let synth = synthetic(&cfg)?;
            let init = initial_scene(&common, &cfg, &synth)?;
            let result = sweep(&cfg, &lambdas, &synth, &init)?;
            let dir = common.out_dir()?;
            let table = result.table();
            fs::write(dir.join("sweep.txt"), &table)?;
            fs::write(dir.join("gaussian_counts.csv"), result.curves_csv())?;
            print!("{table}");
        }
        Command::Ablate { common } => {
            let cfg = common.config()?;
            let synth = synthetic(&cfg)?;
            let init = initial_scene(&common, &cfg, &synth)?;
            let result = ablate_forwards(&cfg, &synth, &init)?;
            let dir = common.out_dir()?;
            for (mode, img) in &result.mask_images {
                write_mask(img, dir, &format!("mask_{}", mode.name()))?;
            }
            let table = result.table();
            fs::write(dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Render {
            cameras,
            camera,
            sample_masks,
            common,
        } => {
            let cfg = common.config()?;
            let scene_path = common.scene.as_ref().context("render needs --scene")?;
            let scene = io::load_scene(scene_path).with_context(|| format!("loading {}", scene_path.display()))?;
            let cams = match cameras {
                Some(p) => io::read_cameras(fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?)?,
                None => splatmask::harness::ring_cameras(cfg.scene.n_cams, cfg.scene.width, cfg.scene.height)?,
            };
            let cam = cams.get(camera).with_context(|| format!("camera {camera} out of range ({} cameras)", cams.len()))?;
            let masks: Vec<MaskSample> = if sample_masks {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
                scene
                    .gaussians
                    .iter()
                    .map(|g| if bernoulli_mask(g.mask_logit, &mut rng) { MaskSample::ON } else { MaskSample::OFF })
                    .collect()
            } else {
                vec![MaskSample::ON; scene.len()]
            };
            let mode = cfg.mask_mode.spatial().unwrap_or(MaskMode::Proposed);
            let out = render::<f64>(&scene, cam, &masks, mode, &RenderOptions::default())?;
            let dir = common.out_dir()?;
            let rgb = Image::new(cam.width, cam.height, 3, out.rgb_f64())?;
            io::write_png(&rgb, &dir.join("render.png"))?;
            io::write_plane(&rgb, BufWriter::new(fs::File::create(dir.join("render.f32"))?))?;
            let mask = Image::new(cam.width, cam.height, 1, out.spatial_mask_f64().unwrap_or_default())?;
            write_mask(&mask, dir, &format!("mask_{}", mode.name()))?;
            println!("rendered camera {camera} ({} gaussians) to {}", scene.len(), dir.display());
        }
    }
    Ok(())
}
