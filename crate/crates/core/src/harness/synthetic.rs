use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{InitConfig, SceneConfig};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::linalg;
use crate::model::{logit, Gaussian3D, MaskSample, Scene};
use crate::projection::Camera;
use crate::rasterizer::{render, MaskMode, RenderOptions};

/// Camera ring radius and focal length factor. The focal length makes the
/// unit box span most of the frame.
const RING_RADIUS: f64 = 2.6;
const FOCAL_PER_WIDTH: f64 = 2.4;
const ELEVATION: f64 = 0.35;

/// Ground truth for self-supervised fitting.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub teacher: Scene,
    pub cameras: Vec<Camera>,
    pub targets: Vec<Image>,
    pub seed: u64,
}

impl SyntheticScene {
    /// Radius used to scale position learning rates and the split
    /// threshold: 1.1 times the largest camera distance from the camera
    /// centroid.
    pub fn extent(&self) -> f64 {
        let n = self.cameras.len() as f64;
        let centers: Vec<[f64; 3]> = self.cameras.iter().map(Camera::center).collect();
        let mut mean = [0.0; 3];
        for c in &centers {
            for k in 0..3 {
                mean[k] += c[k] / n;
            }
        }
        1.1 * centers.iter().map(|c| linalg::norm(linalg::sub(*c, mean))).fold(0.0, f64::max)
    }
}

fn random_rotation<G: Rng>(rng: &mut G) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        if linalg::quat_norm(q) > 1e-6 {
            return linalg::quat_normalize(q);
        }
    }
}

pub fn ring_cameras(n_cams: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    let f = FOCAL_PER_WIDTH * width.max(height) as f64;
    (0..n_cams)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n_cams as f64;
            let phi = if k % 2 == 0 { ELEVATION } else { -ELEVATION };
            let eye = [
                RING_RADIUS * phi.cos() * theta.cos(),
                RING_RADIUS * phi.sin(),
                RING_RADIUS * phi.cos() * theta.sin(),
            ];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], f, f, width, height, 0.1, 100.0)
        })
        .collect()
}

/// Renders every camera with all masks on.
pub fn render_targets(scene: &Scene, cameras: &[Camera], opts: &RenderOptions) -> Result<Vec<Image>> {
    let masks = vec![MaskSample::ON; scene.len()];
    cameras
        .iter()
        .map(|cam| {
            let out = render::<f64>(scene, cam, &masks, MaskMode::None, opts)?;
            Image::new(cam.width, cam.height, 3, out.rgb)
        })
        .collect()
}

/// Random teacher in the unit box seen by a ring of cameras.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SyntheticScene> {
    if cfg.n_teacher == 0 || cfg.n_cams < 2 {
        return Err(Error::invalid("generate_scene needs n_teacher >= 1 and n_cams >= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (0.03f64.ln(), 0.12f64.ln());
    let teacher = Scene::from_gaussians(
        0,
        (0..cfg.n_teacher).map(|_| {
            let position = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
            let log_scale = std::array::from_fn(|_| rng.random_range(lo..hi));
            let rotation = random_rotation(&mut rng);
            let opacity = rng.random_range(0.3..0.95);
            let rgb = std::array::from_fn(|_| rng.random_range(0.05..0.95));
            Gaussian3D::new(position, log_scale, rotation, logit(opacity), rgb)
        }),
    );
    let cameras = ring_cameras(cfg.n_cams, cfg.width, cfg.height)?;
    let targets = render_targets(&teacher, &cameras, &RenderOptions::default())?;
    Ok(SyntheticScene {
        teacher,
        cameras,
        targets,
        seed,
    })
}

/// Student initialization: a perturbed subsample of the teacher.
pub fn init_scene(synth: &SyntheticScene, cfg: &InitConfig, mask_logit: f64, seed: u64) -> Result<Scene> {
    if cfg.subsample == 0 {
        return Err(Error::invalid("subsample must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1417);
    let gaussians = synth.teacher.gaussians.iter().step_by(cfg.subsample).map(|t| {
        let mut g = t.clone();
        for k in 0..3 {
            g.position[k] += cfg.position_noise * rng.sample::<f64, _>(StandardNormal);
            g.log_scale[k] += cfg.log_scale_offset;
            let c = g.color[0][k] + cfg.color_noise * rng.sample::<f64, _>(StandardNormal);
            g.color[0][k] = c.clamp(0.0, 1.0);
        }
        g.opacity_logit = logit(cfg.opacity);
        g.mask_logit = mask_logit;
        g
    });
    let scene = Scene::from_gaussians(synth.teacher.sh_degree, gaussians);
    if scene.is_empty() {
        return Err(Error::DegenerateScene { count: 0 });
    }
    Ok(scene)
}

/// Fraction of pixels, over all cameras, reached by at least one fragment.
pub fn coverage(scene: &Scene, cameras: &[Camera], opts: &RenderOptions) -> Result<f64> {
    let masks = vec![MaskSample::ON; scene.len()];
    let mut covered = 0usize;
    let mut total = 0usize;
    for cam in cameras {
        let out = render::<f64>(scene, cam, &masks, MaskMode::None, opts)?;
        covered += out.frag_count.iter().filter(|&&n| n > 0).count();
        total += out.frag_count.len();
    }
    Ok(covered as f64 / total as f64)
}
