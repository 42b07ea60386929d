//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatmask::model::{logit, Gaussian3D, MaskSample, Scene};
use splatmask::Camera;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera on the -z axis looking at the origin.
pub fn front_camera(width: usize, height: usize, focal: f64) -> Camera {
    Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], focal, focal, width, height, 0.1, 100.0).unwrap()
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, sh_degree: u8) -> Scene {
    Scene::from_gaussians(
        sh_degree,
        (0..n).map(|_| {
            let position = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
            let log_scale = std::array::from_fn(|_| rng.random_range(-3.0..-1.2));
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
            let mut g = Gaussian3D::new(
                position,
                log_scale,
                q.map(|v| v / norm),
                logit(rng.random_range(0.2..0.97)),
                std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            );
            if sh_degree > 0 {
                for k in 1..4 {
                    g.color[k] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
                }
            }
            g
        }),
    )
}

pub fn random_hard_masks(rng: &mut ChaCha8Rng, n: usize, p_on: f64) -> Vec<MaskSample> {
    (0..n)
        .map(|_| if rng.random_bool(p_on) { MaskSample::ON } else { MaskSample::OFF })
        .collect()
}

/// Continuous mask values passed through the `hard` slot.
pub fn relaxed_masks(values: &[f64]) -> Vec<MaskSample> {
    values
        .iter()
        .map(|&m| MaskSample {
            hard: m,
            soft: m,
            temperature: 1.0,
        })
        .collect()
}

/// A splat computed without the library's projection code.
#[derive(Debug, Clone)]
pub struct RefSplat {
    pub index: usize,
    pub id: u64,
    pub depth: f64,
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn quat_matrix(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// EWA projection written out directly: Σ = R S Sᵀ Rᵀ, Σ2 = J W Σ Wᵀ Jᵀ + 0.3 I.
pub fn reference_splats(scene: &Scene, cam: &Camera) -> Vec<RefSplat> {
    let m = cam.world_to_cam;
    let mut out = Vec::new();
    for (index, g) in scene.gaussians.iter().enumerate() {
        let p = g.position;
        let pc: [f64; 3] = std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3]);
        let z = pc[2];
        if z < cam.near || z > cam.far {
            continue;
        }
        let r = quat_matrix(g.rotation);
        let s = g.log_scale.map(f64::exp);
        let mut sigma = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                sigma[i][j] = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
            }
        }
        let jac = [
            [cam.fx / z, 0.0, -cam.fx * pc[0] / (z * z)],
            [0.0, cam.fy / z, -cam.fy * pc[1] / (z * z)],
        ];
        let mut t = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                t[i][j] = (0..3).map(|k| jac[i][k] * m[k][j]).sum();
            }
        }
        let mut cov = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = (0..3)
                    .map(|a| (0..3).map(|b| t[i][a] * sigma[a][b] * t[j][b]).sum::<f64>())
                    .sum();
            }
        }
        let (a, b, c) = (cov[0][0] + 0.3, cov[0][1], cov[1][1] + 0.3);
        let det = a * c - b * b;
        let color = if scene.sh_degree == 0 {
            g.color[0]
        } else {
            // Camera centre is -Rᵀ t.
            let cc: [f64; 3] = std::array::from_fn(|j| -(0..3).map(|k| m[k][j] * m[k][3]).sum::<f64>());
            let d: [f64; 3] = std::array::from_fn(|k| p[k] - cc[k]);
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (x, y, zz) = (d[0] / n, d[1] / n, d[2] / n);
            let c1 = 0.488_602_511_902_919_9;
            std::array::from_fn(|ch| {
                let v = g.color[0][ch] - c1 * y * g.color[1][ch] + c1 * zz * g.color[2][ch] - c1 * x * g.color[3][ch];
                v.max(0.0)
            })
        };
        out.push(RefSplat {
            index,
            id: g.id,
            depth: z,
            mean: [cam.fx * pc[0] / z + cam.cx, cam.fy * pc[1] / z + cam.cy],
            conic: [c / det, -b / det, a / det],
            opacity: sigmoid(g.opacity_logit),
            color,
        });
    }
    out.sort_by(|x, y| x.depth.total_cmp(&y.depth).then(x.id.cmp(&y.id)));
    out
}

pub fn ref_alpha(s: &RefSplat, x: f64, y: f64) -> f64 {
    let dx = x - s.mean[0];
    let dy = y - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
    (s.opacity * power.exp()).min(0.999)
}

/// One pixel's ordered (splat index, α) list with an opacity skip and no early stop.
pub fn ref_fragments(splats: &[RefSplat], x: usize, y: usize, alpha_min: f64) -> Vec<(usize, f64)> {
    splats
        .iter()
        .map(|s| (s.index, ref_alpha(s, x as f64, y as f64)))
        .filter(|&(_, a)| a >= alpha_min && a > 0.0)
        .collect()
}

/// Plain scalar front-to-back compositing over the whole image.
pub fn ref_composite(scene: &Scene, cam: &Camera, masks: &[f64], alpha_min: f64) -> Vec<f64> {
    let splats = reference_splats(scene, cam);
    let mut rgb = vec![0.0; cam.width * cam.height * 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut t = 1.0;
            for (idx, a) in ref_fragments(&splats, x, y, alpha_min) {
                let s = splats.iter().find(|s| s.index == idx).unwrap();
                let m = masks[idx];
                for ch in 0..3 {
                    rgb[3 * (y * cam.width + x) + ch] += m * a * t * s.color[ch];
                }
                t *= 1.0 - m * a;
            }
        }
    }
    rgb
}
