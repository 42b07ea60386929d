use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gradients::{fd_oracle, grad_mask, grad_rgb, FragmentGrad, FD_STEP};
use crate::rasterizer::{ray_mask, trace_ray, MaskMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub rays: usize,
    pub max_fragments: usize,
    pub seed: u64,
    pub eps_inverse: f64,
    pub step: f64,
    pub rel_tol: f64,
    /// Gradients below `small` are compared in absolute terms against
    /// `abs_tol`.
    pub abs_tol: f64,
    pub small: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            rays: 1000,
            max_fragments: 64,
            seed: 0,
            eps_inverse: 1e-6,
            step: FD_STEP,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            small: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub target: String,
    pub rays: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error_small: f64,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, target: &str) -> Option<&VerifyRow> {
        self.rows.iter().find(|r| r.target == target)
    }
}

struct Errors {
    rel: f64,
    abs_small: f64,
    coords: usize,
}

impl Errors {
    fn new() -> Self {
        Errors {
            rel: 0.0,
            abs_small: 0.0,
            coords: 0,
        }
    }

    fn add(&mut self, analytic: f64, numeric: f64, small: f64) {
        self.coords += 1;
        let diff = (analytic - numeric).abs();
        if analytic.abs() < small {
            self.abs_small = self.abs_small.max(diff);
        } else {
            self.rel = self.rel.max(diff / analytic.abs());
        }
    }
}

fn random_ray(rng: &mut ChaCha8Rng, max_n: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(1..=max_n);
    let alphas = (0..n).map(|_| rng.random_range(0.01..=0.99)).collect();
    let masks = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    (alphas, masks)
}

fn finish(target: &str, cfg: &VerifyConfig, e: Errors, start: Instant) -> VerifyRow {
    VerifyRow {
        target: target.to_string(),
        rays: cfg.rays,
        coordinates: e.coords,
        max_rel_error: e.rel,
        max_abs_error_small: e.abs_small,
        passed: e.rel <= cfg.rel_tol && e.abs_small <= cfg.abs_tol,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Compares the analytic mask and colour gradients against central
/// differences on random rays with relaxed masks.
pub fn verify_gradients(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut rows = Vec::new();
    for mode in MaskMode::SPATIAL {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut errs = Errors::new();
        for _ in 0..cfg.rays {
            let (alphas, masks) = random_ray(&mut rng, cfg.max_fragments);
            let ray = trace_ray(&alphas, &masks);
            let mut analytic = vec![0.0; ray.len()];
            grad_mask(mode, &ray, cfg.eps_inverse, &mut analytic);
            let numeric = fd_oracle(|m| ray_mask(mode, &trace_ray(&alphas, m), cfg.eps_inverse), &masks, cfg.step)?;
            for (a, n) in analytic.iter().zip(&numeric) {
                errs.add(*a, *n, cfg.small);
            }
        }
        rows.push(finish(mode.name(), cfg, errs, start));
    }

    // Colour path: opacities and masks of a ray with random colours,
    // contracted with a random upstream gradient.
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0_10_25);
    let mut errs = Errors::new();
    for _ in 0..cfg.rays {
        let (alphas, masks) = random_ray(&mut rng, cfg.max_fragments);
        let n = alphas.len();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let up: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let forward = |p: &[f64]| {
            let ray = trace_ray(&p[..n], &p[n..]);
            ray.iter()
                .map(|e| {
                    let c = colors[e.splat as usize];
                    e.mask * e.alpha * e.transmittance * (up[0] * c[0] + up[1] * c[1] + up[2] * c[2])
                })
                .sum::<f64>()
        };
        let params: Vec<f64> = alphas.iter().chain(&masks).copied().collect();
        let numeric = fd_oracle(forward, &params, cfg.step)?;
        let ray = trace_ray(&alphas, &masks);
        let mut g = vec![FragmentGrad::<f64>::default(); n];
        grad_rgb(&ray, |s| colors[s as usize], up, &mut g);
        for i in 0..n {
            errs.add(g[i].d_alpha, numeric[i], cfg.small);
            errs.add(g[i].d_mask, numeric[n + i], cfg.small);
        }
    }
    rows.push(finish("rgb", cfg, errs, start));
    Ok(VerifyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let cfg = VerifyConfig {
            rays: 50,
            max_fragments: 16,
            ..Default::default()
        };
        let rep = verify_gradients(&cfg).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert!(rep.passed(), "{rep:?}");
    }
}
