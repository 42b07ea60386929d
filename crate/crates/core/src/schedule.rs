//! Densification, stochastic mask pruning and their timing.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{bernoulli_mask, logit, GaussianId, Scene};

/// `Default` gives the full-length timing; fields missing from a config
/// file are filled from [`ScheduleConfig::desk`] instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default = "ScheduleConfig::desk")]
pub struct ScheduleConfig {
    pub densify_start: usize,
    pub densify_end: usize,
    pub densify_interval: usize,
    pub prune_interval_late: usize,
    pub total_iters: usize,
    pub recovery_iters: usize,
    pub prune_samples: usize,
    pub grad_threshold: f64,
    /// Splats whose largest axis exceeds this fraction of the scene extent
    /// are split rather than cloned.
    pub percent_dense: f64,
    pub split_factor: f64,
    /// Clamp opacities down to 0.01 every this many iterations (off if unset).
    pub opacity_reset_interval: Option<usize>,
    /// Densification stops adding Gaussians beyond this count.
    pub max_gaussians: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            densify_start: 500,
            densify_end: 15_000,
            densify_interval: 100,
            prune_interval_late: 1_000,
            total_iters: 30_000,
            recovery_iters: 5_000,
            prune_samples: 10,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            opacity_reset_interval: None,
            max_gaussians: 1_000_000,
        }
    }
}

impl ScheduleConfig {
    /// The default timing with every interval divided by ten, and a higher
    /// densification threshold to keep the model small.
    pub fn desk() -> Self {
        ScheduleConfig {
            densify_start: 50,
            densify_end: 1_500,
            densify_interval: 50,
            prune_interval_late: 100,
            total_iters: 3_000,
            recovery_iters: 500,
            grad_threshold: 1e-3,
            max_gaussians: 20_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.densify_start >= self.densify_end || self.densify_end > self.total_iters {
            return Err(Error::Config(format!(
                "need densify_start < densify_end <= total_iters, got {} / {} / {}",
                self.densify_start, self.densify_end, self.total_iters
            )));
        }
        if self.densify_interval == 0 || self.prune_interval_late == 0 {
            return Err(Error::Config("schedule intervals must be >= 1".into()));
        }
        if self.prune_samples == 0 {
            return Err(Error::Config("prune_samples must be >= 1".into()));
        }
        if self.opacity_reset_interval == Some(0) {
            return Err(Error::Config("opacity_reset_interval must be >= 1".into()));
        }
        if !(self.split_factor > 1.0) || !(self.percent_dense > 0.0) {
            return Err(Error::Config("split_factor must exceed 1 and percent_dense be positive".into()));
        }
        Ok(())
    }

    pub fn end(&self) -> usize {
        self.total_iters + self.recovery_iters
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Actions {
    pub densify: bool,
    pub prune: bool,
    pub recovery_only: bool,
    pub opacity_reset: bool,
}

impl Actions {
    pub fn is_empty(&self) -> bool {
        !(self.densify || self.prune || self.recovery_only || self.opacity_reset)
    }
}

pub fn actions_at(iter: usize, cfg: &ScheduleConfig) -> Actions {
    if iter > cfg.total_iters {
        return Actions {
            recovery_only: true,
            ..Default::default()
        };
    }
    let densify = iter >= cfg.densify_start && iter <= cfg.densify_end && iter % cfg.densify_interval == 0;
    let late_prune = iter > cfg.densify_end && iter % cfg.prune_interval_late == 0;
    let opacity_reset = match cfg.opacity_reset_interval {
        Some(k) => iter > 0 && iter <= cfg.densify_end && iter % k == 0,
        None => false,
    };
    Actions {
        densify,
        prune: densify || late_prune,
        recovery_only: false,
        opacity_reset,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PruneReport {
    pub before: usize,
    pub survivors: usize,
    pub removed: Vec<GaussianId>,
    pub checksum: u64,
}

/// FNV-1a over the little-endian ids.
pub fn id_checksum(ids: &[GaussianId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for b in id.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Removes every Gaussian whose mask stays off across `samples` Bernoulli
/// draws. Survivors are untouched. On error the scene is left as it was.
pub fn prune<G: Rng + ?Sized>(scene: &mut Scene, rng: &mut G, samples: usize) -> Result<PruneReport> {
    if samples == 0 {
        return Err(Error::invalid("prune_samples must be >= 1"));
    }
    let before = scene.len();
    let keep: Vec<bool> = scene
        .gaussians
        .iter()
        .map(|g| (0..samples).fold(false, |any, _| bernoulli_mask(g.mask_logit, rng) | any))
        .collect();
    let survivors = keep.iter().filter(|k| **k).count();
    if survivors == 0 && before > 0 {
        return Err(Error::DegenerateScene { count: before });
    }
    let removed: Vec<GaussianId> = scene
        .gaussians
        .iter()
        .zip(&keep)
        .filter(|(_, k)| !**k)
        .map(|(g, _)| g.id)
        .collect();
    let mut it = keep.iter();
    scene.gaussians.retain(|_| *it.next().unwrap());
    Ok(PruneReport {
        before,
        survivors,
        checksum: id_checksum(&removed),
        removed,
    })
}

/// Running screen-space gradient norms per Gaussian.
#[derive(Debug, Clone, Default)]
pub struct DensifyStats {
    accum: HashMap<GaussianId, (f64, u32)>,
}

impl DensifyStats {
    pub fn record(&mut self, id: GaussianId, grad_norm: f64) {
        let e = self.accum.entry(id).or_insert((0.0, 0));
        e.0 += grad_norm;
        e.1 += 1;
    }

    pub fn mean(&self, id: GaussianId) -> Option<f64> {
        self.accum.get(&id).filter(|e| e.1 > 0).map(|e| e.0 / e.1 as f64)
    }

    pub fn clear(&mut self) {
        self.accum.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub before: usize,
    pub after: usize,
    pub cloned: usize,
    pub split: usize,
    /// Ids whose optimizer state must start fresh (new and split Gaussians).
    #[serde(skip)]
    pub fresh: Vec<GaussianId>,
}

/// Clone or split every Gaussian whose mean gradient exceeds the threshold.
/// Clears `stats`.
pub fn densify<G: Rng + ?Sized>(
    scene: &mut Scene,
    stats: &mut DensifyStats,
    cfg: &ScheduleConfig,
    scene_extent: f64,
    rng: &mut G,
) -> DensifyReport {
    let before = scene.len();
    let mut cloned = 0;
    let mut split = 0;
    let mut fresh = Vec::new();
    let mut added = Vec::new();
    let size_limit = cfg.percent_dense * scene_extent;
    let n = scene.len();
    for i in 0..n {
        if before + added.len() >= cfg.max_gaussians {
            break;
        }
        let parent = &scene.gaussians[i];
        match stats.mean(parent.id) {
            Some(m) if m > cfg.grad_threshold => {}
            _ => continue,
        }
        let scale = parent.scale();
        let rot = linalg::quat_to_mat(parent.rotation);
        let mut offset = || {
            let z: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            linalg::mat_vec(&rot, [z[0] * scale[0], z[1] * scale[1], z[2] * scale[2]])
        };
        let max_scale = scale.iter().cloned().fold(f64::MIN, f64::max);
        if max_scale <= size_limit {
            let d = offset();
            let mut child = parent.clone();
            for k in 0..3 {
                child.position[k] += d[k];
            }
            added.push(child);
            cloned += 1;
        } else {
            let d0 = offset();
            let d1 = offset();
            let shrink = cfg.split_factor.ln();
            let mut a = parent.clone();
            let mut b = parent.clone();
            for k in 0..3 {
                a.position[k] += d0[k];
                b.position[k] += d1[k];
                a.log_scale[k] -= shrink;
                b.log_scale[k] -= shrink;
            }
            fresh.push(a.id);
            scene.gaussians[i] = a;
            added.push(b);
            split += 1;
        }
    }
    for g in added {
        fresh.push(scene.push(g));
    }
    stats.clear();
    DensifyReport {
        before,
        after: scene.len(),
        cloned,
        split,
        fresh,
    }
}

/// Pulls every opacity down to at most 0.01.
pub fn reset_opacity(scene: &mut Scene) -> Vec<GaussianId> {
    let cap = logit(0.01);
    let mut changed = Vec::new();
    for g in &mut scene.gaussians {
        if g.opacity_logit > cap {
            g.opacity_logit = cap;
            changed.push(g.id);
        }
    }
    changed
}

/// Survival bookkeeping shared by tests and the trainer.
pub fn ids(scene: &Scene) -> HashSet<GaussianId> {
    scene.gaussians.iter().map(|g| g.id).collect()
}
