//! Scene representation, parameter activations and stochastic mask sampling.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};

pub type GaussianId = u64;

/// Logits are clamped to this magnitude before any sigmoid.
pub const LOGIT_CLAMP: f64 = 20.0;

/// Real spherical-harmonics constant for the degree-1 band.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const MAX_SH_COEFFS: usize = 4;

/// Flattened per-Gaussian parameter block used by the optimizer.
pub const PARAM_COUNT: usize = 24;

pub mod layout {
    use std::ops::Range;

    pub const POSITION: Range<usize> = 0..3;
    pub const LOG_SCALE: Range<usize> = 3..6;
    pub const ROTATION: Range<usize> = 6..10;
    pub const OPACITY: usize = 10;
    pub const COLOR: Range<usize> = 11..23;
    pub const MASK: usize = 23;
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
pub fn clamp_logit(x: f64) -> f64 {
    x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Number of colour coefficients per channel for an SH degree.
#[inline]
pub fn sh_coeff_count(degree: u8) -> usize {
    (degree as usize + 1) * (degree as usize + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub id: GaussianId,
    pub position: Vec3,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vec3,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// SH coefficients, one RGB triple per basis function. Index 0 is the
    /// plain colour; 1..4 are the degree-1 band and are ignored at degree 0.
    pub color: [[f64; 3]; MAX_SH_COEFFS],
    pub mask_logit: f64,
}

impl Gaussian3D {
    pub fn new(position: Vec3, log_scale: Vec3, rotation: [f64; 4], opacity_logit: f64, rgb: [f64; 3]) -> Self {
        let mut color = [[0.0; 3]; MAX_SH_COEFFS];
        color[0] = rgb;
        Gaussian3D {
            id: 0,
            position,
            log_scale,
            rotation,
            opacity_logit,
            color,
            mask_logit: LOGIT_CLAMP,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(clamp_logit(self.opacity_logit))
    }

    pub fn mask_probability(&self) -> f64 {
        sigmoid(clamp_logit(self.mask_logit))
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn to_params(&self) -> [f64; PARAM_COUNT] {
        let mut p = [0.0; PARAM_COUNT];
        p[layout::POSITION].copy_from_slice(&self.position);
        p[layout::LOG_SCALE].copy_from_slice(&self.log_scale);
        p[layout::ROTATION].copy_from_slice(&self.rotation);
        p[layout::OPACITY] = self.opacity_logit;
        for (k, c) in self.color.iter().enumerate() {
            p[layout::COLOR.start + 3 * k..layout::COLOR.start + 3 * k + 3].copy_from_slice(c);
        }
        p[layout::MASK] = self.mask_logit;
        p
    }

    /// Writes a parameter block back, renormalizing the rotation.
    pub fn set_params(&mut self, p: &[f64; PARAM_COUNT]) {
        self.position.copy_from_slice(&p[layout::POSITION]);
        self.log_scale.copy_from_slice(&p[layout::LOG_SCALE]);
        let mut q = [0.0; 4];
        q.copy_from_slice(&p[layout::ROTATION]);
        self.rotation = if linalg::quat_norm(q) > 1e-12 {
            linalg::quat_normalize(q)
        } else {
            [1.0, 0.0, 0.0, 0.0]
        };
        self.opacity_logit = p[layout::OPACITY];
        for k in 0..MAX_SH_COEFFS {
            let s = layout::COLOR.start + 3 * k;
            self.color[k].copy_from_slice(&p[s..s + 3]);
        }
        self.mask_logit = p[layout::MASK];
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self.to_params().iter().all(|v| v.is_finite());
        if finite {
            Ok(())
        } else {
            Err(Error::Parameter {
                id: self.id,
                reason: "non-finite parameter".into(),
            })
        }
    }
}

/// An ordered set of Gaussians with stable identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gaussians: Vec<Gaussian3D>,
    pub sh_degree: u8,
    next_id: GaussianId,
}

impl Scene {
    pub fn new(sh_degree: u8) -> Self {
        Scene {
            gaussians: Vec::new(),
            sh_degree,
            next_id: 0,
        }
    }

    pub fn from_gaussians(sh_degree: u8, gaussians: impl IntoIterator<Item = Gaussian3D>) -> Self {
        let mut scene = Scene::new(sh_degree);
        for g in gaussians {
            scene.push(g);
        }
        scene
    }

    /// Appends a Gaussian under a fresh identity and returns it.
    pub fn push(&mut self, mut g: Gaussian3D) -> GaussianId {
        let id = self.allocate_id();
        g.id = id;
        self.gaussians.push(g);
        id
    }

    pub fn allocate_id(&mut self) -> GaussianId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Ensures future ids start no lower than `next`.
    pub(crate) fn reserve_ids(&mut self, next: GaussianId) {
        self.next_id = self.next_id.max(next);
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 1 {
            return Err(Error::invalid(format!("sh_degree {} unsupported (max 1)", self.sh_degree)));
        }
        self.gaussians.iter().try_for_each(Gaussian3D::check_finite)
    }
}

/// Parameters after their activation functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGaussian {
    pub id: GaussianId,
    pub position: Vec3,
    pub scale: Vec3,
    /// Rotation matrix of the normalized quaternion.
    pub rotation: Mat3,
    pub covariance: Mat3,
    pub opacity: f64,
    pub mask_probability: f64,
    pub color: [[f64; 3]; MAX_SH_COEFFS],
    pub sh_degree: u8,
}

pub fn activate(g: &Gaussian3D, sh_degree: u8) -> Result<ActivatedGaussian> {
    g.check_finite()?;
    let qn = linalg::quat_norm(g.rotation);
    if qn < 1e-12 {
        return Err(Error::Parameter {
            id: g.id,
            reason: "zero-norm rotation".into(),
        });
    }
    let rotation = linalg::quat_to_mat(linalg::quat_normalize(g.rotation));
    let scale = g.scale();
    let mut m = rotation;
    for row in m.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= scale[k];
        }
    }
    let covariance = linalg::mat_mul(&m, &linalg::transpose(&m));
    Ok(ActivatedGaussian {
        id: g.id,
        position: g.position,
        scale,
        rotation,
        covariance,
        opacity: g.opacity(),
        mask_probability: g.mask_probability(),
        color: g.color,
        sh_degree,
    })
}

/// Colour seen along `dir` (unit vector from the camera centre to the
/// Gaussian), clamped at zero.
pub fn eval_color(color: &[[f64; 3]; MAX_SH_COEFFS], sh_degree: u8, dir: Vec3) -> [f64; 3] {
    let raw = eval_color_raw(color, sh_degree, dir);
    raw.map(|v| v.max(0.0))
}

pub(crate) fn eval_color_raw(color: &[[f64; 3]; MAX_SH_COEFFS], sh_degree: u8, dir: Vec3) -> [f64; 3] {
    let mut out = color[0];
    if sh_degree >= 1 {
        let basis = sh1_basis(dir);
        for ch in 0..3 {
            for k in 0..3 {
                out[ch] += basis[k] * color[k + 1][ch];
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sh1_basis(dir: Vec3) -> [f64; 3] {
    [-SH_C1 * dir[1], SH_C1 * dir[2], -SH_C1 * dir[0]]
}

/// One stochastic mask draw: `hard` gates compositing, `soft` carries the
/// gradient (straight-through).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSample {
    pub hard: f64,
    pub soft: f64,
    pub temperature: f64,
}

impl MaskSample {
    /// Deterministically-on mask. Its soft derivative is zero.
    pub const ON: MaskSample = MaskSample {
        hard: 1.0,
        soft: 1.0,
        temperature: 1.0,
    };

    pub const OFF: MaskSample = MaskSample {
        hard: 0.0,
        soft: 0.0,
        temperature: 1.0,
    };

    /// d(soft)/d(mask_logit); by the straight-through rule this is also the
    /// derivative used for `hard`.
    #[inline]
    pub fn dsoft_dlogit(&self) -> f64 {
        self.soft * (1.0 - self.soft) / self.temperature
    }
}

/// Gumbel-sigmoid (binary Gumbel-softmax) sample with hard straight-through.
pub fn sample_mask<G: Rng + ?Sized>(mask_logit: f64, temperature: f64, rng: &mut G) -> MaskSample {
    debug_assert!(temperature > 0.0);
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let g0: f64 = gumbel.sample(rng);
    let g1: f64 = gumbel.sample(rng);
    let soft = sigmoid((clamp_logit(mask_logit) + g1 - g0) / temperature);
    MaskSample {
        hard: if soft >= 0.5 { 1.0 } else { 0.0 },
        soft,
        temperature,
    }
}

/// Plain Bernoulli draw from the mask probability (used by pruning).
pub fn bernoulli_mask<G: Rng + ?Sized>(mask_logit: f64, rng: &mut G) -> bool {
    let p = sigmoid(clamp_logit(mask_logit));
    rng.random::<f64>() < p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> Gaussian3D {
        Gaussian3D::new([0.0; 3], [0.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, [0.5; 3])
    }

    #[test]
    fn identity_covariance() {
        let a = activate(&unit(), 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((a.covariance[i][j] - want).abs() < 1e-15);
            }
        }
        assert_eq!(a.opacity, 0.5);
    }

    #[test]
    fn scaled_axis_covariance() {
        let mut g = unit();
        g.log_scale = [2f64.ln(), 0.0, 0.0];
        let a = activate(&g, 0).unwrap();
        assert!((a.covariance[0][0] - 4.0).abs() < 1e-12);
        assert!((a.covariance[1][1] - 1.0).abs() < 1e-12);
        assert!((a.covariance[2][2] - 1.0).abs() < 1e-12);
        assert!(a.covariance[0][1].abs() < 1e-12);
    }

    #[test]
    fn covariance_is_spd_for_rotated_gaussian() {
        let mut g = unit();
        g.log_scale = [-1.0, 0.3, -2.0];
        g.rotation = linalg::quat_normalize([0.4, 0.5, -0.2, 0.7]);
        let c = activate(&g, 0).unwrap().covariance;
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - c[j][i]).abs() < 1e-14);
            }
        }
        let d1 = c[0][0];
        let d2 = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let d3 = c[0][0] * (c[1][1] * c[2][2] - c[1][2] * c[2][1])
            - c[0][1] * (c[1][0] * c[2][2] - c[1][2] * c[2][0])
            + c[0][2] * (c[1][0] * c[2][1] - c[1][1] * c[2][0]);
        assert!(d1 > 0.0 && d2 > 0.0 && d3 > 0.0);
    }

    #[test]
    fn non_finite_parameter_names_the_gaussian() {
        let mut g = unit();
        g.id = 17;
        g.position[1] = f64::NAN;
        match activate(&g, 0) {
            Err(Error::Parameter { id, .. }) => assert_eq!(id, 17),
            other => panic!("expected parameter error, got {other:?}"),
        }
    }

    #[test]
    fn saturated_logits_are_deterministic_in_practice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let on = (0..100_000).filter(|_| sample_mask(20.0, 0.5, &mut rng).hard == 1.0).count();
        assert_eq!(on, 100_000);
        let on = (0..100_000).filter(|_| sample_mask(-20.0, 0.5, &mut rng).hard == 1.0).count();
        assert_eq!(on, 0);
        // Clamp keeps sigmoid finite for absurd logits.
        let s = sample_mask(1e9, 0.5, &mut rng);
        assert!(s.soft.is_finite() && s.hard == 1.0);
    }

    #[test]
    fn zero_logit_is_a_fair_coin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_mask(0.0, 0.5, &mut rng).hard).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn hard_sample_matches_mask_probability() {
        // P(logit + g1 - g0 >= 0) = sigmoid(logit): the logistic difference of Gumbels.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &l in &[-2.0, 1.0, 3.0] {
            let n = 200_000;
            let mean = (0..n).map(|_| sample_mask(l, 0.5, &mut rng).hard).sum::<f64>() / n as f64;
            assert!((mean - sigmoid(l)).abs() < 0.005, "logit {l}: {mean}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|i| sample_mask(i as f64 * 0.1 - 3.0, 0.5, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn params_round_trip_renormalizes_rotation() {
        let mut g = unit();
        g.color[2] = [0.1, 0.2, 0.3];
        let mut p = g.to_params();
        p[layout::ROTATION.start] = 2.0;
        g.set_params(&p);
        assert!((linalg::quat_norm(g.rotation) - 1.0).abs() < 1e-12);
        assert_eq!(g.color[2], [0.1, 0.2, 0.3]);
    }

    #[test]
    fn degree_one_color_depends_on_direction() {
        let mut color = [[0.0; 3]; MAX_SH_COEFFS];
        color[0] = [0.5; 3];
        color[3] = [1.0, 0.0, 0.0];
        let a = eval_color(&color, 1, [1.0, 0.0, 0.0]);
        let b = eval_color(&color, 1, [-1.0, 0.0, 0.0]);
        assert!((a[0] - (0.5 - SH_C1)).abs() < 1e-12);
        assert!((b[0] - (0.5 + SH_C1)).abs() < 1e-12);
        assert_eq!(eval_color(&color, 0, [1.0, 0.0, 0.0]), [0.5; 3]);
    }
}
