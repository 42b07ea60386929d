//! Analytic backward passes: per-ray spatial-mask gradients for the three
//! forward designs, the RGB compositing chain rule, and the reduction into
//! per-Gaussian parameter gradients. [`fd_oracle`] is the independent
//! central-difference check used throughout the tests.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{layout, MaskSample, Scene, LOGIT_CLAMP, PARAM_COUNT};
use crate::projection::{project_backward, Camera, SplatGrad};
use crate::rasterizer::{ray_normalizer, render_mask_inverse, MaskMode, RenderOutputs, TraceEntry};
use crate::real::Real;

/// `factor · tail / (1 - α M)`, taken as zero when nothing lies behind (so a
/// fully opaque fragment with an empty tail stays finite).
#[inline]
fn behind<R: Real>(factor: R, alpha: R, mask: R, tail: R) -> R {
    if tail == R::zero() {
        R::zero()
    } else {
        factor / (R::one() - alpha * mask) * tail
    }
}

/// `∂F/∂M_i` for the proposed design, one backward sweep:
///
/// `(1/ln(1+N)) [(1 - α_i T_i) + α_i/(1 - α_i M_i) Σ_{j>i} M_j α_j T_j]`.
pub fn grad_mask_proposed<R: Real>(ray: &[TraceEntry<R>], out: &mut [R]) {
    let n = ray.len();
    if n == 0 {
        return;
    }
    let inv_norm = R::one() / ray_normalizer::<R>(n);
    let mut tail = R::zero();
    for i in (0..n).rev() {
        let e = &ray[i];
        let own = e.alpha * e.transmittance;
        let occlusion = behind(e.alpha, e.alpha, e.mask, tail);
        out[i] = (R::one() - own + occlusion) * inv_norm;
        tail += e.mask * own;
    }
}

/// `∂F_A/∂M_i` for inverse-importance weighting.
///
/// The pairwise form `(1/S)[w_i + Σ_{j>i} (M_j - F_A) ∂w_j/∂M_i]` factors
/// because `∂w_j/∂M_i = α_i/(1 - α_i M_i) · α_j T_j/(α_j T_j + ε)²`, so a
/// suffix sum over `j` gives O(N) per ray. [`grad_mask_inverse_pairwise`]
/// keeps the O(N²) form.
pub fn grad_mask_inverse<R: Real>(ray: &[TraceEntry<R>], eps: R, out: &mut [R]) {
    let n = ray.len();
    if n == 0 {
        return;
    }
    let f_a = render_mask_inverse(ray, eps);
    let s: R = ray.iter().map(|e| R::one() / (e.alpha * e.transmittance + eps)).sum();
    let mut tail = R::zero();
    for i in (0..n).rev() {
        let e = &ray[i];
        let imp = e.alpha * e.transmittance + eps;
        let w = R::one() / imp;
        out[i] = (w + behind(e.alpha, e.alpha, e.mask, tail)) / s;
        tail += (e.mask - f_a) * e.alpha * e.transmittance / (imp * imp);
    }
}

pub fn grad_mask_inverse_pairwise<R: Real>(ray: &[TraceEntry<R>], eps: R) -> Vec<R> {
    let n = ray.len();
    let f_a = render_mask_inverse(ray, eps);
    let w: Vec<R> = ray.iter().map(|e| R::one() / (e.alpha * e.transmittance + eps)).collect();
    let s: R = w.iter().copied().sum();
    (0..n)
        .map(|i| {
            let ei = &ray[i];
            let mut acc = w[i];
            for (j, ej) in ray.iter().enumerate().skip(i + 1) {
                let imp = ej.alpha * ej.transmittance + eps;
                let dw = ei.alpha * ej.alpha * ej.transmittance / ((R::one() - ei.alpha * ei.mask) * imp * imp);
                acc += (ej.mask - f_a) * dw;
                debug_assert!(j > i);
            }
            acc / s
        })
        .collect()
}

/// `∂F_B/∂M_i` for cumulative-transmittance masking:
///
/// `(1/ln(1+N)) [(1 - T_i) + α_i/(1 - α_i M_i) Σ_{j>i} M_j T_j]`.
pub fn grad_mask_cumulative<R: Real>(ray: &[TraceEntry<R>], out: &mut [R]) {
    let n = ray.len();
    if n == 0 {
        return;
    }
    let inv_norm = R::one() / ray_normalizer::<R>(n);
    let mut tail = R::zero();
    for i in (0..n).rev() {
        let e = &ray[i];
        let occlusion = behind(e.alpha, e.alpha, e.mask, tail);
        out[i] = (R::one() - e.transmittance + occlusion) * inv_norm;
        tail += e.mask * e.transmittance;
    }
}

/// Dispatches the mask gradient for `mode`; writes zeros for `None`.
pub fn grad_mask<R: Real>(mode: MaskMode, ray: &[TraceEntry<R>], eps: R, out: &mut [R]) {
    match mode {
        MaskMode::Proposed => grad_mask_proposed(ray, out),
        MaskMode::Inverse => grad_mask_inverse(ray, eps, out),
        MaskMode::Cumulative => grad_mask_cumulative(ray, out),
        MaskMode::None => out[..ray.len()].fill(R::zero()),
    }
}

/// `∂F/∂α_i` for each design, holding the masks fixed. Only used when the
/// mask loss is allowed to reach opacity and shape.
pub fn grad_mask_alpha<R: Real>(mode: MaskMode, ray: &[TraceEntry<R>], eps: R, out: &mut [R]) {
    let n = ray.len();
    if n == 0 {
        return;
    }
    match mode {
        MaskMode::Proposed => {
            let inv_norm = R::one() / ray_normalizer::<R>(n);
            let mut tail = R::zero();
            for i in (0..n).rev() {
                let e = &ray[i];
                let occ = behind(e.mask, e.alpha, e.mask, tail);
                out[i] = (occ - e.mask * e.transmittance) * inv_norm;
                tail += e.mask * e.alpha * e.transmittance;
            }
        }
        MaskMode::Cumulative => {
            let inv_norm = R::one() / ray_normalizer::<R>(n);
            let mut tail = R::zero();
            for i in (0..n).rev() {
                let e = &ray[i];
                out[i] = behind(e.mask, e.alpha, e.mask, tail) * inv_norm;
                tail += e.mask * e.transmittance;
            }
        }
        MaskMode::Inverse => {
            let f_a = render_mask_inverse(ray, eps);
            let s: R = ray.iter().map(|e| R::one() / (e.alpha * e.transmittance + eps)).sum();
            let mut tail = R::zero();
            for i in (0..n).rev() {
                let e = &ray[i];
                let imp = e.alpha * e.transmittance + eps;
                let own = (e.mask - f_a) * (-e.transmittance / (imp * imp));
                out[i] = (own + behind(e.mask, e.alpha, e.mask, tail)) / s;
                tail += (e.mask - f_a) * e.alpha * e.transmittance / (imp * imp);
            }
        }
        MaskMode::None => out[..n].fill(R::zero()),
    }
}

/// Central-difference gradient of `forward` at `params`.
pub fn fd_oracle<F>(forward: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let orig = work[k];
        work[k] = orig + h;
        let up = forward(&work);
        work[k] = orig - h;
        let down = forward(&work);
        work[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Oracle { coordinate: k });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Default finite-difference step at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Per-fragment derivatives of one pixel's colour, contracted with the
/// upstream gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FragmentGrad<R> {
    pub d_alpha: R,
    pub d_color: [R; 3],
    /// With respect to the (hard) mask value, for the straight-through path.
    pub d_mask: R,
}

/// Chain rule through masked front-to-back compositing for one ray.
pub fn grad_rgb<R: Real>(
    ray: &[TraceEntry<R>],
    color_of: impl Fn(u32) -> [R; 3],
    upstream: [R; 3],
    out: &mut [FragmentGrad<R>],
) {
    let mut tail = [R::zero(); 3];
    for i in (0..ray.len()).rev() {
        let e = &ray[i];
        let c = color_of(e.splat);
        let mut dot = R::zero();
        for ch in 0..3 {
            dot += upstream[ch] * (c[ch] * e.transmittance - behind(R::one(), e.alpha, e.mask, tail[ch]));
        }
        let w = e.mask * e.alpha * e.transmittance;
        out[i] = FragmentGrad {
            d_alpha: e.mask * dot,
            d_color: upstream.map(|g| g * w),
            d_mask: e.alpha * dot,
        };
        for ch in 0..3 {
            tail[ch] += w * c[ch];
        }
    }
}

/// Gradient sums for one splat of a render.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatAccum {
    /// `dL/dM` of the hard mask value.
    pub d_mask: f64,
    pub d_color: [f64; 3],
    /// With respect to the base (activated) opacity.
    pub d_opacity: f64,
    pub d_mean2d: [f64; 2],
    pub d_conic: [f64; 3],
}

impl SplatAccum {
    fn add(&mut self, o: &SplatAccum) {
        self.d_mask += o.d_mask;
        self.d_opacity += o.d_opacity;
        for k in 0..3 {
            self.d_color[k] += o.d_color[k];
            self.d_conic[k] += o.d_conic[k];
        }
        self.d_mean2d[0] += o.d_mean2d[0];
        self.d_mean2d[1] += o.d_mean2d[1];
    }
}

/// Per-splat gradient sums aligned with [`RenderOutputs::splats`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    pub splats: Vec<SplatAccum>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Let the spatial-mask loss reach α (and thence opacity and shape).
    pub mask_through_alpha: bool,
    pub parallel: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions {
            mask_through_alpha: false,
            parallel: true,
        }
    }
}

/// Backward pass of a render given `dL/d rgb` (`H×W×3`) and optionally
/// `dL/dF` (`H×W`). Per-tile partial sums are reduced in tile order, so the
/// result does not depend on thread scheduling.
pub fn backward<R: Real>(
    out: &RenderOutputs<R>,
    d_rgb: &[R],
    d_mask: Option<&[R]>,
    alpha_max: f64,
    eps_inverse: f64,
    opts: &BackwardOptions,
) -> Result<GradAccumulator> {
    let (w, h) = (out.width, out.height);
    if d_rgb.len() != w * h * 3 {
        return Err(Error::DimensionMismatch(format!("rgb gradient has {} values, expected {}", d_rgb.len(), w * h * 3)));
    }
    if let Some(dm) = d_mask {
        if dm.len() != w * h {
            return Err(Error::DimensionMismatch(format!("mask gradient has {} values, expected {}", dm.len(), w * h)));
        }
    }
    let mode = if d_mask.is_some() { out.mode } else { MaskMode::None };
    let grid = &out.tiles;
    let alpha_max = R::c(alpha_max);
    let eps = R::c(eps_inverse);
    let half = R::c(0.5);

    let run_tile = |t: usize| -> Vec<SplatAccum> {
        let bins = &grid.bins[t];
        let mut local = vec![SplatAccum::default(); bins.len()];
        let (x0, y0, x1, y1) = grid.tile_rect(t, w, h);
        let mut frag = Vec::new();
        let mut mgrad = Vec::new();
        let mut agrad = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * w + x;
                let ray = out.trace.pixel(x, y);
                if ray.is_empty() {
                    continue;
                }
                frag.resize(ray.len(), FragmentGrad::default());
                let up = [d_rgb[3 * p], d_rgb[3 * p + 1], d_rgb[3 * p + 2]];
                grad_rgb(ray, |s| out.splats[s as usize].view_color, up, &mut frag);
                if mode != MaskMode::None {
                    let df = d_mask.map(|d| d[p]).unwrap_or_else(R::zero);
                    mgrad.resize(ray.len(), R::zero());
                    grad_mask(mode, ray, eps, &mut mgrad);
                    for (f, g) in frag.iter_mut().zip(&mgrad) {
                        f.d_mask += df * *g;
                    }
                    if opts.mask_through_alpha {
                        agrad.resize(ray.len(), R::zero());
                        grad_mask_alpha(mode, ray, eps, &mut agrad);
                        for (f, g) in frag.iter_mut().zip(&agrad) {
                            f.d_alpha += df * *g;
                        }
                    }
                }
                let pos = [R::c(x as f64), R::c(y as f64)];
                for (e, f) in ray.iter().zip(&frag) {
                    let li = bins.binary_search(&e.splat).expect("trace splat binned in its tile");
                    let acc = &mut local[li];
                    acc.d_mask += f.d_mask.as_f64();
                    for ch in 0..3 {
                        acc.d_color[ch] += f.d_color[ch].as_f64();
                    }
                    let s = &out.splats[e.splat as usize];
                    let (g, [dx, dy]) = s.falloff(pos);
                    if s.base_opacity * g >= alpha_max {
                        continue;
                    }
                    acc.d_opacity += (f.d_alpha * g).as_f64();
                    let d_power = f.d_alpha * e.alpha;
                    let [a, b, c] = s.conic;
                    acc.d_mean2d[0] += (d_power * (a * dx + b * dy)).as_f64();
                    acc.d_mean2d[1] += (d_power * (b * dx + c * dy)).as_f64();
                    acc.d_conic[0] += (-d_power * half * dx * dx).as_f64();
                    acc.d_conic[1] += (-d_power * dx * dy).as_f64();
                    acc.d_conic[2] += (-d_power * half * dy * dy).as_f64();
                }
            }
        }
        local
    };
    let partials: Vec<Vec<SplatAccum>> = if opts.parallel {
        (0..grid.tile_count()).into_par_iter().map(run_tile).collect()
    } else {
        (0..grid.tile_count()).map(run_tile).collect()
    };
    let mut splats = vec![SplatAccum::default(); out.splats.len()];
    for (t, local) in partials.iter().enumerate() {
        for (li, &si) in grid.bins[t].iter().enumerate() {
            splats[si as usize].add(&local[li]);
        }
    }
    Ok(GradAccumulator { splats })
}

/// Parameter gradients for every Gaussian of the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub params: Vec<[f64; PARAM_COUNT]>,
    /// Norm of the screen-space mean gradient in normalized device units,
    /// the densification signal.
    pub screen_grad_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        SceneGradients {
            params: vec![[0.0; PARAM_COUNT]; n],
            screen_grad_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Pulls splat-space sums back to Gaussian parameters; the mask slot gets
/// the straight-through gradient `dL/dM · d soft/d logit`.
pub fn scene_gradients<R: Real>(
    scene: &Scene,
    cam: &Camera,
    out: &RenderOutputs<R>,
    acc: &GradAccumulator,
    masks: &[MaskSample],
) -> SceneGradients {
    let mut grads = SceneGradients::zeros(scene.len());
    let per_splat: Vec<(usize, [f64; PARAM_COUNT], f64)> = out
        .splats
        .par_iter()
        .zip(&acc.splats)
        .map(|(s, a)| {
            let g = &scene.gaussians[s.source];
            let sg = SplatGrad {
                mean2d: a.d_mean2d,
                conic: a.d_conic,
                color: a.d_color,
                opacity: a.d_opacity,
            };
            let mut p = project_backward(g, scene.sh_degree, cam, &sg);
            if g.mask_logit.abs() <= LOGIT_CLAMP {
                p[layout::MASK] = a.d_mask * masks[s.source].dsoft_dlogit();
            }
            let nx = a.d_mean2d[0] * 0.5 * cam.width as f64;
            let ny = a.d_mean2d[1] * 0.5 * cam.height as f64;
            (s.source, p, (nx * nx + ny * ny).sqrt())
        })
        .collect();
    for (src, p, norm) in per_splat {
        grads.params[src] = p;
        grads.screen_grad_norm[src] = norm;
        grads.visible[src] = true;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::{render_mask_cumulative, render_mask_proposed, trace_ray};

    fn two_fragments() -> Vec<TraceEntry<f64>> {
        trace_ray(&[0.5, 0.5], &[1.0, 1.0])
    }

    #[test]
    fn proposed_worked_values() {
        let mut g = [0.0; 2];
        grad_mask_proposed(&two_fragments(), &mut g);
        let ln3 = 3f64.ln();
        assert!((g[0] - 0.75 / ln3).abs() < 1e-12);
        assert!((g[1] - 0.75 / ln3).abs() < 1e-12);
        assert!((g[0] - 0.6827).abs() < 1e-4);
    }

    #[test]
    fn proposed_single_opaque_fragment_has_zero_gradient() {
        let ray = trace_ray(&[1.0], &[1.0]);
        let mut g = [9.0];
        grad_mask_proposed(&ray, &mut g);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn cumulative_worked_values() {
        let mut g = [0.0; 2];
        grad_mask_cumulative(&two_fragments(), &mut g);
        assert!((g[0] - 0.5 / 3f64.ln()).abs() < 1e-12);
        assert!((g[0] - 0.4551).abs() < 1e-4);
        // Front fragment: self term 1 - T_0 vanishes.
        let ray = trace_ray(&[0.3], &[1.0]);
        let mut g = [1.0];
        grad_mask_cumulative(&ray, &mut g);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn inverse_single_fragment_is_one() {
        let ray = trace_ray(&[0.37], &[1.0]);
        let mut g = [0.0f64];
        grad_mask_inverse(&ray, 1e-6, &mut g);
        assert!((g[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_stays_finite_for_vanishing_alpha() {
        let ray = trace_ray(&[1e-12, 1e-12, 1e-12], &[1.0, 0.0, 1.0]);
        let mut g = [0.0f64; 3];
        grad_mask_inverse(&ray, 1e-6, &mut g);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inverse_suffix_matches_pairwise() {
        let ray = trace_ray(&[0.2, 0.7, 0.4, 0.9, 0.1], &[0.3, 0.8, 0.6, 0.2, 0.9]);
        let mut fast = [0.0f64; 5];
        grad_mask_inverse(&ray, 1e-6, &mut fast);
        let slow = grad_mask_inverse_pairwise(&ray, 1e-6);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn alpha_gradients_match_finite_differences() {
        let alphas = [0.2, 0.7, 0.4, 0.9, 0.1];
        let masks = [0.3, 0.8, 0.6, 0.2, 0.9];
        let eps = 1e-3;
        for mode in MaskMode::SPATIAL {
            let f = |a: &[f64]| -> f64 {
                let r = trace_ray(a, &masks);
                match mode {
                    MaskMode::Proposed => render_mask_proposed(&r),
                    MaskMode::Inverse => render_mask_inverse(&r, eps),
                    _ => render_mask_cumulative(&r),
                }
            };
            let fd = fd_oracle(f, &alphas, 1e-6).unwrap();
            let mut g = [0.0; 5];
            grad_mask_alpha(mode, &trace_ray(&alphas, &masks), eps, &mut g);
            for k in 0..5 {
                assert!((fd[k] - g[k]).abs() < 1e-7 * fd[k].abs().max(1.0), "{mode:?} {k}: {} vs {}", fd[k], g[k]);
            }
        }
    }

    #[test]
    fn fd_oracle_basics() {
        let g = fd_oracle(|p| p[0] * p[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-9);
        let g = fd_oracle(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(fd_oracle(|p| 1.0 / p[0], &[0.0], 1e-5), Ok(_) | Err(Error::Oracle { .. })));
        assert!(matches!(fd_oracle(|p| (p[0] - 1.0).ln(), &[1.0], 1e-5), Err(Error::Oracle { coordinate: 0 })));
        assert!(fd_oracle(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rgb_single_fragment_chain_rule() {
        let ray = trace_ray(&[0.4], &[1.0]);
        let mut out = [FragmentGrad::<f64>::default()];
        grad_rgb(&ray, |_| [0.1, 0.2, 0.3], [1.0, 1.0, 1.0], &mut out);
        for ch in 0..3 {
            assert!((out[0].d_color[ch] - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn rgb_masked_fragment_keeps_mask_gradient() {
        let ray = trace_ray(&[0.4, 0.6], &[0.0, 1.0]);
        let mut out = [FragmentGrad::default(); 2];
        grad_rgb(&ray, |s| if s == 0 { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] }, [1.0, -1.0, 0.5], &mut out);
        assert_eq!(out[0].d_color, [0.0; 3]);
        assert_eq!(out[0].d_alpha, 0.0);
        assert!(out[0].d_mask != 0.0);
    }

    #[test]
    fn rgb_ray_gradients_match_finite_differences() {
        let alphas = [0.3, 0.6, 0.25, 0.8];
        let masks = [1.0, 0.4, 0.7, 1.0];
        let colors = [[0.9, 0.1, 0.3], [0.2, 0.8, 0.5], [0.4, 0.4, 0.9], [0.7, 0.6, 0.1]];
        let up = [0.7, -0.4, 1.2];
        let pixel = |a: &[f64], m: &[f64]| -> f64 {
            let r = trace_ray(a, m);
            let mut c = [0.0; 3];
            for e in &r {
                for ch in 0..3 {
                    c[ch] += e.mask * e.alpha * e.transmittance * colors[e.splat as usize][ch];
                }
            }
            (0..3).map(|ch| up[ch] * c[ch]).sum()
        };
        let mut out = [FragmentGrad::default(); 4];
        grad_rgb(&trace_ray(&alphas, &masks), |s| colors[s as usize], up, &mut out);
        let fd_a = fd_oracle(|a| pixel(a, &masks), &alphas, 1e-6).unwrap();
        let fd_m = fd_oracle(|m| pixel(&alphas, m), &masks, 1e-6).unwrap();
        for k in 0..4 {
            assert!((fd_a[k] - out[k].d_alpha).abs() < 1e-8);
            assert!((fd_m[k] - out[k].d_mask).abs() < 1e-8);
        }
    }
}
