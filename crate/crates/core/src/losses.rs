//! Reconstruction loss (L1 + D-SSIM), the global and spatial mask
//! regularizers, and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// How L1 and D-SSIM are combined into the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RgbLossKind {
    /// `L1 + (1 - SSIM)`.
    #[default]
    PlainSum,
    /// `(1 - w) L1 + w (1 - SSIM)`.
    Blend { ssim_weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgbLoss {
    pub l1: f64,
    pub ssim: f64,
    pub l_rgb: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub ssim: f64,
    pub l_rgb: f64,
    pub l_mask: f64,
    pub total: f64,
    pub lambda_used: f64,
}

impl LossReport {
    pub fn compose(rgb: RgbLoss, l_mask: f64, lambda: f64) -> Self {
        LossReport {
            l1: rgb.l1,
            ssim: rgb.ssim,
            l_rgb: rgb.l_rgb,
            l_mask,
            total: rgb.l_rgb + lambda * l_mask,
            lambda_used: lambda,
        }
    }
}

pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Window size actually used for an image: 11, shrunk to the largest odd
/// size that fits when the image is smaller.
pub fn ssim_window_for(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable 'valid' correlation of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * row[x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `ow × oh` map back to `w × h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Mean SSIM over all valid window positions and channels. With
/// `want_grad`, also returns `d mean_ssim / d a` (interleaved like `a`).
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    a.same_shape(b)?;
    if a.width == 0 || a.height == 0 || a.channels == 0 {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let (w, h) = (a.width, a.height);
    let k = gaussian_kernel(ssim_window_for(w, h), SSIM_SIGMA);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data.len()]);
    let positions = (w - k.len() + 1) * (h - k.len() + 1);
    let norm = 1.0 / (positions * a.channels) as f64;
    for c in 0..a.channels {
        let x = a.plane(c);
        let y = b.plane(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, w, h, &k);
        let mu_y = filter_valid(&y, w, h, &k);
        let e_xx = filter_valid(&xx, w, h, &k);
        let e_yy = filter_valid(&yy, w, h, &k);
        let e_xy = filter_valid(&xy, w, h, &k);
        let mut d_mu = vec![0.0; positions];
        let mut d_exx = vec![0.0; positions];
        let mut d_exy = vec![0.0; positions];
        for p in 0..positions {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let sxx = e_xx[p] - mx * mx;
            let syy = e_yy[p] - my * my;
            let sxy = e_xy[p] - mx * my;
            let a1 = 2.0 * mx * my + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx * mx + my * my + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                d_mu[p] = norm * ((2.0 * my * a2 - 2.0 * my * a1) / bb - s * (2.0 * mx / b1 - 2.0 * mx / b2));
                d_exx[p] = norm * (-s / b2);
                d_exy[p] = norm * (2.0 * a1 / bb);
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
            let g_xx = filter_valid_adjoint(&d_exx, w, h, &k);
            let g_xy = filter_valid_adjoint(&d_exy, w, h, &k);
            for q in 0..w * h {
                g[q * a.channels + c] = g_mu[q] + 2.0 * x[q] * g_xx[q] + y[q] * g_xy[q];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Gaussian-window SSIM (11×11, σ = 1.5, unit dynamic range), averaged over
/// valid window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / n)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

pub fn rgb_loss(rendered: &Image, target: &Image) -> Result<RgbLoss> {
    let l1 = l1(rendered, target)?;
    let s = ssim(rendered, target)?;
    Ok(RgbLoss {
        l1,
        ssim: s,
        l_rgb: l1 + (1.0 - s),
    })
}

/// Reconstruction loss under `kind` and its gradient with respect to the
/// rendered image.
pub fn rgb_loss_with_grad(rendered: &Image, target: &Image, kind: RgbLossKind) -> Result<(RgbLoss, Vec<f64>)> {
    let l1v = l1(rendered, target)?;
    let (s, ds) = ssim_with_grad(rendered, target)?;
    let (w1, ws) = match kind {
        RgbLossKind::PlainSum => (1.0, 1.0),
        RgbLossKind::Blend { ssim_weight } => (1.0 - ssim_weight, ssim_weight),
    };
    let n = rendered.data.len() as f64;
    let grad = rendered
        .data
        .iter()
        .zip(&target.data)
        .zip(&ds)
        .map(|((r, t), d)| {
            let sign = if r > t {
                1.0
            } else if r < t {
                -1.0
            } else {
                0.0
            };
            w1 * sign / n - ws * d
        })
        .collect();
    Ok((
        RgbLoss {
            l1: l1v,
            ssim: s,
            l_rgb: w1 * l1v + ws * (1.0 - s),
        },
        grad,
    ))
}

/// `λ_m · (mean M)²`, the global mean-mask penalty.
pub fn global_mask_loss(mask_values: &[f64], lambda_m: f64) -> Result<f64> {
    if mask_values.is_empty() {
        return Err(Error::invalid("global mask loss needs at least one gaussian"));
    }
    let mean = mask_values.iter().sum::<f64>() / mask_values.len() as f64;
    Ok(lambda_m * mean * mean)
}

/// Derivative of [`global_mask_loss`] with respect to each mask value.
pub fn global_mask_loss_grad(mask_values: &[f64], lambda_m: f64) -> Vec<f64> {
    let n = mask_values.len() as f64;
    let mean = mask_values.iter().sum::<f64>() / n;
    vec![2.0 * lambda_m * mean / n; mask_values.len()]
}

/// Mean energy of the spatial mask, `(1/HW) Σ F²`.
pub fn spatial_mask_loss(spatial_mask: &[f64]) -> f64 {
    if spatial_mask.is_empty() {
        return 0.0;
    }
    spatial_mask.iter().map(|f| f * f).sum::<f64>() / spatial_mask.len() as f64
}

/// Upstream gradient `λ_F · 2F/(HW)` into each pixel of the spatial mask.
pub fn spatial_mask_upstream(spatial_mask: &[f64], lambda_f: f64) -> Vec<f64> {
    let n = spatial_mask.len() as f64;
    spatial_mask.iter().map(|f| lambda_f * 2.0 * f / n).collect()
}

pub fn total_loss(l_rgb: f64, l_mask: f64, lambda_f: f64) -> Result<f64> {
    if !(lambda_f >= 0.0) {
        return Err(Error::invalid("lambda_F must be non-negative"));
    }
    Ok(l_rgb + lambda_f * l_mask)
}

/// `10 log10(1 / MSE)`; identical images give `+∞`.
pub fn psnr(rendered: &Image, target: &Image) -> Result<f64> {
    let m = mse(rendered, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}
