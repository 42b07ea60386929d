//! Pinhole camera and first-order (EWA) projection of 3D Gaussians to
//! screen-space splats, with the matching backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::model::{self, ActivatedGaussian, Gaussian3D, GaussianId, PARAM_COUNT};
use crate::real::Real;

/// Added to each diagonal entry of the projected covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;

/// Default opacity clamp and skip threshold.
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Rigid world-to-camera transform. The camera looks down +z with +x
    /// right and +y down in the image.
    pub world_to_cam: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        world_to_cam: [[f64; 4]; 4],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            world_to_cam,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// appears upwards in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let z = linalg::normalize(linalg::sub(target, eye));
        let up_ortho = linalg::sub(up, z.map(|v| v * linalg::dot(up, z)));
        if linalg::norm(up_ortho) < 1e-9 {
            return Err(Error::invalid("look_at: up vector parallel to view direction"));
        }
        let y = linalg::normalize(up_ortho).map(|v| -v);
        let x = linalg::cross(y, z);
        let rot = [x, y, z];
        let t = linalg::mat_vec(&rot, eye).map(|v| -v);
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&rot[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Camera::new(m, fx, fy, width as f64 / 2.0, height as f64 / 2.0, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera clip planes must satisfy 0 < near < far"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image dimensions must be non-zero"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.world_to_cam;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        [self.world_to_cam[0][3], self.world_to_cam[1][3], self.world_to_cam[2][3]]
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = self.rotation();
        let t = self.translation();
        let q = linalg::mat_vec(&r, p);
        [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        let rt = linalg::transpose(&self.rotation());
        linalg::mat_vec(&rt, self.translation()).map(|v| -v)
    }

    pub fn project_point(&self, p: Vec3) -> [f64; 2] {
        let c = self.to_camera(p);
        [self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy]
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D<R> {
    /// Pixel coordinates; pixel `(px, py)` has its centre at `(px, py)`.
    pub mean2d: [R; 2],
    /// Inverse projected covariance packed as `(a, b, c)` for
    /// `[[a, b], [b, c]]`.
    pub conic: [R; 3],
    pub depth: R,
    pub gaussian_id: GaussianId,
    /// Position of the source Gaussian in `Scene::gaussians`.
    pub source: usize,
    pub base_opacity: R,
    pub view_color: [R; 3],
    pub bounds: PixelRect,
}

impl Splat2D<f64> {
    pub fn cast<R: Real>(&self) -> Splat2D<R> {
        Splat2D {
            mean2d: self.mean2d.map(R::c),
            conic: self.conic.map(R::c),
            depth: R::c(self.depth),
            gaussian_id: self.gaussian_id,
            source: self.source,
            base_opacity: R::c(self.base_opacity),
            view_color: self.view_color.map(R::c),
            bounds: self.bounds,
        }
    }
}

impl<R: Real> Splat2D<R> {
    /// Gaussian falloff `exp(-½ dᵀ C d)` at pixel position `x`, with `d`.
    #[inline]
    pub fn falloff(&self, x: [R; 2]) -> (R, [R; 2]) {
        let dx = x[0] - self.mean2d[0];
        let dy = x[1] - self.mean2d[1];
        let [a, b, c] = self.conic;
        let half = R::c(0.5);
        let power = -(half * a * dx * dx + b * dx * dy + half * c * dy * dy);
        (power.exp(), [dx, dy])
    }
}

/// Opacity of a splat at pixel position `x` with the default clamp and
/// skip threshold (values below `1/255` are returned as zero).
pub fn eval_alpha<R: Real>(s: &Splat2D<R>, x: [R; 2]) -> R {
    eval_alpha_with(s, x, R::c(ALPHA_MIN), R::c(ALPHA_MAX))
}

pub fn eval_alpha_with<R: Real>(s: &Splat2D<R>, x: [R; 2], alpha_min: R, alpha_max: R) -> R {
    let (g, _) = s.falloff(x);
    let alpha = (s.base_opacity * g).min(alpha_max);
    if alpha < alpha_min {
        R::zero()
    } else {
        alpha
    }
}

/// Intermediates of the projection shared by forward and backward.
struct ProjectionState {
    p_cam: Vec3,
    /// `J · W`, the 2×3 map from world offsets to pixel offsets.
    jw: [[f64; 3]; 2],
    cov2d: [f64; 3],
    conic: [f64; 3],
}

fn projection_state(position: Vec3, covariance: &Mat3, cam: &Camera) -> Option<ProjectionState> {
    let p_cam = cam.to_camera(position);
    let z = p_cam[2];
    if !(z >= cam.near && z <= cam.far) {
        return None;
    }
    let j = [
        [cam.fx / z, 0.0, -cam.fx * p_cam[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * p_cam[1] / (z * z)],
    ];
    let w = cam.rotation();
    let mut jw = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jw[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    // Σ2 = (JW) Σ (JW)ᵀ
    let mut t_sigma = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t_sigma[r][c] = (0..3).map(|k| jw[r][k] * covariance[k][c]).sum();
        }
    }
    let entry = |r: usize, c: usize| -> f64 { (0..3).map(|k| t_sigma[r][k] * jw[c][k]).sum() };
    let a = entry(0, 0) + COV2D_FLOOR;
    let b = entry(0, 1);
    let c = entry(1, 1) + COV2D_FLOOR;
    let det = a * c - b * b;
    let conic = [c / det, -b / det, a / det];
    Some(ProjectionState {
        p_cam,
        jw,
        cov2d: [a, b, c],
        conic,
    })
}

/// Projects an activated Gaussian; `None` when it is clipped by the depth
/// planes or its footprint at opacity `alpha_cut` misses the image.
pub fn project_gaussian(g: &ActivatedGaussian, cam: &Camera) -> Result<Option<Splat2D<f64>>> {
    project_gaussian_with(g, cam, ALPHA_MIN, usize::MAX)
}

/// As [`project_gaussian`] with an explicit culling opacity. `source` is
/// recorded in the splat.
pub fn project_gaussian_with(
    g: &ActivatedGaussian,
    cam: &Camera,
    alpha_cut: f64,
    source: usize,
) -> Result<Option<Splat2D<f64>>> {
    let Some(st) = projection_state(g.position, &g.covariance, cam) else {
        return Ok(None);
    };
    let [a, b, c] = st.cov2d;
    let det = a * c - b * b;
    if !(det > 0.0 && det.is_finite()) {
        return Err(Error::Internal(format!(
            "gaussian {}: singular projected covariance (det {det})",
            g.id
        )));
    }
    if g.opacity <= alpha_cut {
        return Ok(None);
    }
    let z = st.p_cam[2];
    let mean = [cam.fx * st.p_cam[0] / z + cam.cx, cam.fy * st.p_cam[1] / z + cam.cy];

    // Every pixel with opacity ≥ alpha_cut lies inside dᵀ C d ≤ r².
    let r2 = 2.0 * (g.opacity / alpha_cut).ln();
    let ex = (r2 * a).sqrt();
    let ey = (r2 * c).sqrt();
    let Some(bounds) = clip_rect(mean, ex, ey, cam) else {
        return Ok(None);
    };

    let dir = linalg::normalize(linalg::sub(g.position, cam.center()));
    Ok(Some(Splat2D {
        mean2d: mean,
        conic: st.conic,
        depth: z,
        gaussian_id: g.id,
        source,
        base_opacity: g.opacity,
        view_color: model::eval_color(&g.color, g.sh_degree, dir),
        bounds,
    }))
}

fn clip_rect(mean: [f64; 2], ex: f64, ey: f64, cam: &Camera) -> Option<PixelRect> {
    let x0 = (mean[0] - ex).ceil();
    let x1 = (mean[0] + ex).floor();
    let y0 = (mean[1] - ey).ceil();
    let y1 = (mean[1] + ey).floor();
    let wmax = (cam.width - 1) as f64;
    let hmax = (cam.height - 1) as f64;
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 <= wmax && y0 <= hmax) || x0 > x1 || y0 > y1 {
        return None;
    }
    Some(PixelRect {
        x0: x0.max(0.0) as usize,
        y0: y0.max(0.0) as usize,
        x1: x1.min(wmax) as usize,
        y1: y1.min(hmax) as usize,
    })
}

/// Upstream gradient on one splat's screen-space quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    /// Derivatives with respect to the packed `(a, b, c)` conic entries
    /// (`b` counted once, although it appears twice in the quadratic form).
    pub conic: [f64; 3],
    pub color: [f64; 3],
    /// With respect to the activated (base) opacity.
    pub opacity: f64,
}

/// Chain rule from splat-space gradients back to the Gaussian's parameter
/// block (mask slot left zero).
pub fn project_backward(g: &Gaussian3D, sh_degree: u8, cam: &Camera, grad: &SplatGrad) -> [f64; PARAM_COUNT] {
    use model::layout;

    let mut out = [0.0; PARAM_COUNT];
    let q = linalg::quat_normalize(g.rotation);
    let rot = linalg::quat_to_mat(q);
    let s = g.scale();
    let mut m = rot;
    for row in m.iter_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v *= s[k];
        }
    }
    let sigma = linalg::mat_mul(&m, &linalg::transpose(&m));
    let Some(st) = projection_state(g.position, &sigma, cam) else {
        return out;
    };
    let [x, y, z] = st.p_cam;
    let (fx, fy) = (cam.fx, cam.fy);

    // Colour: coefficients and view direction.
    let center = cam.center();
    let v = linalg::sub(g.position, center);
    let vn = linalg::norm(v);
    let dir = v.map(|c| c / vn);
    let raw = model::eval_color_raw(&g.color, sh_degree, dir);
    let d_raw: [f64; 3] = std::array::from_fn(|ch| if raw[ch] > 0.0 { grad.color[ch] } else { 0.0 });
    out[layout::COLOR.start..layout::COLOR.start + 3].copy_from_slice(&d_raw);
    let mut d_pos = [0.0; 3];
    if sh_degree >= 1 {
        let basis = model::sh1_basis(dir);
        let mut d_basis = [0.0; 3];
        for k in 0..3 {
            let base = layout::COLOR.start + 3 * (k + 1);
            for ch in 0..3 {
                out[base + ch] = basis[k] * d_raw[ch];
                d_basis[k] += g.color[k + 1][ch] * d_raw[ch];
            }
        }
        let c1 = model::SH_C1;
        let d_dir = [-c1 * d_basis[2], -c1 * d_basis[0], c1 * d_basis[1]];
        let proj = linalg::dot(dir, d_dir);
        for k in 0..3 {
            d_pos[k] += (d_dir[k] - dir[k] * proj) / vn;
        }
    }

    // Opacity.
    if g.opacity_logit.abs() <= model::LOGIT_CLAMP {
        let o = g.opacity();
        out[layout::OPACITY] = grad.opacity * o * (1.0 - o);
    }

    // Conic -> projected covariance: dΣ2 = -C G C.
    let [ca, cb, cc] = st.conic;
    let cm = [[ca, cb], [cb, cc]];
    let gm = [[grad.conic[0], 0.5 * grad.conic[1]], [0.5 * grad.conic[1], grad.conic[2]]];
    let mut cg = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cg[i][j] = cm[i][0] * gm[0][j] + cm[i][1] * gm[1][j];
        }
    }
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            g2[i][j] = -(cg[i][0] * cm[0][j] + cg[i][1] * cm[1][j]);
        }
    }

    // Σ2 = T Σ Tᵀ: dΣ = Tᵀ G2 T, dT = 2 G2 T Σ.
    let t = st.jw;
    let mut g2t = [[0.0; 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            g2t[i][c] = g2[i][0] * t[0][c] + g2[i][1] * t[1][c];
        }
    }
    let mut d_sigma = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            d_sigma[r][c] = t[0][r] * g2t[0][c] + t[1][r] * g2t[1][c];
        }
    }
    let mut d_t = [[0.0; 3]; 2];
    for i in 0..2 {
        for c in 0..3 {
            d_t[i][c] = 2.0 * (0..3).map(|k| g2t[i][k] * sigma[k][c]).sum::<f64>();
        }
    }

    // T = J W: dJ = dT Wᵀ.
    let w = cam.rotation();
    let mut d_j = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            d_j[i][k] = (0..3).map(|c| d_t[i][c] * w[k][c]).sum();
        }
    }
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_pc = [0.0; 3];
    d_pc[0] += d_j[0][2] * (-fx / z2);
    d_pc[1] += d_j[1][2] * (-fy / z2);
    d_pc[2] += d_j[0][0] * (-fx / z2)
        + d_j[0][2] * (2.0 * fx * x / z3)
        + d_j[1][1] * (-fy / z2)
        + d_j[1][2] * (2.0 * fy * y / z3);

    // Mean.
    d_pc[0] += grad.mean2d[0] * fx / z;
    d_pc[1] += grad.mean2d[1] * fy / z;
    d_pc[2] += -grad.mean2d[0] * fx * x / z2 - grad.mean2d[1] * fy * y / z2;

    let wt = linalg::transpose(&w);
    let dp_world = linalg::mat_vec(&wt, d_pc);
    for k in 0..3 {
        out[layout::POSITION.start + k] = d_pos[k] + dp_world[k];
    }

    // Σ = M Mᵀ, M = R diag(s).
    let mut d_m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_m[i][j] = 2.0 * (0..3).map(|k| d_sigma[i][k] * m[k][j]).sum::<f64>();
        }
    }
    let mut d_rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d_rot[i][j] = d_m[i][j] * s[j];
            out[layout::LOG_SCALE.start + j] += d_m[i][j] * rot[i][j] * s[j];
        }
    }
    let d_q = linalg::quat_to_mat_backward(q, &d_rot);
    let d_raw_q = linalg::quat_normalize_backward(g.rotation, d_q);
    out[layout::ROTATION].copy_from_slice(&d_raw_q);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::activate;

    fn axis_camera(w: usize, h: usize, f: f64) -> Camera {
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            m[i][i] = 1.0;
        }
        Camera::new(m, f, f, w as f64 / 2.0, h as f64 / 2.0, w, h, 0.1, 100.0).unwrap()
    }

    fn gaussian_at(p: Vec3, sigma: f64) -> Gaussian3D {
        Gaussian3D::new(p, [sigma.ln(); 3], [1.0, 0.0, 0.0, 0.0], 2.0, [0.3, 0.6, 0.9])
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let cam = axis_camera(100, 100, 100.0);
        let g = activate(&gaussian_at([0.0, 0.0, 1.0], 0.01), 0).unwrap();
        let s = project_gaussian(&g, &cam).unwrap().unwrap();
        assert!((s.mean2d[0] - 50.0).abs() < 1e-12 && (s.mean2d[1] - 50.0).abs() < 1e-12);
        assert_eq!(s.depth, 1.0);
    }

    #[test]
    fn isotropic_projection_matches_analytic_and_sampled_covariance() {
        let (f, sigma, z) = (100.0, 0.02, 2.0);
        let cam = axis_camera(100, 100, f);
        let g = activate(&gaussian_at([0.0, 0.0, z], sigma), 0).unwrap();
        let s = project_gaussian(&g, &cam).unwrap().unwrap();
        let expected = (f * sigma / z).powi(2) + COV2D_FLOOR;
        let [a, b, c] = s.conic;
        let det = a * c - b * b;
        let cov = [c / det, -b / det, a / det];
        assert!((cov[0] - expected).abs() < 1e-12);
        assert!((cov[2] - expected).abs() < 1e-12);
        assert!(cov[1].abs() < 1e-12);

        // Numeric projection: push ±σ offsets along x through the exact
        // perspective map and recover the pixel-space standard deviation.
        let h = sigma * 1e-3;
        let px = cam.project_point([h, 0.0, z])[0] - cam.project_point([-h, 0.0, z])[0];
        let numeric_sd = px / (2.0 * h) * sigma;
        assert!((numeric_sd.powi(2) + COV2D_FLOOR - expected).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(64, 64, 50.0);
        let g = activate(&gaussian_at([0.0, 0.0, -1.0], 0.1), 0).unwrap();
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
        let g = activate(&gaussian_at([0.0, 0.0, 0.05], 0.1), 0).unwrap();
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
    }

    #[test]
    fn far_off_screen_is_culled() {
        let cam = axis_camera(64, 64, 50.0);
        let g = activate(&gaussian_at([10.0, 0.0, 1.0], 0.01), 0).unwrap();
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
    }

    #[test]
    fn singular_covariance_is_reported() {
        let cam = axis_camera(64, 64, 50.0);
        let mut g = activate(&gaussian_at([0.0, 0.0, 1.0], 0.01), 0).unwrap();
        g.covariance[0][0] = f64::NAN;
        assert!(matches!(project_gaussian(&g, &cam), Err(Error::Internal(_))));
    }

    #[test]
    fn eval_alpha_examples() {
        let s: Splat2D<f64> = Splat2D {
            mean2d: [3.0, 4.0],
            conic: [1.0, 0.0, 1.0],
            depth: 1.0,
            gaussian_id: 0,
            source: 0,
            base_opacity: 0.8,
            view_color: [0.0; 3],
            bounds: PixelRect { x0: 0, y0: 0, x1: 7, y1: 7 },
        };
        assert!((eval_alpha(&s, [3.0, 4.0]) - 0.8).abs() < 1e-15);
        let full = Splat2D { base_opacity: 1.0, ..s.clone() };
        assert_eq!(eval_alpha(&full, [3.0, 4.0]), ALPHA_MAX);
        // dᵀCd = 2 ln 2 along x.
        let d = (2.0 * 2f64.ln()).sqrt();
        assert!((eval_alpha(&full, [3.0 + d, 4.0]) - 0.5).abs() < 1e-12);
        assert_eq!(eval_alpha(&full, [30.0, 4.0]), 0.0);
    }

    #[test]
    fn look_at_centers_target() {
        let cam = Camera::look_at([3.0, 1.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], 80.0, 80.0, 64, 48, 0.1, 50.0).unwrap();
        let p = cam.project_point([0.0; 3]);
        assert!((p[0] - 32.0).abs() < 1e-9 && (p[1] - 24.0).abs() < 1e-9);
        let c = cam.center();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 1.0).abs() < 1e-12 && (c[2] + 2.0).abs() < 1e-12);
        // World up maps to image up (negative y).
        assert!(cam.project_point([0.0, 0.5, 0.0])[1] < 24.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cam = Camera::look_at([0.4, -0.3, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 70.0, 75.0, 64, 64, 0.1, 50.0).unwrap();
        let mut g = Gaussian3D::new(
            [0.2, -0.1, 0.3],
            [-1.2, -0.8, -1.6],
            linalg::quat_normalize([0.8, 0.3, -0.4, 0.2]),
            0.4,
            [0.3, 0.5, 0.7],
        );
        g.color[1] = [0.2, -0.1, 0.05];
        g.color[2] = [0.1, 0.3, -0.2];
        g.color[3] = [-0.15, 0.2, 0.1];
        let upstream = SplatGrad {
            mean2d: [0.7, -1.3],
            conic: [2.0, -0.8, 1.5],
            color: [0.4, -0.9, 0.6],
            opacity: 1.1,
        };
        let objective = |g: &Gaussian3D| -> f64 {
            let a = activate(g, 1).unwrap();
            let s = project_gaussian_with(&a, &cam, 1e-12, 0).unwrap().unwrap();
            upstream.mean2d[0] * s.mean2d[0]
                + upstream.mean2d[1] * s.mean2d[1]
                + (0..3).map(|k| upstream.conic[k] * s.conic[k] + upstream.color[k] * s.view_color[k]).sum::<f64>()
                + upstream.opacity * s.base_opacity
        };
        let analytic = project_backward(&g, 1, &cam, &upstream);
        let base = g.to_params();
        for k in 0..model::layout::MASK {
            let h = 1e-6;
            let mut gp = g.clone();
            let mut gm = g.clone();
            let mut p = base;
            p[k] += h;
            gp.set_params(&p);
            let mut p = base;
            p[k] -= h;
            gm.set_params(&p);
            let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
            let scale = fd.abs().max(analytic[k].abs()).max(1.0);
            assert!((fd - analytic[k]).abs() / scale < 1e-6, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }
}
