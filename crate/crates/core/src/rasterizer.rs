//! Tile-based front-to-back compositing of the RGB image and the spatial
//! mask image.
//!
//! Transmittance follows the masked update `T_{i+1} = (1 - M_i α_i) T_i`
//! with `T_0 = 1`; colour is `Σ M_i α_i c_i T_i`. Every fragment's
//! `(α_i, T_i, M_i)` is kept in a per-pixel [`Trace`] so the backward pass
//! never re-rasterizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{activate, MaskSample, Scene};
use crate::projection::{self, Camera, Splat2D};
use crate::real::Real;

/// Which spatial-mask image the renderer produces alongside RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// `F = Σ M_i (1 - α_i T_i) / ln(1 + N)`.
    Proposed,
    /// `F_A = Σ w_i M_i / Σ w_i` with `w_i = 1 / (α_i T_i + ε)`.
    Inverse,
    /// `F_B = Σ M_i (1 - T_i) / ln(1 + N)`.
    Cumulative,
    /// RGB only.
    None,
}

impl MaskMode {
    pub const SPATIAL: [MaskMode; 3] = [MaskMode::Proposed, MaskMode::Inverse, MaskMode::Cumulative];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Proposed => "proposed",
            MaskMode::Inverse => "inverse",
            MaskMode::Cumulative => "cumulative",
            MaskMode::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Fragments below this opacity are skipped (0 disables skipping).
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// A pixel stops accepting fragments once its transmittance drops below
    /// this value (0 disables early stop).
    pub t_min: f64,
    /// `ε` of the inverse-importance weights.
    pub eps_inverse: f64,
    pub tile_size: usize,
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            alpha_min: projection::ALPHA_MIN,
            alpha_max: projection::ALPHA_MAX,
            t_min: 1e-4,
            eps_inverse: 1e-6,
            tile_size: 16,
            parallel: true,
        }
    }
}

impl RenderOptions {
    /// Skip threshold and early stop disabled; used by oracle comparisons.
    pub fn exact() -> Self {
        RenderOptions {
            alpha_min: 0.0,
            t_min: 0.0,
            ..RenderOptions::default()
        }
    }

    /// Opacity used for frustum culling of footprints.
    pub fn cull_alpha(&self) -> f64 {
        if self.alpha_min > 0.0 {
            self.alpha_min
        } else {
            1e-12
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Span {
    pub start: u32,
    pub len: u32,
}

impl Span {
    #[inline]
    fn range(self) -> std::ops::Range<usize> {
        self.start as usize..(self.start + self.len) as usize
    }
}

/// One fragment of a pixel's depth-sorted list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFragment<R> {
    /// Index into the render's splat list.
    pub splat: u32,
    pub alpha: R,
    /// Hard mask value `M_i ∈ {0, 1}`.
    pub mask: R,
}

/// A fragment together with the transmittance before it was blended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry<R> {
    pub splat: u32,
    pub alpha: R,
    pub transmittance: R,
    pub mask: R,
}

/// Per-pixel fragment records, nearest first, stored tile by tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLists<T> {
    pub width: usize,
    pub height: usize,
    pub entries: Vec<T>,
    spans: Vec<Span>,
}

pub type FragmentList<R> = PixelLists<PixelFragment<R>>;
pub type Trace<R> = PixelLists<TraceEntry<R>>;

impl<T> PixelLists<T> {
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        &self.entries[self.spans[y * self.width + x].range()]
    }

    pub fn len(&self, x: usize, y: usize) -> usize {
        self.spans[y * self.width + x].len as usize
    }

    pub fn total_fragments(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutputs<R> {
    pub width: usize,
    pub height: usize,
    pub mode: MaskMode,
    /// Row-major `H × W × 3`, unclamped.
    pub rgb: Vec<R>,
    /// Row-major `H × W`; `None` when `mode` is [`MaskMode::None`].
    pub spatial_mask: Option<Vec<R>>,
    /// `N(x)`: fragments on each pixel's ray, masked or not.
    pub frag_count: Vec<u32>,
    pub trace: Trace<R>,
    /// Culled, depth-sorted splats; trace entries index into this.
    pub splats: Vec<Splat2D<R>>,
    pub(crate) tiles: TileGrid,
}

impl<R: Real> RenderOutputs<R> {
    pub fn rgb_at(&self, x: usize, y: usize) -> [R; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn rgb_f64(&self) -> Vec<f64> {
        self.rgb.iter().map(|v| v.as_f64()).collect()
    }

    pub fn spatial_mask_f64(&self) -> Option<Vec<f64>> {
        self.spatial_mask.as_ref().map(|m| m.iter().map(|v| v.as_f64()).collect())
    }
}

/// Tile partition of the image and the sorted splat indices touching each
/// tile.
#[derive(Debug, Clone)]
pub(crate) struct TileGrid {
    pub size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub bins: Vec<Vec<u32>>,
}

impl TileGrid {
    fn new<R>(splats: &[Splat2D<R>], width: usize, height: usize, size: usize) -> Self {
        let tiles_x = width.div_ceil(size);
        let tiles_y = height.div_ceil(size);
        let mut bins = vec![Vec::new(); tiles_x * tiles_y];
        for (i, s) in splats.iter().enumerate() {
            let b = s.bounds;
            for ty in b.y0 / size..=b.y1 / size {
                for tx in b.x0 / size..=b.x1 / size {
                    bins[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        TileGrid {
            size,
            tiles_x,
            tiles_y,
            bins,
        }
    }

    pub fn tile_count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive upper bounds).
    pub fn tile_rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0, y0, (x0 + self.size).min(width), (y0 + self.size).min(height))
    }
}

/// Projects, culls and depth-sorts the scene. Ties in depth are broken by
/// Gaussian id.
pub fn project_scene<R: Real>(scene: &Scene, cam: &Camera, opts: &RenderOptions) -> Result<Vec<Splat2D<R>>> {
    let cut = opts.cull_alpha();
    let projected: Vec<Option<Splat2D<f64>>> = scene
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let a = activate(g, scene.sh_degree)?;
            projection::project_gaussian_with(&a, cam, cut, i)
        })
        .collect::<Result<_>>()?;
    let mut splats: Vec<Splat2D<f64>> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian_id.cmp(&b.gaussian_id)));
    Ok(splats.iter().map(Splat2D::cast).collect())
}

struct TileOutput<R> {
    entries: Vec<TraceEntry<R>>,
    lens: Vec<u32>,
    rgb: Vec<[R; 3]>,
    mask: Vec<R>,
}

/// Walks one pixel's candidate splats front to back, appending trace
/// entries, and returns the composited colour.
#[inline]
fn shade_pixel<R: Real>(
    x: usize,
    y: usize,
    candidates: &[u32],
    splats: &[Splat2D<R>],
    hard: &[R],
    opts: &RenderOptions,
    out: &mut Vec<TraceEntry<R>>,
) -> [R; 3] {
    let pos = [R::c(x as f64), R::c(y as f64)];
    let alpha_min = R::c(opts.alpha_min);
    let alpha_max = R::c(opts.alpha_max);
    let t_min = R::c(opts.t_min);
    let mut t = R::one();
    let mut rgb = [R::zero(); 3];
    for &si in candidates {
        let s = &splats[si as usize];
        let b = s.bounds;
        if x < b.x0 || x > b.x1 || y < b.y0 || y > b.y1 {
            continue;
        }
        let (g, _) = s.falloff(pos);
        let alpha = (s.base_opacity * g).min(alpha_max);
        if alpha < alpha_min {
            continue;
        }
        let m = hard[s.source];
        out.push(TraceEntry {
            splat: si,
            alpha,
            transmittance: t,
            mask: m,
        });
        let w = m * alpha * t;
        for ch in 0..3 {
            rgb[ch] += w * s.view_color[ch];
        }
        t *= R::one() - m * alpha;
        if t < t_min {
            break;
        }
    }
    rgb
}

/// Spatial-mask value of one ray under `mode` (zero for `None`).
pub fn ray_mask<R: Real>(mode: MaskMode, ray: &[TraceEntry<R>], eps: R) -> R {
    match mode {
        MaskMode::Proposed => render_mask_proposed(ray),
        MaskMode::Inverse => render_mask_inverse(ray, eps),
        MaskMode::Cumulative => render_mask_cumulative(ray),
        MaskMode::None => R::zero(),
    }
}

/// `ln(1 + N)`, the ray-length normalizer.
#[inline]
pub fn ray_normalizer<R: Real>(n: usize) -> R {
    R::c((n as f64).ln_1p())
}

pub fn render_mask_proposed<R: Real>(ray: &[TraceEntry<R>]) -> R {
    if ray.is_empty() {
        return R::zero();
    }
    let sum: R = ray.iter().map(|e| e.mask * (R::one() - e.alpha * e.transmittance)).sum();
    sum / ray_normalizer(ray.len())
}

pub fn render_mask_inverse<R: Real>(ray: &[TraceEntry<R>], eps: R) -> R {
    if ray.is_empty() {
        return R::zero();
    }
    let mut num = R::zero();
    let mut den = R::zero();
    for e in ray {
        let w = R::one() / (e.alpha * e.transmittance + eps);
        num += w * e.mask;
        den += w;
    }
    num / den
}

pub fn render_mask_cumulative<R: Real>(ray: &[TraceEntry<R>]) -> R {
    if ray.is_empty() {
        return R::zero();
    }
    let sum: R = ray.iter().map(|e| e.mask * (R::one() - e.transmittance)).sum();
    sum / ray_normalizer(ray.len())
}

/// Builds a ray's trace from opacities and (possibly relaxed) masks using
/// the masked transmittance update.
pub fn trace_ray<R: Real>(alphas: &[R], masks: &[R]) -> Vec<TraceEntry<R>> {
    assert_eq!(alphas.len(), masks.len());
    let mut t = R::one();
    alphas
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (&alpha, &mask))| {
            let e = TraceEntry {
                splat: i as u32,
                alpha,
                transmittance: t,
                mask,
            };
            t *= R::one() - mask * alpha;
            e
        })
        .collect()
}

/// Composites one pixel's fragment list. Returns the colour and the trace
/// (transmittance recorded before each fragment is blended).
pub fn composite_rgb<R: Real>(frags: &[PixelFragment<R>], colors: &[[R; 3]]) -> ([R; 3], Vec<TraceEntry<R>>) {
    let mut t = R::one();
    let mut rgb = [R::zero(); 3];
    let mut trace = Vec::with_capacity(frags.len());
    for f in frags {
        trace.push(TraceEntry {
            splat: f.splat,
            alpha: f.alpha,
            transmittance: t,
            mask: f.mask,
        });
        let w = f.mask * f.alpha * t;
        let c = colors[f.splat as usize];
        for ch in 0..3 {
            rgb[ch] += w * c[ch];
        }
        t *= R::one() - f.mask * f.alpha;
    }
    (rgb, trace)
}

/// Per-pixel fragment lists for already-projected splats. `masks` is
/// indexed by each splat's `source`.
pub fn build_fragments<R: Real>(
    splats: &[Splat2D<R>],
    cam: &Camera,
    masks: &[MaskSample],
    opts: &RenderOptions,
) -> Result<FragmentList<R>> {
    let (trace, _, _, _) = rasterize(splats, cam, masks, MaskMode::None, opts)?;
    Ok(PixelLists {
        width: trace.width,
        height: trace.height,
        entries: trace
            .entries
            .iter()
            .map(|e| PixelFragment {
                splat: e.splat,
                alpha: e.alpha,
                mask: e.mask,
            })
            .collect(),
        spans: trace.spans,
    })
}

type Rasterized<R> = (Trace<R>, Vec<R>, Option<Vec<R>>, TileGrid);

fn rasterize<R: Real>(
    splats: &[Splat2D<R>],
    cam: &Camera,
    masks: &[MaskSample],
    mode: MaskMode,
    opts: &RenderOptions,
) -> Result<Rasterized<R>> {
    let (width, height) = (cam.width, cam.height);
    if width == 0 || height == 0 {
        return Err(Error::invalid("image dimensions must be non-zero"));
    }
    if opts.tile_size == 0 {
        return Err(Error::invalid("tile size must be non-zero"));
    }
    let hard: Vec<R> = masks.iter().map(|m| R::c(m.hard)).collect();
    if let Some(s) = splats.iter().find(|s| s.source >= hard.len()) {
        return Err(Error::invalid(format!("no mask sample for gaussian index {}", s.source)));
    }
    let grid = TileGrid::new(splats, width, height, opts.tile_size);
    let eps = R::c(opts.eps_inverse);

    let run_tile = |t: usize| -> TileOutput<R> {
        let (x0, y0, x1, y1) = grid.tile_rect(t, width, height);
        let n_px = (x1 - x0) * (y1 - y0);
        let mut out = TileOutput {
            entries: Vec::new(),
            lens: Vec::with_capacity(n_px),
            rgb: Vec::with_capacity(n_px),
            mask: Vec::with_capacity(n_px),
        };
        let candidates = &grid.bins[t];
        let mut row = Vec::with_capacity(candidates.len());
        for y in y0..y1 {
            // Depth order is kept; only splats spanning this row remain.
            row.clear();
            row.extend(candidates.iter().copied().filter(|&si| {
                let b = splats[si as usize].bounds;
                y >= b.y0 && y <= b.y1
            }));
            for x in x0..x1 {
                let start = out.entries.len();
                let rgb = shade_pixel(x, y, &row, splats, &hard, opts, &mut out.entries);
                let ray = &out.entries[start..];
                out.mask.push(ray_mask(mode, ray, eps));
                out.lens.push(ray.len() as u32);
                out.rgb.push(rgb);
            }
        }
        out
    };
    let tiles: Vec<TileOutput<R>> = if opts.parallel {
        (0..grid.tile_count()).into_par_iter().map(run_tile).collect()
    } else {
        (0..grid.tile_count()).map(run_tile).collect()
    };

    let total: usize = tiles.iter().map(|t| t.entries.len()).sum();
    let mut entries = Vec::with_capacity(total);
    let mut spans = vec![Span::default(); width * height];
    let mut rgb = vec![R::zero(); width * height * 3];
    let mut mask = vec![R::zero(); width * height];
    for (t, tile) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, _) = grid.tile_rect(t, width, height);
        let tw = x1 - x0;
        let mut cursor = entries.len() as u32;
        for (k, &len) in tile.lens.iter().enumerate() {
            let p = (y0 + k / tw) * width + x0 + k % tw;
            spans[p] = Span { start: cursor, len };
            cursor += len;
            rgb[3 * p..3 * p + 3].copy_from_slice(&tile.rgb[k]);
            mask[p] = tile.mask[k];
        }
        entries.extend(tile.entries);
    }
    let trace = PixelLists {
        width,
        height,
        entries,
        spans,
    };
    let mask = (mode != MaskMode::None).then_some(mask);
    Ok((trace, rgb, mask, grid))
}

/// Renders RGB and, unless `mode` is `None`, the spatial-mask image.
/// `masks` holds one sample per Gaussian in scene order.
pub fn render<R: Real>(
    scene: &Scene,
    cam: &Camera,
    masks: &[MaskSample],
    mode: MaskMode,
    opts: &RenderOptions,
) -> Result<RenderOutputs<R>> {
    if cam.width == 0 || cam.height == 0 {
        return Err(Error::invalid("image dimensions must be non-zero"));
    }
    if masks.len() != scene.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mask samples for {} gaussians",
            masks.len(),
            scene.len()
        )));
    }
    let splats = project_scene::<R>(scene, cam, opts)?;
    let (trace, rgb, spatial_mask, tiles) = rasterize(&splats, cam, masks, mode, opts)?;
    let frag_count = trace.spans.iter().map(|s| s.len).collect();
    Ok(RenderOutputs {
        width: cam.width,
        height: cam.height,
        mode,
        rgb,
        spatial_mask,
        frag_count,
        trace,
        splats,
        tiles,
    })
}
