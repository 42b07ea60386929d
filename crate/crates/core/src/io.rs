//! Scene, camera and image serialization.
//!
//! Binary scenes are a short text header followed by little-endian f32
//! records. Records hold position, log-scale, rotation, opacity logit, the
//! colour coefficients for the scene's SH degree and the mask logit, in that
//! order. Ids are not stored; reading assigns them in file order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::model::{sh_coeff_count, Gaussian3D, Scene, MAX_SH_COEFFS};
use crate::projection::Camera;

const SCENE_MAGIC: &str = "splatmask-scene";
const SCENE_VERSION: u32 = 1;
const PLANE_MAGIC: &str = "F32PLANE";

fn record_len(sh_degree: u8) -> usize {
    3 + 3 + 4 + 1 + 3 * sh_coeff_count(sh_degree) + 1
}

fn record(g: &Gaussian3D, sh_degree: u8) -> Vec<f64> {
    let mut r = Vec::with_capacity(record_len(sh_degree));
    r.extend_from_slice(&g.position);
    r.extend_from_slice(&g.log_scale);
    r.extend_from_slice(&g.rotation);
    r.push(g.opacity_logit);
    for c in &g.color[..sh_coeff_count(sh_degree)] {
        r.extend_from_slice(c);
    }
    r.push(g.mask_logit);
    r
}

fn from_record(r: &[f64], sh_degree: u8) -> Gaussian3D {
    let mut color = [[0.0; 3]; MAX_SH_COEFFS];
    let k = sh_coeff_count(sh_degree);
    for (i, c) in color.iter_mut().take(k).enumerate() {
        c.copy_from_slice(&r[11 + 3 * i..14 + 3 * i]);
    }
    Gaussian3D {
        id: 0,
        position: [r[0], r[1], r[2]],
        log_scale: [r[3], r[4], r[5]],
        rotation: [r[6], r[7], r[8], r[9]],
        opacity_logit: r[10],
        color,
        mask_logit: r[11 + 3 * k],
    }
}

pub fn write_scene_binary<W: Write>(scene: &Scene, mut w: W) -> Result<()> {
    scene.validate()?;
    write!(
        w,
        "{SCENE_MAGIC}\nversion {SCENE_VERSION}\ncount {}\nsh_degree {}\nend_header\n",
        scene.len(),
        scene.sh_degree
    )?;
    let mut buf = Vec::with_capacity(scene.len() * record_len(scene.sh_degree) * 4);
    for g in &scene.gaussians {
        for v in record(g, scene.sh_degree) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn header_value<R: BufRead>(r: &mut R, line_no: usize, key: &str) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let line = line.trim_end();
    if key.is_empty() {
        return Ok(line.to_string());
    }
    match line.split_once(' ') {
        Some((k, v)) if k == key => Ok(v.to_string()),
        _ => Err(Error::Parse {
            line: line_no,
            message: format!("expected `{key} <value>`, found `{line}`"),
        }),
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad {what}: `{s}`"),
    })
}

pub fn read_scene_binary<R: Read>(r: R) -> Result<Scene> {
    let mut r = BufReader::new(r);
    let magic = header_value(&mut r, 1, "")?;
    if magic != SCENE_MAGIC {
        return Err(Error::Parse {
            line: 1,
            message: format!("not a scene file (magic `{magic}`)"),
        });
    }
    let version: u32 = parse_num(&header_value(&mut r, 2, "version")?, 2, "version")?;
    if version != SCENE_VERSION {
        return Err(Error::Parse {
            line: 2,
            message: format!("unsupported version {version}"),
        });
    }
    let count: usize = parse_num(&header_value(&mut r, 3, "count")?, 3, "count")?;
    let sh_degree: u8 = parse_num(&header_value(&mut r, 4, "sh_degree")?, 4, "sh_degree")?;
    if sh_degree > 1 {
        return Err(Error::Parse {
            line: 4,
            message: format!("sh_degree {sh_degree} unsupported"),
        });
    }
    if header_value(&mut r, 5, "")? != "end_header" {
        return Err(Error::Parse {
            line: 5,
            message: "missing end_header".into(),
        });
    }
    let n = record_len(sh_degree);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * n * 4 {
        return Err(Error::Parse {
            line: 6,
            message: format!("expected {} payload bytes, found {}", count * n * 4, bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let scene = Scene::from_gaussians(sh_degree, values.chunks_exact(n).map(|rec| from_record(rec, sh_degree)));
    scene.validate()?;
    Ok(scene)
}

/// Full-precision text form: one Gaussian per line, id first.
pub fn write_scene_text<W: Write>(scene: &Scene, mut w: W) -> Result<()> {
    writeln!(w, "# splatmask scene text v1")?;
    writeln!(w, "sh_degree {}", scene.sh_degree)?;
    for g in &scene.gaussians {
        let fields: Vec<String> = record(g, scene.sh_degree).iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{} {}", g.id, fields.join(" "))?;
    }
    Ok(())
}

/// Reads the text form. Ids in the file are kept; new ids continue after
/// the largest one.
pub fn read_scene_text<R: Read>(r: R) -> Result<Scene> {
    let mut sh_degree = None;
    let mut gaussians = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(d) = line.strip_prefix("sh_degree ") {
            sh_degree = Some(parse_num::<u8>(d, line_no, "sh_degree")?);
            continue;
        }
        let d = sh_degree.ok_or(Error::Parse {
            line: line_no,
            message: "sh_degree must precede records".into(),
        })?;
        let mut parts = line.split_whitespace();
        let id: u64 = parse_num(parts.next().unwrap_or(""), line_no, "id")?;
        let vals = parts.map(|p| parse_num::<f64>(p, line_no, "value")).collect::<Result<Vec<_>>>()?;
        if vals.len() != record_len(d) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} values, found {}", record_len(d), vals.len()),
            });
        }
        let mut g = from_record(&vals, d);
        g.id = id;
        gaussians.push(g);
    }
    let mut scene = Scene::from_gaussians(sh_degree.unwrap_or(0), []);
    let next = gaussians.iter().map(|g| g.id + 1).max().unwrap_or(0);
    scene.reserve_ids(next);
    scene.gaussians = gaussians;
    scene.validate()?;
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let w = BufWriter::new(fs::File::create(path)?);
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => write_scene_text(scene, w),
        _ => write_scene_binary(scene, w),
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let f = fs::File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") => read_scene_text(f),
        _ => read_scene_binary(f),
    }
}

/// Camera table: one camera per line with the 12 values of the top three
/// world-to-camera rows, then fx fy cx cy, width height, near far.
pub fn write_cameras<W: Write>(cams: &[Camera], mut w: W) -> Result<()> {
    writeln!(w, "# r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 fx fy cx cy width height near far")?;
    for c in cams {
        let mut f: Vec<String> = c.world_to_cam[..3].iter().flatten().map(|v| format!("{v:e}")).collect();
        f.extend([c.fx, c.fy, c.cx, c.cy].iter().map(|v| format!("{v:e}")));
        f.push(c.width.to_string());
        f.push(c.height.to_string());
        f.push(format!("{:e}", c.near));
        f.push(format!("{:e}", c.far));
        writeln!(w, "{}", f.join(" "))?;
    }
    Ok(())
}

pub fn read_cameras<R: Read>(r: R) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() != 20 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 20 fields, found {}", v.len()),
            });
        }
        let num = |k: usize| parse_num::<f64>(v[k], line_no, "camera value");
        let mut m = [[0.0; 4]; 4];
        for (k, slot) in m[..3].iter_mut().flatten().enumerate() {
            *slot = num(k)?;
        }
        m[3] = [0.0, 0.0, 0.0, 1.0];
        let cam = Camera::new(
            m,
            num(12)?,
            num(13)?,
            num(14)?,
            num(15)?,
            parse_num(v[16], line_no, "width")?,
            parse_num(v[17], line_no, "height")?,
            num(18)?,
            num(19)?,
        )?;
        cams.push(cam);
    }
    Ok(cams)
}

/// Writes a 1- or 3-channel image as 8-bit PNG, clamping to [0, 1].
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    }
    .ok_or_else(|| Error::Internal("PNG buffer size".into()))??;
    Ok(())
}

/// Single-channel image scaled so its maximum maps to white.
pub fn normalized_for_display(img: &Image) -> Image {
    let max = img.data.iter().cloned().fold(0.0, f64::max);
    let s = if max > 0.0 { 1.0 / max } else { 1.0 };
    Image {
        data: img.data.iter().map(|v| v * s).collect(),
        ..img.clone()
    }
}

pub fn write_plane<W: Write>(img: &Image, mut w: W) -> Result<()> {
    write!(w, "{PLANE_MAGIC} {} {} {}\n", img.width, img.height, img.channels)?;
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for v in &img.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_plane<R: Read>(r: R) -> Result<Image> {
    let mut r = BufReader::new(r);
    let header = header_value(&mut r, 1, "")?;
    let f: Vec<&str> = header.split(' ').collect();
    if f.len() != 4 || f[0] != PLANE_MAGIC {
        return Err(Error::Parse {
            line: 1,
            message: format!("bad plane header `{header}`"),
        });
    }
    let (w, h, c): (usize, usize, usize) = (parse_num(f[1], 1, "width")?, parse_num(f[2], 1, "height")?, parse_num(f[3], 1, "channels")?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != w * h * c * 4 {
        return Err(Error::Parse {
            line: 2,
            message: format!("expected {} bytes, found {}", w * h * c * 4, bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Image::new(w, h, c, data)
}

/// Line-delimited JSON sink.
pub struct JsonLines<W: Write> {
    inner: W,
}

impl<W: Write> JsonLines<W> {
    pub fn new(inner: W) -> Self {
        JsonLines { inner }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}
