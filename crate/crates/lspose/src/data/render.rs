//! Deterministic synthetic scene generator.
//!
//! Renders a fixed asymmetric spacecraft wireframe (box body, two unequal
//! offset solar panels, a diagonal antenna) through the pinhole camera at
//! uniformly drawn poses, optionally over cluttered backgrounds, and
//! writes 8-bit grayscale PNGs plus a manifest and an external-style
//! label file. Every sample draws from its own counter-mode RNG stream
//! derived from (seed, index), so parallel and serial generation produce
//! identical bytes.

use std::fs;
use std::path::Path;

use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Manifest, ManifestSource, QuatOrder, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::geometry::{random_unit_quaternion, Camera, Pose};

/// Synthetic scene parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub camera: Camera,
    /// Uniform depth range in meters, lo < hi.
    pub z_range: (f64, f64),
    /// Central fraction of the frame (per axis) that may contain the
    /// projected body centre.
    pub center_margin: f64,
    /// Probability of rendering a cluttered background.
    pub clutter_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 128,
            camera: Camera { fx: 180.0, fy: 180.0, cx: 63.5, cy: 63.5 },
            z_range: (6.0, 18.0),
            center_margin: 0.8,
            clutter_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(16..=4096).contains(&self.width) || !(16..=4096).contains(&self.height) {
            return Err(Error::Config(format!(
                "scene size {}x{} must be within 16..=4096",
                self.width, self.height
            )));
        }
        if !(self.camera.fx > 0.0) || !(self.camera.fy > 0.0) {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        let (lo, hi) = self.z_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::Config(format!(
                "z_range ({lo}, {hi}) must satisfy 0 < lo < hi"
            )));
        }
        if !(self.center_margin > 0.0 && self.center_margin <= 1.0) {
            return Err(Error::Config(format!(
                "center_margin {} must be in (0, 1]",
                self.center_margin
            )));
        }
        if !(0.0..=1.0).contains(&self.clutter_prob) {
            return Err(Error::Config(format!(
                "clutter_prob {} must be in [0, 1]",
                self.clutter_prob
            )));
        }
        Ok(())
    }
}

/// One wireframe edge in body coordinates with its draw intensity.
#[derive(Debug, Clone, Copy)]
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    intensity: f64,
}

fn seg(a: [f64; 3], b: [f64; 3], intensity: f64) -> Segment {
    Segment { a, b, intensity }
}

/// The fixed target body. Deliberately asymmetric: the two panels differ
/// in size, offset plane, and intensity, and the antenna runs diagonally,
/// so no nontrivial rotation maps the wireframe onto itself.
fn spacecraft_segments() -> Vec<Segment> {
    let mut s = Vec::new();

    // Body cuboid, half extents (0.5, 0.4, 0.3).
    let (hx, hy, hz) = (0.5, 0.4, 0.3);
    let body = 0.85;
    let corner = |sx: f64, sy: f64, sz: f64| [sx * hx, sy * hy, sz * hz];
    for &sy in &[-1.0, 1.0] {
        for &sz in &[-1.0, 1.0] {
            s.push(seg(corner(-1.0, sy, sz), corner(1.0, sy, sz), body));
        }
    }
    for &sx in &[-1.0, 1.0] {
        for &sz in &[-1.0, 1.0] {
            s.push(seg(corner(sx, -1.0, sz), corner(sx, 1.0, sz), body));
        }
    }
    for &sx in &[-1.0, 1.0] {
        for &sy in &[-1.0, 1.0] {
            s.push(seg(corner(sx, sy, -1.0), corner(sx, sy, 1.0), body));
        }
    }

    // Main solar panel on +y, plane z = 0.08, with a diagonal brace.
    let p = 0.70;
    let (x0, x1, y0, y1, zp) = (-0.35, 0.35, 0.55, 1.50, 0.08);
    s.push(seg([x0, y0, zp], [x1, y0, zp], p));
    s.push(seg([x1, y0, zp], [x1, y1, zp], p));
    s.push(seg([x1, y1, zp], [x0, y1, zp], p));
    s.push(seg([x0, y1, zp], [x0, y0, zp], p));
    s.push(seg([x0, y0, zp], [x1, y1, zp], p));
    s.push(seg([0.0, hy, zp], [0.0, y0, zp], p));

    // Smaller panel on -y, plane z = -0.12, no brace.
    let q = 0.60;
    let (x0, x1, y0, y1, zp) = (-0.22, 0.22, -1.05, -0.50, -0.12);
    s.push(seg([x0, y0, zp], [x1, y0, zp], q));
    s.push(seg([x1, y0, zp], [x1, y1, zp], q));
    s.push(seg([x1, y1, zp], [x0, y1, zp], q));
    s.push(seg([x0, y1, zp], [x0, y0, zp], q));
    s.push(seg([0.0, -hy, zp], [0.0, y1, zp], q));

    // Diagonal antenna with a tip bar.
    let a = 1.0;
    s.push(seg([0.10, 0.00, -0.30], [0.50, -0.25, -1.20], a));
    s.push(seg([0.42, -0.33, -1.20], [0.58, -0.17, -1.20], a));
    s
}

/// Diameter of the circumscribed sphere of the wireframe, in meters.
pub fn body_diameter_m() -> f64 {
    let mut r2: f64 = 0.0;
    for s in spacecraft_segments() {
        for p in [s.a, s.b] {
            r2 = r2.max(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        }
    }
    2.0 * r2.sqrt()
}

/// Axis-aligned projected extent of the wireframe in pixels: the larger
/// of the u and v spans over all projected vertices.
pub fn projected_extent_px(pose: &Pose, camera: &Camera) -> Result<f64> {
    let mut min_u = f64::INFINITY;
    let mut max_u = f64::NEG_INFINITY;
    let mut min_v = f64::INFINITY;
    let mut max_v = f64::NEG_INFINITY;
    for s in spacecraft_segments() {
        for p in [s.a, s.b] {
            let c = transform(pose, p);
            let (u, v) = camera.project(c)?;
            min_u = min_u.min(u);
            max_u = max_u.max(u);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
    }
    Ok((max_u - min_u).max(max_v - min_v))
}

fn transform(pose: &Pose, p: [f64; 3]) -> [f64; 3] {
    let r = pose.q.rotate(p);
    [r[0] + pose.t[0], r[1] + pose.t[1], r[2] + pose.t[2]]
}

struct Clutter {
    g0: f64,
    g1: f64,
    theta: f64,
    /// (centre u, centre v, radius px, amplitude).
    circles: Vec<(f64, f64, f64, f64)>,
}

/// Per-sample draw order is fixed: orientation, depth, centre u, centre v,
/// clutter coin, then clutter parameters when the coin hits. Changing this
/// order would silently change every generated corpus.
fn draw_scene(cfg: &SceneConfig, rng: &mut ChaCha12Rng) -> (Pose, Option<Clutter>) {
    let q = random_unit_quaternion(rng);
    let z = rng.random_range(cfg.z_range.0..cfg.z_range.1);
    let lo = (1.0 - cfg.center_margin) / 2.0;
    let hi = (1.0 + cfg.center_margin) / 2.0;
    let u = rng.random_range(lo * cfg.width as f64 - 0.5..hi * cfg.width as f64 - 0.5);
    let v = rng.random_range(lo * cfg.height as f64 - 0.5..hi * cfg.height as f64 - 0.5);
    let t = cfg.camera.back_project(u, v, z);
    let clutter = if rng.random::<f64>() < cfg.clutter_prob {
        let g0 = rng.random_range(0.04..0.20);
        let g1 = rng.random_range(0.04..0.20);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let n = rng.random_range(2..=5usize);
        let rad_scale = cfg.width.min(cfg.height) as f64;
        let circles = (0..n)
            .map(|_| {
                (
                    rng.random_range(0.0..cfg.width as f64),
                    rng.random_range(0.0..cfg.height as f64),
                    rng.random_range(0.06..0.22) * rad_scale,
                    rng.random_range(0.06..0.20),
                )
            })
            .collect();
        Some(Clutter { g0, g1, theta, circles })
    } else {
        None
    };
    (Pose { t, q }, clutter)
}

/// Background clutter never exceeds this intensity, keeping the dimmest
/// wireframe component (0.60) clearly above it.
const CLUTTER_CAP: f64 = 0.45;

fn render_scene(cfg: &SceneConfig, pose: &Pose, clutter: Option<&Clutter>) -> Vec<u8> {
    let (w, h) = (cfg.width, cfg.height);
    let mut buf = vec![0.0f64; w * h];

    if let Some(cl) = clutter {
        let (ct, st) = (cl.theta.cos(), cl.theta.sin());
        let corners = [
            (0.0, 0.0),
            ((w - 1) as f64, 0.0),
            (0.0, (h - 1) as f64),
            ((w - 1) as f64, (h - 1) as f64),
        ];
        let mut s0 = f64::INFINITY;
        let mut s1 = f64::NEG_INFINITY;
        for (u, v) in corners {
            let s = u * ct + v * st;
            s0 = s0.min(s);
            s1 = s1.max(s);
        }
        let span = (s1 - s0).max(1e-9);
        for r in 0..h {
            for c in 0..w {
                let s = ((c as f64 * ct + r as f64 * st) - s0) / span;
                let mut v = cl.g0 + (cl.g1 - cl.g0) * s;
                for &(cu, cv, rad, amp) in &cl.circles {
                    let d2 = ((c as f64 - cu).powi(2) + (r as f64 - cv).powi(2)) / (rad * rad);
                    v += amp * (-d2 * d2).exp();
                }
                buf[r * w + c] = v.clamp(0.0, CLUTTER_CAP);
            }
        }
    }

    for segm in spacecraft_segments() {
        let a = transform(pose, segm.a);
        let b = transform(pose, segm.b);
        // Both endpoints must be in front of the camera; with z >= 5 m and
        // a body radius under 2 m this only guards degenerate configs.
        if a[2] <= 1e-6 || b[2] <= 1e-6 {
            continue;
        }
        let pa = cfg.camera.project(a).expect("z checked");
        let pb = cfg.camera.project(b).expect("z checked");
        draw_segment_aa(&mut buf, w, h, pa, pb, segm.intensity);
    }

    buf.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Distance-based antialiased line: coverage falls linearly from 1 at
/// 0.2 px off the centerline to 0 at 1.2 px; composed with max so
/// crossing lines keep the brighter component.
pub(crate) fn draw_segment_aa(buf: &mut [f64], w: usize, h: usize, a: (f64, f64), b: (f64, f64), ink: f64) {
    let pad = 1.7;
    let c0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let c1 = ((a.0.max(b.0) + pad).ceil() as isize).clamp(0, w as isize - 1) as usize;
    let r0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let r1 = ((a.1.max(b.1) + pad).ceil() as isize).clamp(0, h as isize - 1) as usize;
    if a.0.max(b.0) < -pad || a.1.max(b.1) < -pad {
        return;
    }
    let dx = b.0 - a.0;
    let dy = b.1 - a.1;
    let len2 = dx * dx + dy * dy;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (px, py) = (c as f64, r as f64);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let qx = a.0 + t * dx;
            let qy = a.1 + t * dy;
            let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
            let cov = (1.2 - d).clamp(0.0, 1.0);
            let v = cov * ink;
            if v > buf[r * w + c] {
                buf[r * w + c] = v;
            }
        }
    }
}

pub(crate) fn encode_png(gray: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(gray, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("png encode: {e}")))?;
    Ok(out)
}

#[derive(Serialize)]
struct LabelRecord {
    filename: String,
    q: [f64; 4],
    t: [f64; 3],
}

/// Renders `n` samples into `out_dir`, writing `img_NNNNN.png` files, a
/// `manifest.jsonl`, and an external-style `labels.json` (a JSON array
/// with default key names, scalar-first quaternions). Byte-deterministic
/// for a given (n, cfg, seed) regardless of worker count.
pub fn generate_synthetic(
    n: usize,
    cfg: &SceneConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n < 1 {
        return Err(Error::Config(format!("generate_synthetic needs n >= 1, got {n}")));
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let rendered: Result<Vec<(String, Vec<u8>, Pose)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (pose, clutter) = draw_scene(cfg, &mut rng);
            let gray = render_scene(cfg, &pose, clutter.as_ref());
            let png = encode_png(&gray, cfg.width, cfg.height)?;
            Ok((format!("img_{i:05}.png"), png, pose))
        })
        .collect();
    let rendered = rendered?;

    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (name, png, pose) in &rendered {
        let path = out_dir.join(name);
        fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        samples.push(Sample::new(
            path,
            *pose,
            cfg.camera,
            cfg.width,
            cfg.height,
        )?);
        labels.push(LabelRecord {
            filename: name.clone(),
            q: pose.q.to_wxyz(),
            t: pose.t,
        });
    }

    let manifest = Manifest {
        samples,
        split_tag: SplitTag::All,
        quaternion_order: QuatOrder::Wxyz,
        source: ManifestSource::Synthetic,
        camera: cfg.camera,
        seed,
    };
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    let label_text =
        serde_json::to_string_pretty(&labels).expect("label records serialize");
    let label_path = out_dir.join("labels.json");
    fs::write(&label_path, label_text).map_err(|e| Error::io(&label_path, e))?;
    Ok(manifest)
}
