//! Dataset manifests, external label ingestion, preprocessing, and the
//! train/val split.
//!
//! A manifest is UTF-8 JSON lines: a header line
//! `{"format":"lsp-manifest/1","quat_order":"wxyz",...}` carrying the
//! shared camera intrinsics and generator seed, then one line per sample
//! `{"filename":...,"q":[4],"t":[3],"w":...,"h":...}`. Quaternions are
//! always written scalar-first; filenames are stored relative to the
//! manifest's directory when possible.

pub mod render;

pub use render::{generate_synthetic, SceneConfig};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, Pose, Quaternion, Vec3};
use crate::heatmap::pixel_to_normalized;

/// Component order of quaternions in an external label source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuatOrder {
    #[serde(rename = "wxyz")]
    Wxyz,
    #[serde(rename = "xyzw")]
    Xyzw,
}

/// Which portion of a corpus a manifest holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    All,
}

/// Provenance of a manifest's labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestSource {
    SpeedFormat,
    Synthetic,
}

/// One labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Absolute path of the image file.
    pub image_path: PathBuf,
    pub pose: Pose,
    pub intrinsics: Camera,
    /// Projection of `pose.t` through the intrinsics, cached at build time.
    pub center_px: (f64, f64),
    /// Image width in pixels.
    pub width: usize,
    /// Image height in pixels.
    pub height: usize,
}

impl Sample {
    /// Builds a sample, deriving and caching the projected centre.
    /// Fails on z <= 0 (the target must be in front of the camera).
    pub fn new(
        image_path: PathBuf,
        pose: Pose,
        intrinsics: Camera,
        width: usize,
        height: usize,
    ) -> Result<Sample> {
        let center_px = intrinsics.project(pose.t)?;
        Ok(Sample { image_path, pose, intrinsics, center_px, width, height })
    }

    /// Re-derives the centre and checks the cached value against it.
    pub fn check_center(&self) -> Result<()> {
        let fresh = self.intrinsics.project(self.pose.t)?;
        let du = (fresh.0 - self.center_px.0).abs();
        let dv = (fresh.1 - self.center_px.1).abs();
        if du > 1e-6 || dv > 1e-6 {
            return Err(Error::Contract(format!(
                "cached centre ({}, {}) disagrees with projection ({}, {}) for {}",
                self.center_px.0,
                self.center_px.1,
                fresh.0,
                fresh.1,
                self.image_path.display()
            )));
        }
        Ok(())
    }
}

/// An ordered, immutable collection of labeled samples sharing one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub split_tag: SplitTag,
    /// Component order of the label source; storage is always scalar-first.
    pub quaternion_order: QuatOrder,
    pub source: ManifestSource,
    pub camera: Camera,
    /// Generator seed for synthetic corpora, 0 for ingested ones.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    quat_order: QuatOrder,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    seed: u64,
    #[serde(default = "default_split")]
    split: SplitTag,
    #[serde(default = "default_source")]
    source: ManifestSource,
}

fn default_split() -> SplitTag {
    SplitTag::All
}

fn default_source() -> ManifestSource {
    ManifestSource::SpeedFormat
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    filename: String,
    q: [f64; 4],
    t: [f64; 3],
    w: u32,
    h: u32,
}

const MANIFEST_FORMAT: &str = "lsp-manifest/1";

impl Manifest {
    /// Serializes to JSON lines at `path`. Filenames under the manifest's
    /// directory are stored relative to it, others as absolute paths.
    /// Quaternions are written scalar-first regardless of source order.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let parent = parent_dir(path);
        let header = HeaderLine {
            format: MANIFEST_FORMAT.to_string(),
            quat_order: QuatOrder::Wxyz,
            fx: self.camera.fx,
            fy: self.camera.fy,
            cx: self.camera.cx,
            cy: self.camera.cy,
            seed: self.seed,
            split: self.split_tag,
            source: self.source,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for s in &self.samples {
            let filename = s
                .image_path
                .strip_prefix(&parent)
                .unwrap_or(&s.image_path)
                .to_string_lossy()
                .into_owned();
            let line = SampleLine {
                filename,
                q: s.pose.q.to_wxyz(),
                t: s.pose.t,
                w: s.width as u32,
                h: s.height as u32,
            };
            out.push_str(&serde_json::to_string(&line).expect("sample serializes"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a JSON-lines manifest, re-deriving each cached centre and
    /// checking that every image file exists.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parent = parent_dir(path);
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or_else(|| {
            Error::Data(format!("manifest {} is empty", path.display()))
        })?;
        let header: HeaderLine = serde_json::from_str(header_line).map_err(|e| {
            Error::Data(format!("manifest {} header: {e}", path.display()))
        })?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Data(format!(
                "manifest {} has format {:?}, expected {:?}",
                path.display(),
                header.format,
                MANIFEST_FORMAT
            )));
        }
        let camera = Camera {
            fx: header.fx,
            fy: header.fy,
            cx: header.cx,
            cy: header.cy,
        };
        let mut samples = Vec::new();
        for (idx, line) in lines {
            let row: SampleLine = serde_json::from_str(line).map_err(|e| {
                Error::Data(format!("manifest {} line {}: {e}", path.display(), idx + 1))
            })?;
            let q = match header.quat_order {
                QuatOrder::Wxyz => Quaternion::from_wxyz(row.q),
                QuatOrder::Xyzw => Quaternion::from_xyzw(row.q),
            };
            let q = unit_or_error(q, &format!("manifest line {} ({})", idx + 1, row.filename))?;
            if row.t[2] <= 0.0 {
                return Err(Error::Data(format!(
                    "manifest {} line {} ({}): t.z = {} must be positive",
                    path.display(),
                    idx + 1,
                    row.filename,
                    row.t[2]
                )));
            }
            let image_path = join_filename(&parent, &row.filename);
            samples.push(Sample::new(
                image_path,
                Pose { t: row.t, q },
                camera,
                row.w as usize,
                row.h as usize,
            )?);
        }
        let m = Manifest {
            samples,
            split_tag: header.split,
            quaternion_order: header.quat_order,
            source: header.source,
            camera,
            seed: header.seed,
        };
        m.validate()?;
        Ok(m)
    }

    /// Bulk invariants: unique image paths, image files present on disk,
    /// cached centres consistent with projection, unit quaternions.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut missing = Vec::new();
        for s in &self.samples {
            if !seen.insert(&s.image_path) {
                return Err(Error::Data(format!(
                    "duplicate image path {}",
                    s.image_path.display()
                )));
            }
            if fs::metadata(&s.image_path).is_err() {
                missing.push(s.image_path.display().to_string());
            }
            s.check_center()?;
            let n = s.pose.q.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Data(format!(
                    "{}: quaternion norm {} is not unit",
                    s.image_path.display(),
                    n
                )));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "{} image file(s) missing: {}",
                missing.len(),
                truncate_list(&missing)
            )));
        }
        Ok(())
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn join_filename(parent: &Path, filename: &str) -> PathBuf {
    let p = Path::new(filename);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        parent.join(p)
    }
}

/// Accepts quaternions within 1e-3 of unit norm and renormalizes exactly.
fn unit_or_error(q: Quaternion, what: &str) -> Result<Quaternion> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
        return Err(Error::Data(format!(
            "{what}: quaternion norm {n} is too far from unit"
        )));
    }
    q.normalized()
}

fn truncate_list(items: &[String]) -> String {
    const SHOW: usize = 10;
    if items.len() <= SHOW {
        items.join("; ")
    } else {
        format!("{}; and {} more", items[..SHOW].join("; "), items.len() - SHOW)
    }
}

/// Key names of an external label file, externalized so vendor variants
/// map without code changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyMap {
    #[serde(default = "default_filename_key")]
    pub filename_key: String,
    #[serde(default = "default_q_key")]
    pub q_key: String,
    #[serde(default = "default_t_key")]
    pub t_key: String,
}

fn default_filename_key() -> String {
    "filename".into()
}

fn default_q_key() -> String {
    "q".into()
}

fn default_t_key() -> String {
    "t".into()
}

impl Default for KeyMap {
    fn default() -> Self {
        KeyMap {
            filename_key: default_filename_key(),
            q_key: default_q_key(),
            t_key: default_t_key(),
        }
    }
}

impl KeyMap {
    /// Loads a mapping table from a JSON file; unknown keys are rejected,
    /// missing ones fall back to the defaults.
    pub fn load(path: &Path) -> Result<KeyMap> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("key map {}: {e}", path.display())))
    }
}

/// Ingestion result: the manifest plus per-record diagnostics for rows
/// that were dropped (currently only non-positive depth).
#[derive(Debug)]
pub struct IngestReport {
    pub manifest: Manifest,
    pub rejected: Vec<String>,
}

/// Ingests an external label file: a JSON array of records carrying a
/// filename, a 4-component quaternion, and a 3-component translation in
/// meters, with key names taken from `keys` and component order from
/// `order`. Structural defects (wrong arity, non-numeric fields, missing
/// or unreadable images) are hard errors listing the offending records;
/// records with z <= 0 are dropped with a diagnostic and the rest kept.
pub fn ingest_speed_format(
    root_dir: &Path,
    label_file: &Path,
    keys: &KeyMap,
    order: QuatOrder,
    camera: Camera,
) -> Result<IngestReport> {
    let text = fs::read_to_string(label_file).map_err(|e| Error::io(label_file, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("label file {}: {e}", label_file.display())))?;
    let records = value.as_array().ok_or_else(|| {
        Error::Data(format!(
            "label file {} must be a JSON array of records",
            label_file.display()
        ))
    })?;

    let mut bad = Vec::new();
    let mut rejected = Vec::new();
    let mut samples = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        match parse_record(rec, i, keys, order, root_dir, camera) {
            Ok(ParsedRecord::Sample(s)) => samples.push(s),
            Ok(ParsedRecord::NonPositiveDepth(msg)) => rejected.push(msg),
            Err(msg) => bad.push(msg),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!(
            "{} malformed record(s) in {}: {}",
            bad.len(),
            label_file.display(),
            truncate_list(&bad)
        )));
    }
    for msg in &rejected {
        log::warn!("ingest: {msg}");
    }
    let manifest = Manifest {
        samples,
        split_tag: SplitTag::All,
        quaternion_order: order,
        source: ManifestSource::SpeedFormat,
        camera,
        seed: 0,
    };
    manifest.validate()?;
    Ok(IngestReport { manifest, rejected })
}

enum ParsedRecord {
    Sample(Sample),
    NonPositiveDepth(String),
}

fn parse_record(
    rec: &serde_json::Value,
    index: usize,
    keys: &KeyMap,
    order: QuatOrder,
    root_dir: &Path,
    camera: Camera,
) -> std::result::Result<ParsedRecord, String> {
    let obj = rec
        .as_object()
        .ok_or_else(|| format!("record {index}: not a JSON object"))?;
    let filename = obj
        .get(&keys.filename_key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| format!("record {index}: missing string field {:?}", keys.filename_key))?;
    let tag = format!("record {index} ({filename})");

    let q_raw = numeric_array(obj.get(&keys.q_key), &keys.q_key, &tag)?;
    if q_raw.len() != 4 {
        return Err(format!(
            "{tag}: field {:?} must have 4 components, got {}",
            keys.q_key,
            q_raw.len()
        ));
    }
    let t_raw = numeric_array(obj.get(&keys.t_key), &keys.t_key, &tag)?;
    if t_raw.len() != 3 {
        return Err(format!(
            "{tag}: field {:?} must have 3 components, got {}",
            keys.t_key,
            t_raw.len()
        ));
    }
    let q4 = [q_raw[0], q_raw[1], q_raw[2], q_raw[3]];
    let q = match order {
        QuatOrder::Wxyz => Quaternion::from_wxyz(q4),
        QuatOrder::Xyzw => Quaternion::from_xyzw(q4),
    };
    let q = unit_or_error(q, &tag).map_err(|e| e.to_string())?;
    let t: Vec3 = [t_raw[0], t_raw[1], t_raw[2]];
    if t[2] <= 0.0 {
        return Ok(ParsedRecord::NonPositiveDepth(format!(
            "{tag}: t.z = {} is not positive, record dropped",
            t[2]
        )));
    }

    let image_path = root_dir.join(filename);
    let (w, h) = image::image_dimensions(&image_path)
        .map_err(|e| format!("{tag}: image {}: {e}", image_path.display()))?;
    let sample = Sample::new(
        image_path,
        Pose { t, q },
        camera,
        w as usize,
        h as usize,
    )
    .map_err(|e| format!("{tag}: {e}"))?;
    Ok(ParsedRecord::Sample(sample))
}

fn numeric_array(
    v: Option<&serde_json::Value>,
    key: &str,
    tag: &str,
) -> std::result::Result<Vec<f64>, String> {
    let arr = v
        .and_then(|v| v.as_array())
        .ok_or_else(|| format!("{tag}: missing array field {key:?}"))?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| format!("{tag}: field {key:?} has a non-numeric component"))
        })
        .collect()
}

/// Disjoint reproducible split: a seeded shuffle of the index set, then
/// the first `n_train` and the next `n_val` samples.
pub fn split_manifest(
    m: &Manifest,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if n_train + n_val > m.samples.len() {
        return Err(Error::Config(format!(
            "split needs n_train + n_val <= sample count: {} + {} > {}",
            n_train,
            n_val,
            m.samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..m.samples.len()).collect();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let pick = |range: std::ops::Range<usize>, tag: SplitTag| Manifest {
        samples: idx[range].iter().map(|&i| m.samples[i].clone()).collect(),
        split_tag: tag,
        quaternion_order: m.quaternion_order,
        source: m.source,
        camera: m.camera,
        seed: m.seed,
    };
    Ok((
        pick(0..n_train, SplitTag::Train),
        pick(n_train..n_train + n_val, SplitTag::Val),
    ))
}

/// Calibrates the box-depth constant `K_O` from a labeled manifest.
///
/// Per sample the apparent extent (largest projected dimension, original
/// pixels) times depth is computed; the box side `K_O / z` is sized so the
/// median-extent target occupies [`crate::roi::BOX_COVERAGE`] of its box,
/// keeping the whole body inside. Synthetic corpora project the known body
/// geometry exactly; ingested corpora approximate extent as
/// `f * diameter / z` from a caller-supplied object diameter in meters.
pub fn calibrate_k_object(m: &Manifest, object_diameter_m: Option<f64>) -> Result<f64> {
    if m.samples.is_empty() {
        return Err(Error::Config("calibration needs a non-empty manifest".into()));
    }
    let mut products = Vec::with_capacity(m.samples.len());
    match (m.source, object_diameter_m) {
        (ManifestSource::Synthetic, Some(_)) => {
            return Err(Error::Config(
                "synthetic manifests project the body geometry; \
                 an object diameter only applies to ingested data"
                    .into(),
            ));
        }
        (ManifestSource::Synthetic, None) => {
            for s in &m.samples {
                let extent = render::projected_extent_px(&s.pose, &s.intrinsics)?;
                products.push(s.pose.t[2] * extent);
            }
        }
        (ManifestSource::SpeedFormat, Some(d)) => {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Config(format!(
                    "object diameter must be positive and finite, got {d}"
                )));
            }
            for s in &m.samples {
                let z = s.pose.t[2];
                if !(z > 0.0) {
                    return Err(Error::Data(format!(
                        "calibration sample at {} has non-positive depth {z}",
                        s.image_path.display()
                    )));
                }
                let f = s.intrinsics.fx.max(s.intrinsics.fy);
                products.push(z * (f * d / z));
            }
        }
        (ManifestSource::SpeedFormat, None) => {
            return Err(Error::Config(
                "ingested manifests carry no body geometry; \
                 pass the object diameter in meters to calibrate"
                    .into(),
            ));
        }
    }
    products.sort_by(|a, b| a.total_cmp(b));
    let n = products.len();
    let median = if n % 2 == 1 {
        products[n / 2]
    } else {
        0.5 * (products[n / 2 - 1] + products[n / 2])
    };
    Ok(median / crate::roi::BOX_COVERAGE)
}

/// A resampled image together with its training targets expressed at the
/// network input resolution.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    /// (1, rows, cols) grayscale intensities in [0, 1].
    pub image: Array3<f64>,
    /// Metric translation target; meters are resolution-independent.
    pub t: Vec3,
    /// Unit orientation target.
    pub q: Quaternion,
    /// Projected centre rescaled proportionally to input pixels.
    pub center_input_px: (f64, f64),
    /// The same centre in signed normalized coordinates.
    pub center_norm: (f64, f64),
    /// Input pixels per original pixel, per axis (u, v).
    pub scale_uv: (f64, f64),
}

/// Loads a sample's image, resamples it to `target` = (rows, cols), and
/// rescales the cached centre by the same per-axis factors.
pub fn preprocess(sample: &Sample, target: (usize, usize)) -> Result<Preprocessed> {
    let image = load_image_gray(&sample.image_path)?;
    let (_, h, w) = image.dim();
    if (h, w) != (sample.height, sample.width) {
        return Err(Error::Data(format!(
            "{}: file is {}x{} but the manifest says {}x{}",
            sample.image_path.display(),
            h,
            w,
            sample.height,
            sample.width
        )));
    }
    let (tr, tc) = target;
    let resized = resize_bilinear(&image, tr, tc);
    let su = tc as f64 / w as f64;
    let sv = tr as f64 / h as f64;
    let center_input_px = (sample.center_px.0 * su, sample.center_px.1 * sv);
    let center_norm = pixel_to_normalized(center_input_px, tc, tr);
    Ok(Preprocessed {
        image: resized,
        t: sample.pose.t,
        q: sample.pose.q,
        center_input_px,
        center_norm,
        scale_uv: (su, sv),
    })
}

/// Decodes an image file to a (1, rows, cols) grayscale array in [0, 1].
pub fn load_image_gray(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((1, h as usize, w as usize));
    {
        let plane = out.as_slice_mut().expect("contiguous");
        for (i, px) in img.as_raw().iter().enumerate() {
            plane[i] = *px as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Bilinear resampling to (rows, cols) with the pixel-centre mapping
/// src = (dst + 1/2) * scale - 1/2 and edge clamping.
pub fn resize_bilinear(image: &Array3<f64>, rows: usize, cols: usize) -> Array3<f64> {
    let (ch, h, w) = image.dim();
    if (h, w) == (rows, cols) {
        return image.clone();
    }
    let sy = h as f64 / rows as f64;
    let sx = w as f64 / cols as f64;
    let mut out = Array3::zeros((ch, rows, cols));
    for c in 0..ch {
        let src = image.index_axis(ndarray::Axis(0), c);
        let src = src.as_slice().expect("contiguous");
        let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
        let dst = dst.as_slice_mut().expect("contiguous");
        for r in 0..rows {
            let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for cc in 0..cols {
                let fx = ((cc as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[r * cols + cc] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}
