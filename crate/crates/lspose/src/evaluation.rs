//! Pose error metrics, table-style report formatting, and box overlays.
//!
//! Translation errors are reported in meters, rotation errors in
//! degrees (computed in radians internally). All dispersions are
//! population standard deviations (divide by N), recorded as
//! `"std_kind": "population"` in report JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_angle, Pose};
use crate::roi::BoundingBox;

/// Mean and population standard deviation of a sample of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub mean: f64,
    pub std: f64,
}

impl Dispersion {
    /// Two-pass mean / population std (divide by N).
    pub fn of(values: &[f64]) -> Dispersion {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Dispersion { mean, std: var.max(0.0).sqrt() }
    }
}

/// Aggregate pose errors over an evaluation set.
///
/// Field order matches the report JSON schema:
/// `{"n", "E_x", "E_y", "E_z", "E_t": {"mean","std"},
///   "E_q_deg": {"mean","std"}, "std_kind": "population"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Mean absolute per-coordinate translation errors, meters.
    #[serde(rename = "E_x")]
    pub e_x: f64,
    #[serde(rename = "E_y")]
    pub e_y: f64,
    #[serde(rename = "E_z")]
    pub e_z: f64,
    /// Per-sample Euclidean translation error, meters.
    #[serde(rename = "E_t")]
    pub e_t: Dispersion,
    /// Per-sample geodesic rotation error, degrees.
    #[serde(rename = "E_q_deg")]
    pub e_q_deg: Dispersion,
    pub std_kind: String,
}

/// Per-sample translation and rotation errors, in case a caller needs
/// the raw distributions behind a [`MetricsReport`].
#[derive(Debug, Clone)]
pub struct SampleErrors {
    /// Euclidean translation errors, meters.
    pub e_t: Vec<f64>,
    /// Geodesic rotation errors, radians.
    pub e_q_rad: Vec<f64>,
}

/// Computes per-coordinate mean absolute errors, the dispersion of the
/// per-sample Euclidean translation error, and the dispersion of the
/// per-sample geodesic rotation angle (degrees).
pub fn compute_metrics(preds: &[Pose], truths: &[Pose]) -> Result<MetricsReport> {
    Ok(compute_metrics_detailed(preds, truths)?.0)
}

/// [`compute_metrics`] plus the per-sample error vectors.
pub fn compute_metrics_detailed(
    preds: &[Pose],
    truths: &[Pose],
) -> Result<(MetricsReport, SampleErrors)> {
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "metrics need equally many predictions and truths, got {} vs {}",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    let n = preds.len() as f64;
    let mut abs = [0.0f64; 3];
    let mut e_t = Vec::with_capacity(preds.len());
    let mut e_q_rad = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(truths) {
        let d = [p.t[0] - g.t[0], p.t[1] - g.t[1], p.t[2] - g.t[2]];
        for c in 0..3 {
            abs[c] += d[c].abs();
        }
        e_t.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
        e_q_rad.push(geodesic_angle(p.q, g.q));
    }
    let deg: Vec<f64> = e_q_rad.iter().map(|r| r.to_degrees()).collect();
    let report = MetricsReport {
        n: preds.len(),
        e_x: abs[0] / n,
        e_y: abs[1] / n,
        e_z: abs[2] / n,
        e_t: Dispersion::of(&e_t),
        e_q_deg: Dispersion::of(&deg),
        std_kind: "population".into(),
    };
    for (name, v) in [
        ("E_x", report.e_x),
        ("E_y", report.e_y),
        ("E_z", report.e_z),
        ("E_t mean", report.e_t.mean),
        ("E_t std", report.e_t.std),
        ("E_q mean", report.e_q_deg.mean),
        ("E_q std", report.e_q_deg.std),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("metric {name} is not finite ({v})")));
        }
    }
    Ok((report, SampleErrors { e_t, e_q_rad }))
}

/// One row of an ablation comparison: a configuration label triple and
/// the metrics its run achieved.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEntry {
    /// Orientation-encoder weight source ("random" or "pretrained").
    pub init: String,
    /// Heatmap-conditioning input enabled.
    pub hc: bool,
    /// Crop-displacement augmentation enabled.
    pub cda: bool,
    pub report: MetricsReport,
}

/// Published table layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStyle {
    /// Per-coordinate translation breakdown: E_x, E_y, E_z, E_t.
    Table2,
    /// Ablation layout: init, HC, CDA, E_t, E_q.
    Table4,
    /// Summary: E_t, E_q.
    Table5,
}

impl std::str::FromStr for ReportStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<ReportStyle> {
        match s {
            "table2" => Ok(ReportStyle::Table2),
            "table4" => Ok(ReportStyle::Table4),
            "table5" => Ok(ReportStyle::Table5),
            other => Err(Error::Usage(format!(
                "unknown report style {other:?} (expected table2, table4, or table5)"
            ))),
        }
    }
}

fn fmt_pm(d: Dispersion) -> String {
    format!("{:.3} \u{b1} {:.3}", d.mean, d.std)
}

fn on_off(b: bool) -> &'static str {
    if b { "on" } else { "off" }
}

/// Fixed-width text table: headers plus rows, two-space gutters.
fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |out: &mut String, cells: &[String]| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{cell:<w$}");
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    };
    let head: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    emit(&mut out, &head);
    for row in rows {
        emit(&mut out, row);
    }
    out
}

/// Formats one report in a published table layout. Returns the text
/// table and a JSON mirror `{"columns": […], "rows": […]}`.
///
/// The table4 layout describes ablation rows; formatting a bare report
/// in that style leaves the configuration cells null ("-" in text) —
/// use [`format_ablation`] when entries carry their configurations.
pub fn format_report(report: &MetricsReport, style: ReportStyle) -> (String, Value) {
    match style {
        ReportStyle::Table2 => {
            let headers = ["E_x", "E_y", "E_z", "E_t"];
            let row = vec![
                format!("{:.3}", report.e_x),
                format!("{:.3}", report.e_y),
                format!("{:.3}", report.e_z),
                fmt_pm(report.e_t),
            ];
            let json = json!({
                "columns": headers,
                "rows": [{
                    "E_x": report.e_x,
                    "E_y": report.e_y,
                    "E_z": report.e_z,
                    "E_t": report.e_t,
                }],
            });
            (render_table(&headers, &[row]), json)
        }
        ReportStyle::Table4 => {
            let headers = ["init", "HC", "CDA", "E_t", "E_q"];
            let row = vec![
                "-".to_string(),
                "-".to_string(),
                "-".to_string(),
                fmt_pm(report.e_t),
                fmt_pm(report.e_q_deg),
            ];
            let json = json!({
                "columns": headers,
                "rows": [{
                    "init": Value::Null,
                    "HC": Value::Null,
                    "CDA": Value::Null,
                    "E_t": report.e_t,
                    "E_q": report.e_q_deg,
                }],
            });
            (render_table(&headers, &[row]), json)
        }
        ReportStyle::Table5 => {
            let headers = ["E_t", "E_q"];
            let row = vec![fmt_pm(report.e_t), fmt_pm(report.e_q_deg)];
            let json = json!({
                "columns": headers,
                "rows": [{"E_t": report.e_t, "E_q": report.e_q_deg}],
            });
            (render_table(&headers, &[row]), json)
        }
    }
}

/// Formats ablation rows in the table4 layout with their configuration
/// cells filled in.
pub fn format_ablation(entries: &[AblationEntry]) -> (String, Value) {
    let headers = ["init", "HC", "CDA", "E_t", "E_q"];
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.init.clone(),
                on_off(e.hc).to_string(),
                on_off(e.cda).to_string(),
                fmt_pm(e.report.e_t),
                fmt_pm(e.report.e_q_deg),
            ]
        })
        .collect();
    let json_rows: Vec<Value> = entries
        .iter()
        .map(|e| {
            json!({
                "init": e.init,
                "HC": e.hc,
                "CDA": e.cda,
                "E_t": e.report.e_t,
                "E_q": e.report.e_q_deg,
            })
        })
        .collect();
    let json = json!({"columns": headers, "rows": json_rows});
    (render_table(&headers, &rows), json)
}

const OVERLAY_INK: f64 = 1.0;
const CENTER_DOT_RADIUS: f64 = 2.5;

/// Draws the square box outline and a filled center dot onto a copy of
/// `image` (single-channel, values in [0, 1]) and writes it as an 8-bit
/// grayscale PNG. Pure annotation: pixels the box and dot do not touch
/// are unchanged, and out-of-frame portions are clipped.
pub fn render_overlay(
    image: &Array3<f64>,
    bbox: &BoundingBox,
    center: (f64, f64),
    out_path: &Path,
) -> Result<()> {
    let (c, rows, cols) = image.dim();
    if c != 1 {
        return Err(Error::Contract(format!(
            "overlay input must be single-channel, got {c} channels"
        )));
    }
    let mut buf: Vec<f64> = image.iter().copied().collect();

    let half = bbox.side / 2.0;
    let (u0, u1) = (bbox.center.0 - half, bbox.center.0 + half);
    let (v0, v1) = (bbox.center.1 - half, bbox.center.1 + half);
    let corners = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)];
    for i in 0..4 {
        crate::data::render::draw_segment_aa(
            &mut buf,
            cols,
            rows,
            corners[i],
            corners[(i + 1) % 4],
            OVERLAY_INK,
        );
    }
    draw_dot_aa(&mut buf, cols, rows, center, CENTER_DOT_RADIUS, OVERLAY_INK);

    let gray: Vec<u8> = buf.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let png = crate::data::render::encode_png(&gray, cols, rows)?;
    fs::write(out_path, png).map_err(|e| Error::io(out_path, e))
}

/// Antialiased filled disc, max-composited like the line renderer.
fn draw_dot_aa(buf: &mut [f64], w: usize, h: usize, center: (f64, f64), radius: f64, ink: f64) {
    let pad = radius + 1.0;
    if center.0 < -pad || center.1 < -pad {
        // Entirely left of / above the frame; the loop bounds below
        // would clamp to column or row 0 and wrongly ink the border.
        return;
    }
    let c0 = (center.0 - pad).floor().max(0.0) as usize;
    let c1 = ((center.0 + pad).ceil() as isize).clamp(0, w as isize - 1) as usize;
    let r0 = (center.1 - pad).floor().max(0.0) as usize;
    let r1 = ((center.1 + pad).ceil() as isize).clamp(0, h as isize - 1) as usize;
    for r in r0..=r1 {
        for col in c0..=c1 {
            let du = col as f64 - center.0;
            let dv = r as f64 - center.1;
            let d = (du * du + dv * dv).sqrt();
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let v = buf[r * w + col].max(ink * cov);
                buf[r * w + col] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_unit_quaternion, Quaternion};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_poses(rng: &mut ChaCha12Rng, n: usize) -> Vec<Pose> {
        (0..n)
            .map(|_| Pose {
                t: [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(5.0..20.0),
                ],
                q: random_unit_quaternion(rng),
            })
            .collect()
    }

    #[test]
    fn identical_poses_give_all_zeros() {
        // Exactly representable unit quaternions: zeros are exact.
        let qs = [
            Quaternion::IDENTITY,
            Quaternion { w: 0.5, x: 0.5, y: 0.5, z: 0.5 },
            Quaternion { w: 0.0, x: 1.0, y: 0.0, z: 0.0 },
        ];
        let poses: Vec<Pose> =
            qs.iter().map(|&q| Pose { t: [0.25, -1.5, 8.0], q }).collect();
        let r = compute_metrics(&poses, &poses).unwrap();
        assert_eq!(r.n, 3);
        assert_eq!((r.e_x, r.e_y, r.e_z), (0.0, 0.0, 0.0));
        assert_eq!(r.e_t, Dispersion { mean: 0.0, std: 0.0 });
        assert_eq!(r.e_q_deg, Dispersion { mean: 0.0, std: 0.0 });
        assert_eq!(r.std_kind, "population");

        // Random unit quaternions are unit only to rounding; the angle
        // of a pose against itself stays below float noise.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let poses = random_poses(&mut rng, 5);
        let r = compute_metrics(&poses, &poses).unwrap();
        assert_eq!(r.e_t, Dispersion { mean: 0.0, std: 0.0 });
        assert!(r.e_q_deg.mean <= 1e-5);
    }

    #[test]
    fn single_sample_offset_1_2_2() {
        let q = Quaternion { w: 0.5, x: 0.5, y: 0.5, z: 0.5 };
        let truth = Pose { t: [0.5, -1.0, 9.0], q };
        let pred = Pose { t: [1.5, 1.0, 11.0], q };
        let r = compute_metrics(&[pred], &[truth]).unwrap();
        assert_eq!(r.e_x, 1.0);
        assert_eq!(r.e_y, 2.0);
        assert_eq!(r.e_z, 2.0);
        assert_eq!(r.e_t.mean, 3.0);
        assert_eq!(r.e_t.std, 0.0);
        assert_eq!(r.e_q_deg.mean, 0.0);
    }

    #[test]
    fn two_sample_population_std() {
        let q = Quaternion::IDENTITY;
        let truths = vec![Pose { t: [0.0, 0.0, 5.0], q }, Pose { t: [0.0, 0.0, 5.0], q }];
        let preds = vec![Pose { t: [1.0, 0.0, 5.0], q }, Pose { t: [0.0, 3.0, 5.0], q }];
        let r = compute_metrics(&preds, &truths).unwrap();
        assert_eq!(r.e_t.mean, 2.0);
        assert_eq!(r.e_t.std, 1.0);
    }

    #[test]
    fn bad_inputs_are_contract_errors() {
        let q = Quaternion::IDENTITY;
        let one = vec![Pose { t: [0.0, 0.0, 5.0], q }];
        assert!(matches!(compute_metrics(&one, &[]), Err(Error::Contract(_))));
        assert!(matches!(compute_metrics(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn permutation_invariant_within_rounding() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let truths = random_poses(&mut rng, 16);
        let preds = random_poses(&mut rng, 16);
        let a = compute_metrics(&preds, &truths).unwrap();
        let perm: Vec<usize> = (0..16).rev().collect();
        let p2: Vec<Pose> = perm.iter().map(|&i| preds[i]).collect();
        let t2: Vec<Pose> = perm.iter().map(|&i| truths[i]).collect();
        let b = compute_metrics(&p2, &t2).unwrap();
        for (x, y) in [
            (a.e_x, b.e_x),
            (a.e_y, b.e_y),
            (a.e_z, b.e_z),
            (a.e_t.mean, b.e_t.mean),
            (a.e_t.std, b.e_t.std),
            (a.e_q_deg.mean, b.e_q_deg.mean),
            (a.e_q_deg.std, b.e_q_deg.std),
        ] {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn rotation_error_bounded_and_sign_blind() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q1 = random_unit_quaternion(&mut rng);
            let q2 = random_unit_quaternion(&mut rng);
            let p = Pose { t: [0.0, 0.0, 5.0], q: q1 };
            let g = Pose { t: [0.0, 0.0, 5.0], q: q2 };
            let r = compute_metrics(&[p], &[g]).unwrap();
            assert!(r.e_q_deg.mean <= 180.0 + 1e-9);
        }
        let q = random_unit_quaternion(&mut rng);
        let neg = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        let p = Pose { t: [0.0, 0.0, 5.0], q };
        let g = Pose { t: [0.0, 0.0, 5.0], q: neg };
        let r = compute_metrics(&[p], &[g]).unwrap();
        assert!(r.e_q_deg.mean <= 1e-5, "sign flip gave {}", r.e_q_deg.mean);
    }

    #[test]
    fn triangle_inequality_on_means() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let truths = random_poses(&mut rng, 9);
            let preds = random_poses(&mut rng, 9);
            let r = compute_metrics(&preds, &truths).unwrap();
            assert!(r.e_t.mean <= r.e_x + r.e_y + r.e_z + 1e-12);
        }
    }

    #[test]
    fn metric_matches_rotation_loss_within_clamp_floor() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let truths = random_poses(&mut rng, 32);
        let preds = random_poses(&mut rng, 32);
        let (_, raw) = compute_metrics_detailed(&preds, &truths).unwrap();
        let mean_rad = raw.e_q_rad.iter().sum::<f64>() / 32.0;
        let q_true: Vec<Quaternion> = truths.iter().map(|g| g.q).collect();
        let q_pred: Vec<Quaternion> = preds.iter().map(|p| p.q).collect();
        let loss = crate::losses::rotation_loss(&q_true, &q_pred).unwrap();
        // The training loss clamps |dot| at 1 - 1e-7: a floor of
        // 2*acos(1-1e-7) ~ 8.9e-4 rad per sample bounds the gap.
        assert!((mean_rad - loss).abs() <= 9e-4, "{mean_rad} vs {loss}");
    }

    #[test]
    fn report_json_schema_is_pinned() {
        let q = Quaternion::IDENTITY;
        let poses = vec![Pose { t: [1.0, 2.0, 5.0], q }];
        let r = compute_metrics(&poses, &poses).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        let keys = ["\"n\"", "\"E_x\"", "\"E_y\"", "\"E_z\"", "\"E_t\"", "\"E_q_deg\"", "\"std_kind\""];
        let mut last = 0;
        for k in keys {
            let at = s.find(k).unwrap_or_else(|| panic!("missing key {k} in {s}"));
            assert!(at >= last, "key {k} out of order in {s}");
            last = at;
        }
        assert!(s.contains("\"E_t\":{\"mean\":"));
        assert!(s.contains("\"std_kind\":\"population\""));
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_styles_emit_pinned_columns() {
        let report = MetricsReport {
            n: 2,
            e_x: 0.1,
            e_y: 0.2,
            e_z: 0.3,
            e_t: Dispersion { mean: 0.519, std: 1.047 },
            e_q_deg: Dispersion { mean: 12.5, std: 3.25 },
            std_kind: "population".into(),
        };
        let (text2, json2) = format_report(&report, ReportStyle::Table2);
        assert_eq!(json2["columns"], json!(["E_x", "E_y", "E_z", "E_t"]));
        assert!(text2.contains("0.519 \u{b1} 1.047"));
        assert!(text2.lines().next().unwrap().starts_with("E_x"));

        let (_, json4) = format_report(&report, ReportStyle::Table4);
        assert_eq!(json4["columns"], json!(["init", "HC", "CDA", "E_t", "E_q"]));

        let (text5, json5) = format_report(&report, ReportStyle::Table5);
        assert_eq!(json5["columns"], json!(["E_t", "E_q"]));
        assert!(text5.contains("12.500 \u{b1} 3.250"));

        let entries = vec![
            AblationEntry { init: "random".into(), hc: false, cda: false, report: report.clone() },
            AblationEntry { init: "pretrained".into(), hc: true, cda: true, report: report.clone() },
        ];
        let (text_a, json_a) = format_ablation(&entries);
        assert_eq!(json_a["columns"], json!(["init", "HC", "CDA", "E_t", "E_q"]));
        assert_eq!(json_a["rows"].as_array().unwrap().len(), 2);
        assert_eq!(json_a["rows"][1]["HC"], json!(true));
        assert!(text_a.contains("pretrained  on   on"));

        // Deterministic for equal inputs.
        let again = format_report(&report, ReportStyle::Table2);
        assert_eq!(again.0, text2);
        assert_eq!(again.1, json2);
    }

    #[test]
    fn overlay_draws_box_and_dot_without_touching_the_rest() {
        let rows = 48;
        let cols = 64;
        let image = Array3::<f64>::from_elem((1, rows, cols), 0.25);
        let bbox = BoundingBox { center: (30.0, 22.0), side: 20.0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("overlay.png");
        render_overlay(&image, &bbox, (30.0, 22.0), &path).unwrap();

        let loaded = crate::data::load_image_gray(&path).unwrap();
        assert_eq!(loaded.dim(), (1, rows, cols));
        // All four edges inked: probe midpoints of each side.
        let probe = |u: usize, v: usize| loaded[[0, v, u]];
        assert!(probe(30, 12) > 0.9, "top edge");
        assert!(probe(30, 32) > 0.9, "bottom edge");
        assert!(probe(20, 22) > 0.9, "left edge");
        assert!(probe(40, 22) > 0.9, "right edge");
        assert!(probe(30, 22) > 0.9, "center dot");
        // Far corner untouched: 0.25 quantizes to 64/255 both ways.
        assert!((probe(2, 2) - (0.25f64 * 255.0).round() / 255.0).abs() < 1e-12);
        // Interior (inside box, outside dot) untouched.
        assert!((probe(25, 18) - (0.25f64 * 255.0).round() / 255.0).abs() < 1e-12);
    }

    #[test]
    fn overlay_clips_out_of_frame_boxes() {
        let rows = 32;
        let cols = 32;
        let image = Array3::<f64>::zeros((1, rows, cols));
        let bbox = BoundingBox { center: (2.0, 2.0), side: 30.0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clipped.png");
        render_overlay(&image, &bbox, (2.0, 2.0), &path).unwrap();
        let loaded = crate::data::load_image_gray(&path).unwrap();
        assert_eq!(loaded.dim(), (1, rows, cols));
        // The in-frame parts of the box are drawn...
        assert!(loaded[[0, 17, 10]] > 0.9);
        // ...and the opposite corner stays black.
        assert!(loaded[[0, 30, 30]] == 0.0);

        // Fully out-of-frame annotations change nothing.
        let path2 = dir.path().join("outside.png");
        let far = BoundingBox { center: (-50.0, -50.0), side: 10.0 };
        render_overlay(&image, &far, (-50.0, -50.0), &path2).unwrap();
        let loaded2 = crate::data::load_image_gray(&path2).unwrap();
        assert!(loaded2.iter().all(|&v| v == 0.0));
    }
}
