//! Runtime self-diagnostics behind the `selftest` subcommand: central
//! finite-difference verification of every shipped analytic loss
//! gradient, and fast invariant suites over the geometry, box, and loss
//! contracts. Each check returns a named pass/fail outcome with the
//! measured quantity in the detail line.

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::geometry::{geodesic_angle, random_unit_quaternion, Quaternion};
use crate::heatmap::{
    dsnt, dsnt_backward, gaussian_target, js_backward_p, js_backward_q, js_divergence,
    normalize_heatmap, normalized_to_pixel, pixel_to_normalized, Heatmap,
};
use crate::losses::{
    center_loss, center_loss_backward, compose_losses, position_loss, position_loss_backward,
    rotation_loss, rotation_loss_floor,
};
use crate::network::{Model, ModelConfig};
use crate::nn::graph::{Graph, Value};
use crate::nn::{ParamGrads, ParamStore};
use crate::roi::{augment_box, bounding_box_from_depth, BoundingBox};

/// Maximum accepted relative error between analytic and central
/// finite-difference gradients.
pub const GRAD_TOL: f64 = 1e-4;

/// One named check with its measured evidence.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> CheckOutcome {
        CheckOutcome { name: name.to_string(), passed, detail }
    }
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
pub fn rel_error(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8)
}

fn central_diff(f: &mut dyn FnMut(f64) -> f64, at: f64) -> f64 {
    let eps = 1e-6;
    (f(at + eps) - f(at - eps)) / (2.0 * eps)
}

fn grad_outcome(name: &str, instances: usize, max_rel: f64) -> CheckOutcome {
    CheckOutcome::new(
        name,
        max_rel < GRAD_TOL,
        format!("max rel error {max_rel:.3e} over {instances} instances (tol {GRAD_TOL:.0e})"),
    )
}

/// Strictly positive random heatmap (softmax of bounded logits), with
/// every entry far above the finite-difference step so perturbed copies
/// stay in the divergence's domain.
fn random_heatmap(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Heatmap {
    let raw = Heatmap::raw(ndarray::Array2::from_shape_fn((rows, cols), |_| {
        rng.random_range(-1.0..1.0)
    }));
    normalize_heatmap(&raw).expect("finite logits")
}

fn probe_indices(rng: &mut ChaCha12Rng, rows: usize, cols: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.random_range(0..rows), rng.random_range(0..cols)))
        .collect()
}

// ---------------------------------------------------------------------
// Gradient checks. Each verifies the loss's own shipped analytic
// backward against central differences on random instances.

/// DSNT is linear in the heatmap; checked through a random linear
/// functional of the predicted coordinates.
fn check_dsnt(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = stream(seed, 1);
    let mut max_rel: f64 = 0.0;
    for _ in 0..instances {
        let (rows, cols) = (rng.random_range(4..=9), rng.random_range(4..=9));
        let h = random_heatmap(&mut rng, rows, cols);
        let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let ana = dsnt_backward(rows, cols, (a, b));
        for (i, j) in probe_indices(&mut rng, rows, cols, 4) {
            let mut f = |t: f64| {
                let mut values = h.values.clone();
                values[(i, j)] = t;
                let (x, y) = dsnt(&Heatmap { values, normalized: true }).expect("shape fixed");
                a * x + b * y
            };
            let num = central_diff(&mut f, h.values[(i, j)]);
            max_rel = max_rel.max(rel_error(num, ana[(i, j)]));
        }
    }
    grad_outcome("grad dsnt", instances, max_rel)
}

fn check_js(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = stream(seed, 2);
    let mut max_rel: f64 = 0.0;
    for _ in 0..instances {
        let (rows, cols) = (rng.random_range(4..=9), rng.random_range(4..=9));
        let p = random_heatmap(&mut rng, rows, cols);
        let q = random_heatmap(&mut rng, rows, cols);
        let ana_p = js_backward_p(&p, &q);
        let ana_q = js_backward_q(&p, &q);
        for (i, j) in probe_indices(&mut rng, rows, cols, 3) {
            let mut fp = |t: f64| {
                let mut values = p.values.clone();
                values[(i, j)] = t;
                js_divergence(&Heatmap { values, normalized: true }, &q).expect("positive entries")
            };
            let num = central_diff(&mut fp, p.values[(i, j)]);
            max_rel = max_rel.max(rel_error(num, ana_p[(i, j)]));
            let mut fq = |t: f64| {
                let mut values = q.values.clone();
                values[(i, j)] = t;
                js_divergence(&p, &Heatmap { values, normalized: true }).expect("positive entries")
            };
            let num = central_diff(&mut fq, q.values[(i, j)]);
            max_rel = max_rel.max(rel_error(num, ana_q[(i, j)]));
        }
    }
    grad_outcome("grad js_divergence", instances, max_rel)
}

fn check_position(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = stream(seed, 3);
    let mut max_rel: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let draw3 = |rng: &mut ChaCha12Rng| {
            [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ]
        };
        let t_true: Vec<[f64; 3]> = (0..n).map(|_| draw3(&mut rng)).collect();
        let t_pred: Vec<[f64; 3]> = (0..n).map(|_| draw3(&mut rng)).collect();
        let ana = position_loss_backward(&t_true, &t_pred).expect("matched batch");
        for _ in 0..4 {
            let s = rng.random_range(0..n);
            let k = rng.random_range(0..3);
            let mut f = |t: f64| {
                let mut pred = t_pred.clone();
                pred[s][k] = t;
                position_loss(&t_true, &pred).expect("matched batch")
            };
            let num = central_diff(&mut f, t_pred[s][k]);
            max_rel = max_rel.max(rel_error(num, ana[s][k]));
        }
    }
    grad_outcome("grad position_loss", instances, max_rel)
}

fn check_center(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, 4);
    let mut max_rel: f64 = 0.0;
    for _ in 0..instances {
        let n = rng.random_range(1..=3);
        let (rows, cols) = (8, 8);
        let sigma2 = rng.random_range(0.5..3.0);
        let lambda = rng.random_range(0.3..2.0);
        let mut c_true = Vec::with_capacity(n);
        let mut c_pred = Vec::with_capacity(n);
        for _ in 0..n {
            let t: (f64, f64) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            // Keep the pair separated: the Euclidean term has an
            // undirected subgradient at zero distance.
            let p = loop {
                let p: (f64, f64) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
                if ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() > 1e-2 {
                    break p;
                }
            };
            c_true.push(t);
            c_pred.push(p);
        }
        let h_pred: Vec<Heatmap> = (0..n).map(|_| random_heatmap(&mut rng, rows, cols)).collect();
        let (grad_c, grad_h) = center_loss_backward(&c_true, &c_pred, &h_pred, sigma2, lambda)?;

        let s = rng.random_range(0..n);
        for axis in 0..2 {
            let mut f = |t: f64| {
                let mut pred = c_pred.clone();
                if axis == 0 {
                    pred[s].0 = t;
                } else {
                    pred[s].1 = t;
                }
                center_loss(&c_true, &pred, &h_pred, sigma2, lambda).expect("valid instance").center
            };
            let at = if axis == 0 { c_pred[s].0 } else { c_pred[s].1 };
            let ana = if axis == 0 { grad_c[s].0 } else { grad_c[s].1 };
            max_rel = max_rel.max(rel_error(central_diff(&mut f, at), ana));
        }
        for (i, j) in probe_indices(&mut rng, rows, cols, 3) {
            let mut f = |t: f64| {
                let mut maps = h_pred.clone();
                maps[s].values[(i, j)] = t;
                center_loss(&c_true, &c_pred, &maps, sigma2, lambda).expect("valid instance").center
            };
            let num = central_diff(&mut f, h_pred[s].values[(i, j)]);
            max_rel = max_rel.max(rel_error(num, grad_h[s][(i, j)]));
        }
    }
    Ok(grad_outcome("grad center_loss", instances, max_rel))
}

/// Rotation loss through quaternion normalization (the trained path):
/// gradient w.r.t. the raw pre-normalization 4-vector, away from the
/// arccos clamp.
fn check_rotation(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = stream(seed, 5);
    let mut max_rel: f64 = 0.0;
    for _ in 0..instances {
        let target = random_unit_quaternion(&mut rng);
        let raw: Array1<f64> = loop {
            let raw =
                Array1::from_shape_fn(4, |_| rng.random_range(-1.5..1.5f64) + 0.1);
            let norm = raw.dot(&raw).sqrt();
            if norm < 0.3 {
                continue;
            }
            let unit = Quaternion::from_wxyz([
                raw[0] / norm,
                raw[1] / norm,
                raw[2] / norm,
                raw[3] / norm,
            ]);
            if unit.dot(target).abs() < 0.9 {
                break raw;
            }
        };
        let eval = |raw: &Array1<f64>| -> (f64, Option<Array1<f64>>) {
            let ps = ParamStore::new();
            let mut g = Graph::new();
            let input = g.input_vec(raw.clone());
            let qn = g.quat_normalize(input);
            let loss = g.rot_loss(qn, target);
            let mut grads = ParamGrads::zeros_for(&ps);
            let table = g.backward(loss, 1.0, &ps, &mut grads);
            let grad = match &table[input] {
                Some(Value::Vec1(v)) => Some(v.clone()),
                _ => None,
            };
            (g.scalar(loss), grad)
        };
        let (_, grad) = eval(&raw);
        let ana = grad.expect("gradient reaches the raw quaternion");
        for k in 0..4 {
            let mut f = |t: f64| {
                let mut r = raw.clone();
                r[k] = t;
                eval(&r).0
            };
            let num = central_diff(&mut f, raw[k]);
            max_rel = max_rel.max(rel_error(num, ana[k]));
        }
    }
    grad_outcome("grad rotation_loss", instances, max_rel)
}

fn stream(seed: u64, lane: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

/// Central finite-difference verification of every shipped analytic loss
/// gradient, `instances` random instances each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_dsnt(instances, seed),
        check_js(instances, seed),
        check_position(instances, seed),
        check_center(instances, seed)?,
        check_rotation(instances, seed),
    ])
}

// ---------------------------------------------------------------------
// Invariant checks.

fn dsnt_analytic_cases() -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();

    // Uniform maps have their expectation at the exact grid centre.
    for (rows, cols) in [(4, 4), (5, 7), (12, 9)] {
        let (x, y) = dsnt(&Heatmap::uniform(rows, cols))?;
        worst = worst.max(x.abs()).max(y.abs());
        if x.abs() > 1e-9 || y.abs() > 1e-9 {
            failures.push(format!("uniform {rows}x{cols} -> ({x:.2e},{y:.2e})"));
        }
    }

    // A point mass sits exactly on its grid node: first pixel of a 4x4
    // map is (-0.75, -0.75).
    let mut point = ndarray::Array2::zeros((4, 4));
    point[(0, 0)] = 1.0;
    let (x, y) = dsnt(&Heatmap { values: point, normalized: true })?;
    if (x, y) != (-0.75, -0.75) {
        failures.push(format!("point mass -> ({x},{y}), expected (-0.75,-0.75) exactly"));
    }

    // Gaussian target round trip: placing a Gaussian at an interior
    // centre and reading it back lands within one heatmap pixel.
    let mut rng = stream(97, 11);
    let mut worst_px: f64 = 0.0;
    for _ in 0..50 {
        let (rows, cols) = (rng.random_range(8..=14), rng.random_range(8..=14));
        let sigma2 = rng.random_range(0.8..2.5);
        let u = rng.random_range(2.0..(cols as f64 - 3.0));
        let v = rng.random_range(2.0..(rows as f64 - 3.0));
        let c = pixel_to_normalized((u, v), cols, rows);
        let g = gaussian_target(c, sigma2, (rows, cols))?;
        let (x, y) = dsnt(&g)?;
        let (u2, v2) = normalized_to_pixel((x, y), cols, rows);
        let dist = ((u2 - u).powi(2) + (v2 - v).powi(2)).sqrt();
        worst_px = worst_px.max(dist);
        if dist > 1.0 {
            failures.push(format!("roundtrip {rows}x{cols} s2={sigma2:.2} off by {dist:.3} px"));
        }
    }

    Ok(CheckOutcome::new(
        "dsnt analytic cases",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "uniform |xy| <= {worst:.2e}; point mass exact; roundtrip worst {worst_px:.3} px"
            )
        } else {
            failures.join("; ")
        },
    ))
}

fn quaternion_metric_properties() -> Result<CheckOutcome> {
    let mut rng = stream(97, 12);
    let floor = rotation_loss_floor();
    let mut failures = Vec::new();
    let mut worst_self: f64 = 0.0;
    for _ in 0..200 {
        let q = random_unit_quaternion(&mut rng);
        let p = random_unit_quaternion(&mut rng);
        let self_angle = geodesic_angle(q, q);
        worst_self = worst_self.max(self_angle);
        if self_angle > floor {
            failures.push(format!("E(q,q) = {self_angle:.2e} above the clamp floor"));
        }
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        if geodesic_angle(p, q) != geodesic_angle(p, neg) {
            failures.push("double cover: E(p,q) != E(p,-q)".into());
        }
        if geodesic_angle(p, q) != geodesic_angle(q, p) {
            failures.push("symmetry: E(p,q) != E(q,p)".into());
        }
        let angle = geodesic_angle(p, q);
        if !(0.0..=std::f64::consts::PI + 1e-12).contains(&angle) {
            failures.push(format!("range: E = {angle} outside [0, pi]"));
        }
        if rotation_loss(&[q], &[q])? > floor {
            failures.push("loss floor: E_q(q,q) above clamp floor".into());
        }
    }
    for theta_deg in [10.0, 15.0, 90.0] {
        let theta = f64::to_radians(theta_deg);
        for _ in 0..20 {
            let axis = loop {
                let a = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0f64),
                ];
                if crate::geometry::norm3(a) > 0.1 {
                    break a;
                }
            };
            let q = Quaternion::from_axis_angle(axis, theta)?;
            let err = (geodesic_angle(q, Quaternion::IDENTITY) - theta).abs();
            if err > 1e-6 {
                failures.push(format!("axis-angle {theta_deg} deg off by {err:.2e} rad"));
            }
        }
    }
    Ok(CheckOutcome::new(
        "quaternion metric properties",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "200 pairs: identity <= {worst_self:.2e} rad (floor {floor:.2e}), double cover \
                 and symmetry exact, range held; axis-angle within 1e-6"
            )
        } else {
            failures.join("; ")
        },
    ))
}

fn box_depth_law() -> Result<CheckOutcome> {
    let mut rng = stream(97, 13);
    let mut worst_ulps: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.random_range(50.0..2000.0);
        let z = rng.random_range(5.0..40.0);
        let b = bounding_box_from_depth((0.0, 0.0), z, k)?;
        // side = K_O / z in one rounding; the product recovers K_O to
        // within 2 ulp, the sharpest f64 reading of "exactly".
        let ulps = (b.side * z - k).abs() / (f64::EPSILON * k);
        worst_ulps = worst_ulps.max(ulps);
    }
    Ok(CheckOutcome::new(
        "box-depth scaling law",
        worst_ulps <= 2.0,
        format!("side*z recovers K_O within {worst_ulps:.2} ulp over 1000 pairs, z in [5,40]"),
    ))
}

fn cda_statistics() -> Result<CheckOutcome> {
    let mut rng = stream(97, 14);
    let base = BoundingBox { center: (320.0, 240.0), side: 100.0 };
    let r = 0.15;
    let n = 10_000;
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    let mut side_held = true;
    for _ in 0..n {
        let b = augment_box(&base, r, &mut rng);
        side_held &= b.side == base.side;
        dx.push(b.center.0 - base.center.0);
        dy.push(b.center.1 - base.center.1);
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (mx, sx) = stats(&dx);
    let (my, sy) = stats(&dy);
    let mean_ok = mx.abs() <= 0.5 && my.abs() <= 0.5;
    let std_ok = (14.25..=15.75).contains(&sx) && (14.25..=15.75).contains(&sy);
    Ok(CheckOutcome::new(
        "crop augmentation statistics",
        mean_ok && std_ok && side_held,
        format!(
            "10k draws side=100 r=0.15: mean ({mx:.3},{my:.3}) px, std ({sx:.3},{sy:.3}) px, \
             side unchanged: {side_held}"
        ),
    ))
}

fn loss_composition_identities() -> Result<CheckOutcome> {
    let mut rng = stream(97, 15);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let position = rng.random_range(0.0..10.0);
        let euc = rng.random_range(0.0..2.0);
        let reg = rng.random_range(0.0..1.0);
        let lambda = rng.random_range(0.1..3.0);
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        let b = compose_losses(position, euc, reg, euc + lambda * reg, rotation)?;
        worst = worst
            .max((b.translation - (b.position + b.center)).abs())
            .max((b.pose - (b.translation + b.rotation)).abs());
    }
    Ok(CheckOutcome::new(
        "loss composition identities",
        worst <= 1e-9,
        format!("translation = position + center and pose = translation + rotation within {worst:.2e}"),
    ))
}

/// Structural rotation-gradient reach: how many translation-network
/// parameters receive a nonzero gradient from the rotation loss alone,
/// out of the total. Zero without heatmap conditioning; at least one
/// with it.
pub fn rotation_gradient_structure(hc: bool, seed: u64) -> Result<(usize, usize)> {
    let cfg = ModelConfig {
        input_size: (32, 32),
        crop_size: 16,
        heat_channels: 2,
        hc_enabled: hc,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut model = Model::build(&cfg, &mut rng)?;
    // Fix a valid positive depth so the untrained net yields a real box.
    let bias = model.params.id_of("t.head.fc3.b").expect("translation head bias");
    model.params.get_mut(bias).data.copy_from_slice(&[0.0, 0.0, 10.0]);
    let image = Array3::from_shape_fn((1, 32, 32), |_| rng.random_range(0.0..1.0));
    let mut g = Graph::new();
    let nodes = model.forward_pose_sample(&mut g, image, 160.0, (1.0, 1.0), None)?;
    // A target a fixed 0.5 rad away from the prediction keeps the loss
    // off the arccos clamp, where its gradient would vanish.
    let qv = g.vec1(nodes.q);
    let pred = Quaternion::from_wxyz([qv[0], qv[1], qv[2], qv[3]]);
    let target = pred.mul(Quaternion::from_axis_angle([1.0, 0.0, 0.0], 0.5)?);
    let loss = g.rot_loss(nodes.q, target);
    let mut grads = ParamGrads::zeros_for(&model.params);
    g.backward(loss, 1.0, &model.params, &mut grads);
    let t_ids = model.translation_param_ids();
    let total = t_ids.len();
    let nonzero = t_ids
        .iter()
        .filter(|&&pid| grads.get(pid).is_some_and(|s| s.iter().any(|&v| v != 0.0)))
        .count();
    Ok((nonzero, total))
}

fn rotation_gradient_flow() -> Result<CheckOutcome> {
    let (off_nonzero, off_total) = rotation_gradient_structure(false, 41)?;
    let (on_nonzero, on_total) = rotation_gradient_structure(true, 41)?;
    Ok(CheckOutcome::new(
        "rotation gradient reach",
        off_nonzero == 0 && on_nonzero >= 1,
        format!(
            "HC off: {off_nonzero}/{off_total} translation params touched; \
             HC on: {on_nonzero}/{on_total}"
        ),
    ))
}

/// Fast invariant suites over geometry, box, augmentation, loss
/// composition, and gradient-flow structure.
pub fn invariant_suite() -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        dsnt_analytic_cases()?,
        quaternion_metric_properties()?,
        box_depth_law()?,
        cda_statistics()?,
        loss_composition_identities()?,
        rotation_gradient_flow()?,
    ])
}
