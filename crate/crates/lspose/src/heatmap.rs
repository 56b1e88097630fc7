//! Heatmap regression core: spatial softmax normalization, the
//! differentiable spatial-to-numerical transform (DSNT), the Gaussian
//! comparison target, and the Jensen-Shannon divergence regularizer.
//!
//! Coordinate conventions. A heatmap has `rows` x `cols` entries whose
//! pixel centres carry normalized coordinates in (-1, 1):
//!
//! ```text
//! x[j] = (2j - (W+1)) / W   for 1-indexed column j, W = cols
//! y[i] = (2i - (H+1)) / H   for 1-indexed row i,  H = rows
//! ```
//!
//! equivalently `x = (2u + 1 - W) / W` for the 0-indexed column u. The
//! inverse map back to 0-indexed pixel coordinates is
//! `u = (x*W + W - 1) / 2`. DSNT is the expectation of these grids under
//! a normalized heatmap.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Floor applied inside logarithms of divergence terms so that Gaussian
/// tails that underflow to zero cannot produce infinities.
pub const LOG_FLOOR: f64 = 1e-12;

/// A `rows x cols` grid of real values, optionally normalized to a
/// probability distribution (entries >= 0 summing to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Array2<f64>,
    pub normalized: bool,
}

impl Heatmap {
    /// Wraps raw (non-normalized) values.
    pub fn raw(values: Array2<f64>) -> Self {
        Heatmap {
            values,
            normalized: false,
        }
    }

    /// Uniform distribution over a `rows x cols` grid.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        let p = 1.0 / (rows * cols) as f64;
        Heatmap {
            values: Array2::from_elem((rows, cols), p),
            normalized: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    fn require_normalized(&self, op: &str) -> Result<()> {
        if !self.normalized {
            return Err(Error::Contract(format!(
                "{op} requires a normalized heatmap"
            )));
        }
        Ok(())
    }
}

/// Normalized x coordinate of 0-indexed column `u` on a `cols`-wide grid.
pub fn grid_x(u: usize, cols: usize) -> f64 {
    (2.0 * u as f64 + 1.0 - cols as f64) / cols as f64
}

/// Normalized y coordinate of 0-indexed row `v` on a `rows`-tall grid.
pub fn grid_y(v: usize, rows: usize) -> f64 {
    (2.0 * v as f64 + 1.0 - rows as f64) / rows as f64
}

/// Materialized coordinate grids (useful for tests and for gradient
/// formulas; the hot paths index [`grid_x`]/[`grid_y`] directly).
#[derive(Debug, Clone)]
pub struct CoordGrid {
    pub xgrid: Array2<f64>,
    pub ygrid: Array2<f64>,
}

impl CoordGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let xgrid = Array2::from_shape_fn((rows, cols), |(_, j)| grid_x(j, cols));
        let ygrid = Array2::from_shape_fn((rows, cols), |(i, _)| grid_y(i, rows));
        CoordGrid { xgrid, ygrid }
    }
}

/// Converts normalized coordinates to 0-indexed pixel coordinates
/// (u along width, v along height). Exact inverse of the grid formula.
pub fn normalized_to_pixel(xy: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    let w = width as f64;
    let h = height as f64;
    ((xy.0 * w + w - 1.0) / 2.0, (xy.1 * h + h - 1.0) / 2.0)
}

/// Converts 0-indexed pixel coordinates to normalized coordinates.
/// Exact inverse of [`normalized_to_pixel`].
pub fn pixel_to_normalized(uv: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    let w = width as f64;
    let h = height as f64;
    ((2.0 * uv.0 + 1.0 - w) / w, (2.0 * uv.1 + 1.0 - h) / h)
}

/// Spatial softmax over all pixels: strictly positive output summing
/// to 1, invariant to adding a constant to every raw entry.
pub fn normalize_heatmap(raw: &Heatmap) -> Result<Heatmap> {
    let mut max = f64::NEG_INFINITY;
    for &v in raw.values.iter() {
        if !v.is_finite() {
            return Err(Error::Numeric(
                "normalize_heatmap: non-finite raw entry".into(),
            ));
        }
        if v > max {
            max = v;
        }
    }
    let mut out = raw.values.mapv(|v| (v - max).exp());
    let sum: f64 = out.iter().sum();
    out.mapv_inplace(|v| v / sum);
    Ok(Heatmap {
        values: out,
        normalized: true,
    })
}

/// Backward pass of the spatial softmax: given p = softmax(raw) and the
/// gradient g w.r.t. p, the gradient w.r.t. raw is `p .* (g - <g, p>)`.
pub fn softmax_backward(p: &Array2<f64>, grad_p: &Array2<f64>) -> Array2<f64> {
    let inner: f64 = p.iter().zip(grad_p.iter()).map(|(a, b)| a * b).sum();
    let mut out = grad_p.clone();
    out.zip_mut_with(p, |g, &pi| *g = pi * (*g - inner));
    out
}

/// DSNT: expectation of the coordinate grids under a normalized heatmap.
///
/// Returns `(x_hat, y_hat)` with each component in the convex hull of the
/// grid values, `|x_hat| <= (W-1)/W`.
pub fn dsnt(h: &Heatmap) -> Result<(f64, f64)> {
    h.require_normalized("dsnt")?;
    let (rows, cols) = (h.rows(), h.cols());
    let mut x = 0.0;
    let mut y = 0.0;
    for ((i, j), &p) in h.values.indexed_iter() {
        x += p * grid_x(j, cols);
        y += p * grid_y(i, rows);
    }
    Ok((x, y))
}

/// Gradient of DSNT: given upstream gradients w.r.t. `(x_hat, y_hat)`,
/// the gradient w.r.t. the heatmap entry (i, j) is
/// `gx * xgrid[i][j] + gy * ygrid[i][j]` (the transform is linear in h).
pub fn dsnt_backward(rows: usize, cols: usize, grad_xy: (f64, f64)) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        grad_xy.0 * grid_x(j, cols) + grad_xy.1 * grid_y(i, rows)
    })
}

/// Discretized isotropic Gaussian with variance `sigma2` in
/// heatmap-pixel units, centred at normalized coordinates `center`,
/// evaluated at pixel centres and renormalized to sum 1.
pub fn gaussian_target(center: (f64, f64), sigma2: f64, shape: (usize, usize)) -> Result<Heatmap> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!(
            "gaussian_target requires sigma2 > 0, got {sigma2}"
        )));
    }
    let (rows, cols) = shape;
    let (uc, vc) = normalized_to_pixel(center, cols, rows);
    let mut values = Array2::from_shape_fn((rows, cols), |(i, j)| {
        let du = j as f64 - uc;
        let dv = i as f64 - vc;
        (-(du * du + dv * dv) / (2.0 * sigma2)).exp()
    });
    let sum: f64 = values.iter().sum();
    values.mapv_inplace(|v| v / sum);
    Ok(Heatmap {
        values,
        normalized: true,
    })
}

/// Gradient of [`gaussian_target`] w.r.t. its normalized centre.
///
/// With g the normalized target and (u_j, v_i) pixel coordinates,
///
/// ```text
/// dg[i][j]/duc = g[i][j] * (u_j - E_g[u]) / sigma2
/// ```
///
/// and `duc/dx = W/2` from the pixel conversion. Given the upstream
/// gradient w.r.t. every entry of g, returns the gradient w.r.t.
/// `(x, y)` of the normalized centre.
pub fn gaussian_target_backward_center(
    g: &Heatmap,
    sigma2: f64,
    grad_g: &Array2<f64>,
) -> (f64, f64) {
    let (rows, cols) = (g.rows(), g.cols());
    let mut mean_u = 0.0;
    let mut mean_v = 0.0;
    for ((i, j), &p) in g.values.indexed_iter() {
        mean_u += p * j as f64;
        mean_v += p * i as f64;
    }
    let mut guc = 0.0;
    let mut gvc = 0.0;
    for ((i, j), &p) in g.values.indexed_iter() {
        let w = grad_g[(i, j)] * p / sigma2;
        guc += w * (j as f64 - mean_u);
        gvc += w * (i as f64 - mean_v);
    }
    (guc * cols as f64 / 2.0, gvc * rows as f64 / 2.0)
}

/// Jensen-Shannon divergence between two normalized heatmaps:
///
/// ```text
/// JS(p, q) = 0.5*KL(p || m) + 0.5*KL(q || m),   m = (p + q) / 2
/// ```
///
/// with natural logarithms, zero terms dropped (0*log 0 = 0), and
/// [`LOG_FLOOR`] applied inside the logs. Bounded by `ln 2`.
pub fn js_divergence(p: &Heatmap, q: &Heatmap) -> Result<f64> {
    p.require_normalized("js_divergence")?;
    q.require_normalized("js_divergence")?;
    if p.values.dim() != q.values.dim() {
        return Err(Error::Contract(format!(
            "js_divergence shape mismatch: {:?} vs {:?}",
            p.values.dim(),
            q.values.dim()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.values.iter().zip(q.values.iter()) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi.max(LOG_FLOOR) / m.max(LOG_FLOOR)).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi.max(LOG_FLOOR) / m.max(LOG_FLOOR)).ln();
        }
    }
    Ok(acc)
}

/// Gradient of [`js_divergence`] w.r.t. its first argument:
/// `dJS/dp[i] = 0.5 * ln(p[i] / m[i])` (the constraint-independent
/// pointwise derivative; terms cancel so no sum-correction appears).
pub fn js_backward_p(p: &Heatmap, q: &Heatmap) -> Array2<f64> {
    let mut out = Array2::zeros(p.values.dim());
    for ((idx, &pi), &qi) in p.values.indexed_iter().zip(q.values.iter()) {
        let m = 0.5 * (pi + qi);
        out[idx] = 0.5 * (pi.max(LOG_FLOOR) / m.max(LOG_FLOOR)).ln();
    }
    out
}

/// Gradient of [`js_divergence`] w.r.t. its second argument (symmetric
/// role to [`js_backward_p`]).
pub fn js_backward_q(p: &Heatmap, q: &Heatmap) -> Array2<f64> {
    js_backward_p(q, p)
}
