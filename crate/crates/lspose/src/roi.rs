//! Region-of-interest pipeline: square bounding box from predicted depth,
//! centre data augmentation (CDA), zero-padded crop-and-rescale, and the
//! channel assembly for heatmap concatenation (HC).
//!
//! Pixel convention: integer coordinates address pixel centres, so an
//! image of width W occupies the continuous interval [-0.5, W - 0.5].
//! A box therefore reproduces the full image when centred at
//! ((W-1)/2, (H-1)/2) with side W = H.

use ndarray::{Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;

/// Square bounding box in original-image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    /// Centre (u, v) in pixel-centre coordinates.
    pub center: (f64, f64),
    /// Side length in pixels (the BBL).
    pub side: f64,
}

/// Fraction of the bounding box the target's projected extent should
/// fill after calibration; the box must contain the whole target where
/// possible, so it is sized 1/0.8 of the median extent.
pub const BOX_COVERAGE: f64 = 0.8;

/// Static configuration of the ROI stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    /// Spacecraft-specific constant in pixels*meters relating apparent
    /// size to distance: side = k_object / z.
    pub k_object: f64,
    /// Fixed output size of the rescaled crop, in pixels.
    pub crop_size: usize,
    /// CDA dispersion ratio: the jitter std is side * cda_r.
    pub cda_r: f64,
    /// Whether orientation inputs carry the concatenated heatmaps.
    pub hc_enabled: bool,
    /// Number of heatmap channels H expected when hc_enabled.
    pub hc_channels: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            // Matches the default synthetic scene; recalibrate per
            // dataset with the calibration subcommand.
            k_object: 540.0,
            crop_size: 224,
            cda_r: 0.15,
            hc_enabled: false,
            hc_channels: 64,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_object > 0.0) {
            return Err(Error::Config(format!(
                "k_object must be positive, got {}",
                self.k_object
            )));
        }
        if self.crop_size < 8 {
            return Err(Error::Config(format!(
                "crop_size must be at least 8, got {}",
                self.crop_size
            )));
        }
        if self.hc_enabled && self.hc_channels == 0 {
            return Err(Error::Config("hc_enabled requires hc_channels >= 1".into()));
        }
        Ok(())
    }
}

/// Inverse-depth bounding box: side = k_object / z, centre passed through.
pub fn bounding_box(center: (f64, f64), z: f64, cfg: &RoiConfig) -> Result<BoundingBox> {
    bounding_box_from_depth(center, z, cfg.k_object)
}

/// [`bounding_box`] without a full config, for callers that carry the
/// scale constant directly.
pub fn bounding_box_from_depth(center: (f64, f64), z: f64, k_object: f64) -> Result<BoundingBox> {
    if !(z > 0.0) {
        return Err(Error::Numeric(format!(
            "bounding_box requires z > 0, got {z}"
        )));
    }
    Ok(BoundingBox {
        center,
        side: k_object / z,
    })
}

/// Centre data augmentation: the centre is shifted by two independent
/// Normal(0, side * r) draws; the side never changes.
pub fn augment_box<R: Rng + ?Sized>(bbox: &BoundingBox, r: f64, rng: &mut R) -> BoundingBox {
    let normal = Normal::new(0.0, bbox.side * r).expect("side * r must be finite positive");
    BoundingBox {
        center: (
            bbox.center.0 + normal.sample(rng),
            bbox.center.1 + normal.sample(rng),
        ),
        side: bbox.side,
    }
}

/// Source pixel-centre coordinate sampled by output index `o` of `out_size`
/// when cropping a span of length `side` centred at `center`.
pub fn crop_source_coord(center: f64, side: f64, out_size: usize, o: usize) -> f64 {
    (center - side / 2.0) + (o as f64 + 0.5) * side / out_size as f64
}

/// Bilinear sample at pixel-centre coordinates (u, v); coordinates outside
/// the image read as zero (zero padding).
pub fn bilinear_sample(plane: &ArrayView2<f64>, u: f64, v: f64) -> f64 {
    let (rows, cols) = plane.dim();
    let u0 = u.floor();
    let v0 = v.floor();
    let fu = u - u0;
    let fv = v - v0;
    let mut acc = 0.0;
    for (dv, wv) in [(0.0, 1.0 - fv), (1.0, fv)] {
        for (du, wu) in [(0.0, 1.0 - fu), (1.0, fu)] {
            let ui = u0 + du;
            let vi = v0 + dv;
            if ui >= 0.0 && vi >= 0.0 && (ui as usize) < cols && (vi as usize) < rows {
                acc += wu * wv * plane[(vi as usize, ui as usize)];
            }
        }
    }
    acc
}

/// Crop result: the resampled region plus a flag raised when the box lay
/// entirely outside the image (every sample reads zero padding). Such
/// crops are legal inputs under CDA.
#[derive(Debug, Clone)]
pub struct CropResult {
    /// Channels-first (C, crop_size, crop_size).
    pub image: Array3<f64>,
    pub fully_outside: bool,
}

/// Extracts the square box region with zero padding and bilinearly
/// resamples it to `crop_size` x `crop_size`, preserving channel count.
pub fn crop_and_rescale(image: &Array3<f64>, bbox: &BoundingBox, crop_size: usize) -> CropResult {
    let (channels, rows, cols) = image.dim();
    let mut out = Array3::zeros((channels, crop_size, crop_size));

    let first_u = crop_source_coord(bbox.center.0, bbox.side, crop_size, 0);
    let last_u = crop_source_coord(bbox.center.0, bbox.side, crop_size, crop_size - 1);
    let first_v = crop_source_coord(bbox.center.1, bbox.side, crop_size, 0);
    let last_v = crop_source_coord(bbox.center.1, bbox.side, crop_size, crop_size - 1);
    // Bilinear support of pixel p extends over (p-1, p+1), so samples at
    // or beyond -1 / size are identically zero.
    let outside_u = last_u.max(first_u) <= -1.0 || first_u.min(last_u) >= cols as f64;
    let outside_v = last_v.max(first_v) <= -1.0 || first_v.min(last_v) >= rows as f64;
    let fully_outside = outside_u || outside_v;

    if !fully_outside {
        for c in 0..channels {
            let plane = image.index_axis(ndarray::Axis(0), c);
            for ov in 0..crop_size {
                let v = crop_source_coord(bbox.center.1, bbox.side, crop_size, ov);
                for ou in 0..crop_size {
                    let u = crop_source_coord(bbox.center.0, bbox.side, crop_size, ou);
                    out[(c, ov, ou)] = bilinear_sample(&plane, u, v);
                }
            }
        }
    }
    CropResult {
        image: out,
        fully_outside,
    }
}

/// Builds the orientation-network input: the image alone (HC off) or the
/// image with the H non-normalized heatmaps stacked after its channels
/// (HC on), then a single crop of the whole stack so every channel sees
/// the same ROI.
///
/// Heatmaps whose resolution differs from the image are bilinearly
/// resampled to the image grid before concatenation.
pub fn assemble_orientation_input(
    image: &Array3<f64>,
    heatstack: Option<&[Heatmap]>,
    bbox: &BoundingBox,
    cfg: &RoiConfig,
) -> Result<CropResult> {
    let (channels, rows, cols) = image.dim();
    match (cfg.hc_enabled, heatstack) {
        (false, None) => Ok(crop_and_rescale(image, bbox, cfg.crop_size)),
        (false, Some(_)) => Err(Error::Contract(
            "heatstack supplied but heatmap concatenation is disabled".into(),
        )),
        (true, None) => Err(Error::Contract(
            "heatmap concatenation enabled but no heatstack supplied".into(),
        )),
        (true, Some(stack)) => {
            if stack.len() != cfg.hc_channels {
                return Err(Error::Contract(format!(
                    "expected {} heatmap channels, got {}",
                    cfg.hc_channels,
                    stack.len()
                )));
            }
            let mut stacked = Array3::zeros((channels + stack.len(), rows, cols));
            for c in 0..channels {
                stacked
                    .index_axis_mut(ndarray::Axis(0), c)
                    .assign(&image.index_axis(ndarray::Axis(0), c));
            }
            for (k, h) in stack.iter().enumerate() {
                let mut dst = stacked.index_axis_mut(ndarray::Axis(0), channels + k);
                if h.values.dim() == (rows, cols) {
                    dst.assign(&h.values);
                } else {
                    // Resample a mismatched map onto the image grid. The
                    // height is driven by the same scale as the width so
                    // aspect handling matches the crop sampler.
                    let src_rows = h.values.nrows();
                    let src_cols = h.values.ncols();
                    let view = h.values.view();
                    for v in 0..rows {
                        for u in 0..cols {
                            let su = crop_source_coord(
                                (src_cols as f64 - 1.0) / 2.0,
                                src_cols as f64,
                                cols,
                                u,
                            );
                            let sv = crop_source_coord(
                                (src_rows as f64 - 1.0) / 2.0,
                                src_rows as f64,
                                rows,
                                v,
                            );
                            dst[(v, u)] = bilinear_sample(&view, su, sv);
                        }
                    }
                }
            }
            Ok(crop_and_rescale(&stacked, bbox, cfg.crop_size))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cfg(k: f64) -> RoiConfig {
        RoiConfig {
            k_object: k,
            crop_size: 8,
            cda_r: 0.15,
            hc_enabled: false,
            hc_channels: 0,
        }
    }

    #[test]
    fn bounding_box_side_is_inverse_in_depth() {
        let c = cfg(5000.0);
        assert_eq!(bounding_box((10.0, 20.0), 10.0, &c).unwrap().side, 500.0);
        assert_eq!(bounding_box((10.0, 20.0), 40.0, &c).unwrap().side, 125.0);
        assert!(bounding_box((0.0, 0.0), 0.0, &c).is_err());
        assert!(bounding_box((0.0, 0.0), -3.0, &c).is_err());
    }

    #[test]
    fn bounding_box_law_holds_to_roundoff_over_random_pairs() {
        // side * z recovers K_O to within 2 ulp: side = K_O / z is one
        // IEEE division, and the product reintroduces at most one more
        // rounding step. Bitwise equality of the product is not a
        // property f64 arithmetic can promise.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let k: f64 = rng.random_range(100.0..100_000.0);
            let z: f64 = rng.random_range(5.0..40.0);
            let c = cfg(k);
            let b = bounding_box((0.0, 0.0), z, &c).unwrap();
            assert_eq!(b.side, k / z);
            assert!(
                (b.side * z - k).abs() <= 2.0 * f64::EPSILON * k,
                "inverse-depth law broke: k={k} z={z}"
            );
        }
    }

    #[test]
    fn augment_preserves_side_and_matches_requested_dispersion() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let b = BoundingBox {
            center: (50.0, 60.0),
            side: 100.0,
        };
        let n = 10_000;
        let mut du = Vec::with_capacity(n);
        let mut dv = Vec::with_capacity(n);
        for _ in 0..n {
            let a = augment_box(&b, 0.15, &mut rng);
            assert_eq!(a.side, b.side);
            du.push(a.center.0 - b.center.0);
            dv.push(a.center.1 - b.center.1);
        }
        for d in [du, dv] {
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            assert!(mean.abs() < 0.5, "CDA mean drifted: {mean}");
            assert!(
                (14.25..=15.75).contains(&std),
                "CDA std {std} outside 5% of 15"
            );
        }
    }

    #[test]
    fn augment_is_deterministic_under_fixed_seed() {
        let b = BoundingBox {
            center: (5.0, 5.0),
            side: 200.0,
        };
        let a1 = augment_box(&b, 0.15, &mut ChaCha12Rng::seed_from_u64(31));
        let a2 = augment_box(&b, 0.15, &mut ChaCha12Rng::seed_from_u64(31));
        assert_eq!(a1, a2);
        // r = 0.15, side = 200 asks for a 30 px per-axis std; a single
        // draw should land within a few sigma of the centre.
        assert!((a1.center.0 - 5.0).abs() < 150.0);
    }

    #[test]
    fn full_extent_box_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let image =
            Array3::from_shape_fn((2, 8, 8), |_| rng.random_range(0.0..1.0));
        let b = BoundingBox {
            center: (3.5, 3.5),
            side: 8.0,
        };
        let crop = crop_and_rescale(&image, &b, 8);
        assert!(!crop.fully_outside);
        for (a, b) in crop.image.iter().zip(image.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn corner_centered_box_zero_fills_the_outside_quadrant() {
        let image = Array3::from_elem((1, 8, 8), 1.0);
        let b = BoundingBox {
            center: (0.0, 0.0),
            side: 8.0,
        };
        let crop = crop_and_rescale(&image, &b, 8).image;
        for v in 0..3 {
            for u in 0..8 {
                assert_eq!(crop[(0, v, u)], 0.0, "row {v} col {u} should be padding");
                assert_eq!(crop[(0, u, v)], 0.0, "row {u} col {v} should be padding");
            }
        }
        for v in 5..8 {
            for u in 5..8 {
                assert_abs_diff_eq!(crop[(0, v, u)], 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_yields_constant_crop_for_interior_boxes() {
        let image = Array3::from_elem((1, 16, 16), 0.37);
        let b = BoundingBox {
            center: (7.2, 8.1),
            side: 6.0,
        };
        let crop = crop_and_rescale(&image, &b, 8);
        for &v in crop.image.iter() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_outside_box_returns_zero_crop_with_flag() {
        let image = Array3::from_elem((1, 8, 8), 1.0);
        let b = BoundingBox {
            center: (100.0, 100.0),
            side: 4.0,
        };
        let crop = crop_and_rescale(&image, &b, 8);
        assert!(crop.fully_outside);
        assert!(crop.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_commutes_with_horizontal_flip() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..10 {
            let image =
                Array3::from_shape_fn((1, 10, 12), |_| rng.random_range(0.0..1.0));
            let mut flipped = image.clone();
            for v in 0..10 {
                for u in 0..12 {
                    flipped[(0, v, u)] = image[(0, v, 11 - u)];
                }
            }
            let b = BoundingBox {
                center: (rng.random_range(-2.0..14.0), rng.random_range(-2.0..12.0)),
                side: rng.random_range(3.0..12.0),
            };
            let reflected = BoundingBox {
                center: (11.0 - b.center.0, b.center.1),
                side: b.side,
            };
            let a = crop_and_rescale(&image, &b, 6).image;
            let c = crop_and_rescale(&flipped, &reflected, 6).image;
            for v in 0..6 {
                for u in 0..6 {
                    assert_abs_diff_eq!(a[(0, v, u)], c[(0, v, 5 - u)], epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn hc_off_assembly_matches_plain_crop_bit_for_bit() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let image = Array3::from_shape_fn((1, 8, 8), |_| rng.random_range(0.0..1.0));
        let b = BoundingBox {
            center: (4.0, 3.0),
            side: 5.0,
        };
        let c = cfg(1000.0);
        let direct = crop_and_rescale(&image, &b, c.crop_size);
        let assembled = assemble_orientation_input(&image, None, &b, &c).unwrap();
        assert_eq!(direct.image, assembled.image);
        assert_eq!(direct.fully_outside, assembled.fully_outside);
    }

    #[test]
    fn hc_assembly_stacks_image_channels_then_heatmaps() {
        let image = Array3::from_elem((1, 8, 8), 0.5);
        let mut hm = Array2::zeros((8, 8));
        hm[(4, 4)] = 2.0;
        let stack = vec![Heatmap::raw(hm.clone()), Heatmap::raw(hm * 0.5)];
        let c = RoiConfig {
            hc_enabled: true,
            hc_channels: 2,
            ..cfg(1000.0)
        };
        let b = BoundingBox {
            center: (3.5, 3.5),
            side: 8.0,
        };
        let out = assemble_orientation_input(&image, Some(&stack), &b, &c).unwrap();
        assert_eq!(out.image.dim(), (3, 8, 8));
        assert_abs_diff_eq!(out.image[(0, 0, 0)], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(out.image[(1, 4, 4)], 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.image[(2, 4, 4)], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hc_assembly_validates_presence_and_arity() {
        let image = Array3::from_elem((1, 8, 8), 0.5);
        let b = BoundingBox {
            center: (3.5, 3.5),
            side: 8.0,
        };
        let on = RoiConfig {
            hc_enabled: true,
            hc_channels: 2,
            ..cfg(1.0)
        };
        assert!(assemble_orientation_input(&image, None, &b, &on).is_err());
        let one = vec![Heatmap::raw(Array2::zeros((8, 8)))];
        assert!(assemble_orientation_input(&image, Some(&one), &b, &on).is_err());
        let off = cfg(1.0);
        assert!(assemble_orientation_input(&image, Some(&one), &b, &off).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(cfg(0.0).validate().is_err());
        assert!(RoiConfig {
            crop_size: 4,
            ..cfg(10.0)
        }
        .validate()
        .is_err());
        assert!(RoiConfig {
            hc_enabled: true,
            hc_channels: 0,
            ..cfg(10.0)
        }
        .validate()
        .is_err());
        assert!(cfg(10.0).validate().is_ok());
    }
}
