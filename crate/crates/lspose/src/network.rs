//! The two-stage pose network.
//!
//! A translation network consumes the full image and predicts the
//! object centre (via a heatmap decoder and coordinate expectation) and
//! the translation vector; an orientation network consumes a crop around
//! the predicted centre, sized by depth, and regresses a unit
//! quaternion. Both share the same residual encoder topology.

use std::path::Path;

use ndarray::{Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion};
use crate::heatmap::{normalized_to_pixel, Heatmap};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::{ParamId, ParamShape, ParamStore};
use crate::roi::BoundingBox;

/// Encoder depth/width preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneScale {
    Small,
    Large,
}

impl BackboneScale {
    /// Channel widths after the stem and each downsampling stage.
    fn widths(self) -> [usize; 4] {
        match self {
            BackboneScale::Small => [16, 32, 64, 128],
            BackboneScale::Large => [32, 64, 128, 256],
        }
    }

    /// Residual blocks per downsampling stage (after the stem).
    fn blocks(self) -> [usize; 3] {
        match self {
            BackboneScale::Small => [1, 1, 1],
            BackboneScale::Large => [2, 2, 2],
        }
    }
}

/// Weight initialization source for an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Pretrained,
}

/// Static model architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone_scale: BackboneScale,
    pub init_translation: InitMode,
    pub init_orientation: InitMode,
    /// Checkpoint whose encoder weights seed pretrained init modes.
    pub pretrained_path: Option<String>,
    pub hc_enabled: bool,
    /// Number of decoded heatmap channels H.
    pub heat_channels: usize,
    /// Image channels C_I fed to the translation network.
    pub input_channels: usize,
    /// Translation network input (rows, cols).
    pub input_size: (usize, usize),
    /// Square side of the orientation crop.
    pub crop_size: usize,
    /// Hidden widths of both fully-connected heads.
    pub head_hidden: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_scale: BackboneScale::Small,
            init_translation: InitMode::Random,
            init_orientation: InitMode::Random,
            pretrained_path: None,
            hc_enabled: false,
            heat_channels: 64,
            input_channels: 1,
            input_size: (256, 409),
            crop_size: 224,
            head_hidden: (256, 64),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heat_channels < 1 {
            return Err(Error::Config(format!(
                "heat_channels must be >= 1, got {}",
                self.heat_channels
            )));
        }
        if self.input_size.0 < 32 || self.input_size.1 < 32 {
            return Err(Error::Config(format!(
                "input_size dims must be >= 32, got {:?}",
                self.input_size
            )));
        }
        if self.crop_size < 16 {
            return Err(Error::Config(format!(
                "crop_size must be >= 16 (four downsampling stages), got {}",
                self.crop_size
            )));
        }
        if self.input_channels < 1 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        if self.head_hidden.0 < 1 || self.head_hidden.1 < 1 {
            return Err(Error::Config("head_hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels entering the orientation network.
    pub fn orientation_channels(&self) -> usize {
        if self.hc_enabled {
            self.input_channels + self.heat_channels
        } else {
            self.input_channels
        }
    }
}

/// Derived dimensions, recorded alongside run configs so downstream
/// tools can interpret checkpoints without rebuilding the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDims {
    pub param_count: usize,
    /// Flattened encoder output feeding the translation head.
    pub translation_head_in: usize,
    /// Flattened encoder output feeding the orientation head.
    pub orientation_head_in: usize,
    /// Spatial embedding used by both heads.
    pub head_embedding: String,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct LinP {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct BlockP {
    c1: ConvP,
    n1: NormP,
    c2: ConvP,
    n2: NormP,
}

#[derive(Debug, Clone)]
struct StageP {
    down: ConvP,
    norm: NormP,
    blocks: Vec<BlockP>,
}

#[derive(Debug, Clone)]
struct EncoderP {
    stem: ConvP,
    stem_norm: NormP,
    stages: Vec<StageP>,
}

#[derive(Debug, Clone)]
struct DecoderP {
    /// Skip-fed upsampling stages, deepest first: conv + norm after the
    /// skip concatenation.
    ups: Vec<(ConvP, NormP)>,
    /// Final upscale to input resolution: a raw 3x3 convolution emitting
    /// the H-channel heatstack (no norm or activation, the maps are
    /// softmax logits and HC input).
    heat: ConvP,
    /// 1x1 bias-free combination of H maps into one.
    combine: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadP {
    fc1: LinP,
    fc2: LinP,
    fc3: LinP,
}

/// Built model: parameter store plus the id maps of both networks.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    t_enc: EncoderP,
    t_dec: DecoderP,
    t_head: HeadP,
    o_enc: EncoderP,
    o_head: HeadP,
}

/// Group count for a channel width; widths are multiples of 8 by
/// construction, degrading to a single group otherwise.
fn groups_for(c: usize) -> usize {
    if c % 8 == 0 {
        8
    } else {
        1
    }
}

/// Builder that owns naming, shape bookkeeping, and seeded init.
struct ParamBuilder<'a, R: Rng> {
    ps: ParamStore,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    fn conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        bias: bool,
    ) -> Result<ConvP> {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let data: Vec<f64> = (0..out_c * in_c * k * k)
            .map(|_| normal.sample(self.rng))
            .collect();
        let w = self.ps.add(
            &format!("{name}.w"),
            ParamShape::Conv { out_c, in_c, kh: k, kw: k },
            data,
        )?;
        let b = if bias {
            Some(self.ps.add(
                &format!("{name}.b"),
                ParamShape::Vector { n: out_c },
                vec![0.0; out_c],
            )?)
        } else {
            None
        };
        Ok(ConvP { w, b })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<NormP> {
        let gamma = self.ps.add(
            &format!("{name}.g"),
            ParamShape::Vector { n: c },
            vec![1.0; c],
        )?;
        let beta = self.ps.add(
            &format!("{name}.b"),
            ParamShape::Vector { n: c },
            vec![0.0; c],
        )?;
        Ok(NormP { gamma, beta, groups: groups_for(c) })
    }

    fn linear(&mut self, name: &str, out_n: usize, in_n: usize) -> Result<LinP> {
        let normal = Normal::new(0.0, (2.0 / in_n as f64).sqrt()).expect("finite std");
        let data: Vec<f64> = (0..out_n * in_n).map(|_| normal.sample(self.rng)).collect();
        let w = self
            .ps
            .add(&format!("{name}.w"), ParamShape::Linear { out_n, in_n }, data)?;
        let b = self.ps.add(
            &format!("{name}.b"),
            ParamShape::Vector { n: out_n },
            vec![0.0; out_n],
        )?;
        Ok(LinP { w, b })
    }

    fn encoder(&mut self, prefix: &str, in_c: usize, scale: BackboneScale) -> Result<EncoderP> {
        let widths = scale.widths();
        let blocks = scale.blocks();
        let stem = self.conv(&format!("{prefix}.stem.conv"), widths[0], in_c, 3, true)?;
        let stem_norm = self.norm(&format!("{prefix}.stem.gn"), widths[0])?;
        let mut stages = Vec::new();
        for s in 0..3 {
            let (cin, cout) = (widths[s], widths[s + 1]);
            let down = self.conv(&format!("{prefix}.s{}.down.conv", s + 1), cout, cin, 3, true)?;
            let norm = self.norm(&format!("{prefix}.s{}.down.gn", s + 1), cout)?;
            let mut blks = Vec::new();
            for b in 0..blocks[s] {
                let base = format!("{prefix}.s{}.b{}", s + 1, b + 1);
                blks.push(BlockP {
                    c1: self.conv(&format!("{base}.c1"), cout, cout, 3, true)?,
                    n1: self.norm(&format!("{base}.gn1"), cout)?,
                    c2: self.conv(&format!("{base}.c2"), cout, cout, 3, true)?,
                    n2: self.norm(&format!("{base}.gn2"), cout)?,
                });
            }
            stages.push(StageP { down, norm, blocks: blks });
        }
        Ok(EncoderP { stem, stem_norm, stages })
    }

    fn head(&mut self, prefix: &str, in_n: usize, hidden: (usize, usize), out_n: usize) -> Result<HeadP> {
        Ok(HeadP {
            fc1: self.linear(&format!("{prefix}.fc1"), hidden.0, in_n)?,
            fc2: self.linear(&format!("{prefix}.fc2"), hidden.1, hidden.0)?,
            fc3: self.linear(&format!("{prefix}.fc3"), out_n, hidden.1)?,
        })
    }
}

/// Spatial size of the deepest encoder map for a given input size
/// (four stride-2 convolutions with pad 1, kernel 3).
fn encoded_size(mut rows: usize, mut cols: usize) -> (usize, usize) {
    for _ in 0..4 {
        rows = crate::nn::kernels::conv_out_len(rows, 3, 2, 1);
        cols = crate::nn::kernels::conv_out_len(cols, 3, 2, 1);
    }
    (rows, cols)
}

impl Model {
    /// Builds a model with seeded random initialization. Pretrained init
    /// modes additionally require [`Model::load_pretrained`] with an
    /// encoder source; build itself never reads files.
    pub fn build(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Model> {
        cfg.validate()?;
        if cfg.hc_enabled && cfg.init_orientation == InitMode::Pretrained {
            log::warn!(
                "pretrained orientation encoder combined with heatmap-conditioned input: \
                 classification-pretrained features tend to hurt orientation accuracy here"
            );
        }
        let widths = cfg.backbone_scale.widths();
        let mut b = ParamBuilder { ps: ParamStore::new(), rng };

        let t_enc = b.encoder("t.enc", cfg.input_channels, cfg.backbone_scale)?;
        let (er, ec) = encoded_size(cfg.input_size.0, cfg.input_size.1);
        let t_head = b.head("t.head", widths[3] * er * ec, cfg.head_hidden, 3)?;

        // Decoder: three skip stages (deep to shallow), then one skipless
        // upscale back to full resolution whose convolution emits the
        // heatstack directly.
        let mut ups = Vec::new();
        let dec_out = [widths[2], widths[1], widths[0]];
        let dec_in = [
            widths[3] + widths[2],
            widths[2] + widths[1],
            widths[1] + widths[0],
        ];
        for (i, (cin, cout)) in dec_in.iter().zip(dec_out.iter()).enumerate() {
            let conv = b.conv(&format!("t.dec{}.conv", 4 - i), *cout, *cin, 3, true)?;
            let norm = b.norm(&format!("t.dec{}.gn", 4 - i), *cout)?;
            ups.push((conv, norm));
        }
        let heat = b.conv("t.heat.conv", cfg.heat_channels, widths[0], 3, true)?;
        // Uniform-average combination of the H maps, no bias.
        let combine = b.ps.add(
            "t.combine.w",
            ParamShape::Conv {
                out_c: 1,
                in_c: cfg.heat_channels,
                kh: 1,
                kw: 1,
            },
            vec![1.0 / cfg.heat_channels as f64; cfg.heat_channels],
        )?;
        let t_dec = DecoderP { ups, heat, combine };

        let o_enc = b.encoder("o.enc", cfg.orientation_channels(), cfg.backbone_scale)?;
        let (or, oc) = encoded_size(cfg.crop_size, cfg.crop_size);
        let o_head = b.head("o.head", widths[3] * or * oc, cfg.head_hidden, 4)?;

        let mut params = b.ps;
        // Identity-quaternion bias so an all-zero crop still yields a
        // finite unit quaternion after normalization.
        params.get_mut(o_head.fc3.b).data[0] = 1.0;

        Ok(Model { cfg: cfg.clone(), params, t_enc, t_dec, t_head, o_enc, o_head })
    }

    pub fn dims(&self) -> ModelDims {
        let widths = self.cfg.backbone_scale.widths();
        let (er, ec) = encoded_size(self.cfg.input_size.0, self.cfg.input_size.1);
        let (or, oc) = encoded_size(self.cfg.crop_size, self.cfg.crop_size);
        ModelDims {
            param_count: self.params.scalar_count(),
            translation_head_in: widths[3] * er * ec,
            orientation_head_in: widths[3] * or * oc,
            head_embedding: "flatten".to_string(),
        }
    }

    /// Parameter ids owned by the translation network.
    pub fn translation_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("t."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameter ids owned by the orientation network.
    pub fn orientation_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("o."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Applies donor encoder weights to every encoder whose configured
    /// init mode is pretrained. `source` is typically the parameter
    /// store of an earlier run's checkpoint.
    pub fn load_pretrained(&mut self, source: &ParamStore) -> Result<()> {
        if self.cfg.init_translation == InitMode::Pretrained {
            adapt_encoder_weights(self, source, "t.")?;
        }
        if self.cfg.init_orientation == InitMode::Pretrained {
            adapt_encoder_weights(self, source, "o.")?;
        }
        Ok(())
    }

    fn forward_encoder(&self, g: &mut Graph, enc: &EncoderP, input: NodeId) -> Vec<NodeId> {
        let mut feats = Vec::with_capacity(4);
        let c = g.conv2d(&self.params, input, enc.stem.w, enc.stem.b, 2, 1);
        let n = g.group_norm(&self.params, c, enc.stem_norm.gamma, enc.stem_norm.beta, enc.stem_norm.groups);
        let mut x = g.relu(n);
        feats.push(x);
        for stage in &enc.stages {
            let c = g.conv2d(&self.params, x, stage.down.w, stage.down.b, 2, 1);
            let n = g.group_norm(&self.params, c, stage.norm.gamma, stage.norm.beta, stage.norm.groups);
            x = g.relu(n);
            for blk in &stage.blocks {
                let c1 = g.conv2d(&self.params, x, blk.c1.w, blk.c1.b, 1, 1);
                let n1 = g.group_norm(&self.params, c1, blk.n1.gamma, blk.n1.beta, blk.n1.groups);
                let r1 = g.relu(n1);
                let c2 = g.conv2d(&self.params, r1, blk.c2.w, blk.c2.b, 1, 1);
                let n2 = g.group_norm(&self.params, c2, blk.n2.gamma, blk.n2.beta, blk.n2.groups);
                let s = g.add(n2, x);
                x = g.relu(s);
            }
            feats.push(x);
        }
        feats
    }

    fn forward_head(&self, g: &mut Graph, head: &HeadP, feat: NodeId) -> NodeId {
        let f = g.flatten(feat);
        let h1 = g.linear(&self.params, f, head.fc1.w, head.fc1.b);
        let r1 = g.relu(h1);
        let h2 = g.linear(&self.params, r1, head.fc2.w, head.fc2.b);
        let r2 = g.relu(h2);
        g.linear(&self.params, r2, head.fc3.w, head.fc3.b)
    }

    /// Graph nodes produced by the translation network.
    pub fn translation_nodes(&self, g: &mut Graph, image: Array3<f64>) -> Result<TranslationNodes> {
        let (c, h, w) = image.dim();
        if c != self.cfg.input_channels || (h, w) != self.cfg.input_size {
            return Err(Error::Contract(format!(
                "translation input shape ({c}, {h}, {w}) does not match configured ({}, {}, {})",
                self.cfg.input_channels, self.cfg.input_size.0, self.cfg.input_size.1
            )));
        }
        let input = g.input_chw(image);
        let feats = self.forward_encoder(g, &self.t_enc, input);
        let t_pred = self.forward_head(g, &self.t_head, feats[3]);

        // Decoder: deepest feature up, align, concat skip, conv. The final
        // upscale reaches input resolution and its convolution is the raw
        // heatstack output.
        let mut x = feats[3];
        for (i, (conv, norm)) in self.t_dec.ups.iter().enumerate() {
            let up = g.upsample2x(x);
            let skip = feats[2 - i];
            let (_, sr, sc) = g.chw(skip).dim();
            let sl = g.slice_spatial(up, sr, sc);
            let cat = g.concat_chw(sl, skip);
            let c = g.conv2d(&self.params, cat, conv.w, conv.b, 1, 1);
            let n = g.group_norm(&self.params, c, norm.gamma, norm.beta, norm.groups);
            x = g.relu(n);
        }
        let up = g.upsample2x(x);
        let full = g.slice_spatial(up, self.cfg.input_size.0, self.cfg.input_size.1);
        let heatstack = g.conv2d(&self.params, full, self.t_dec.heat.w, self.t_dec.heat.b, 1, 1);
        let combined = g.conv2d(&self.params, heatstack, self.t_dec.combine, None, 1, 0);
        let heatmap = g.softmax2d(combined);
        let center = g.dsnt(heatmap);
        Ok(TranslationNodes { input, heatstack, heatmap, center, t_pred })
    }

    /// Graph nodes of the orientation network over an already-assembled
    /// crop node (image channels, then heatmap channels when enabled).
    pub fn orientation_nodes(&self, g: &mut Graph, crop: NodeId) -> Result<NodeId> {
        let (c, h, w) = g.chw(crop).dim();
        if c != self.cfg.orientation_channels() || h != self.cfg.crop_size || w != self.cfg.crop_size {
            return Err(Error::Contract(format!(
                "orientation input shape ({c}, {h}, {w}) does not match configured ({}, {}, {})",
                self.cfg.orientation_channels(),
                self.cfg.crop_size,
                self.cfg.crop_size
            )));
        }
        let feats = self.forward_encoder(g, &self.o_enc, crop);
        let raw = self.forward_head(g, &self.o_head, feats[3]);
        Ok(g.quat_normalize(raw))
    }

    /// Assembles the orientation input inside the graph: concatenates
    /// the raw heatstack onto the image when enabled, then crops the
    /// window (input-pixel coordinates) to the configured crop size.
    pub fn orientation_input_node(
        &self,
        g: &mut Graph,
        image: NodeId,
        heatstack: NodeId,
        center_px: (f64, f64),
        side_px: (f64, f64),
    ) -> NodeId {
        let stack = if self.cfg.hc_enabled {
            g.concat_chw(image, heatstack)
        } else {
            image
        };
        g.crop_resample(stack, center_px, side_px, self.cfg.crop_size)
    }

    /// Value-level translation forward for a single image.
    pub fn forward_translation(&self, image: &Array3<f64>) -> Result<TranslationOutput> {
        let mut g = Graph::new();
        let nodes = self.translation_nodes(&mut g, image.clone())?;
        Ok(self.extract_translation(&g, &nodes))
    }

    /// Value-level translation forward over a batch (loops per-sample
    /// graphs; outputs are positionally aligned with the inputs).
    pub fn forward_translation_batch(&self, images: &[Array3<f64>]) -> Result<Vec<TranslationOutput>> {
        images.iter().map(|im| self.forward_translation(im)).collect()
    }

    /// Extracts owned values from translation nodes.
    pub fn extract_translation(&self, g: &Graph, nodes: &TranslationNodes) -> TranslationOutput {
        let hs = g.chw(nodes.heatstack);
        let heatstack: Vec<Heatmap> = (0..hs.dim().0)
            .map(|c| Heatmap::raw(hs.index_axis(Axis(0), c).to_owned()))
            .collect();
        let heatmap = Heatmap {
            values: g.chw(nodes.heatmap).index_axis(Axis(0), 0).to_owned(),
            normalized: true,
        };
        let t = g.vec1(nodes.t_pred);
        TranslationOutput {
            t_pred: [t[0], t[1], t[2]],
            heatstack,
            heatmap,
            center_pred: g.coord(nodes.center),
        }
    }

    /// Value-level orientation forward for an assembled crop.
    pub fn forward_orientation(&self, crop: &Array3<f64>) -> Result<Quaternion> {
        let mut g = Graph::new();
        let input = g.input_chw(crop.clone());
        let q = self.orientation_nodes(&mut g, input)?;
        let v = g.vec1(q);
        Ok(Quaternion::from_wxyz([v[0], v[1], v[2], v[3]]))
    }

    /// Full two-stage forward for one image: translation, box from the
    /// predicted centre and depth, crop, orientation. `k_object` is the
    /// box-scale constant in original-image pixel units; `scale_uv`
    /// converts original pixels to network-input pixels per axis.
    /// `jitter` displaces the crop window (training-time augmentation)
    /// by `unit * side * r` per axis in original pixels, so pre-drawn
    /// standard-normal units reproduce the Normal(0, side * r) centre
    /// augmentation on the box the forward pass itself derives.
    pub fn forward_pose_sample(
        &self,
        g: &mut Graph,
        image: Array3<f64>,
        k_object: f64,
        scale_uv: (f64, f64),
        jitter: Option<CropJitter>,
    ) -> Result<PoseNodes> {
        let trans = self.translation_nodes(g, image)?;
        let (cx, cy) = g.coord(trans.center);
        let t = g.vec1(trans.t_pred);
        let z = t[2];
        // Predicted centre: normalized -> input pixels -> original pixels.
        let (rows, cols) = self.cfg.input_size;
        let (u_in, v_in) = normalized_to_pixel((cx, cy), cols, rows);
        let center_orig = (u_in / scale_uv.0, v_in / scale_uv.1);
        let bbox = crate::roi::bounding_box_from_depth(center_orig, z, k_object)?;
        let bbox = match jitter {
            Some(j) => BoundingBox {
                center: (
                    bbox.center.0 + j.unit.0 * bbox.side * j.r,
                    bbox.center.1 + j.unit.1 * bbox.side * j.r,
                ),
                side: bbox.side,
            },
            None => bbox,
        };
        // Window geometry in input pixels (per-axis side for non-unit
        // aspect scaling).
        let center_px = (bbox.center.0 * scale_uv.0, bbox.center.1 * scale_uv.1);
        let side_px = (bbox.side * scale_uv.0, bbox.side * scale_uv.1);
        let crop = self.orientation_input_node(g, trans.input, trans.heatstack, center_px, side_px);
        let q = self.orientation_nodes(g, crop)?;
        Ok(PoseNodes { trans, bbox, crop, q })
    }

    /// Value-level full-pipeline prediction for one image: the pose and
    /// the crop window it derived, with no augmentation.
    pub fn predict_pose(
        &self,
        image: &Array3<f64>,
        k_object: f64,
        scale_uv: (f64, f64),
    ) -> Result<(Pose, BoundingBox)> {
        let mut g = Graph::new();
        let nodes = self.forward_pose_sample(&mut g, image.clone(), k_object, scale_uv, None)?;
        let t = g.vec1(nodes.trans.t_pred);
        let q = g.vec1(nodes.q);
        Ok((
            Pose {
                t: [t[0], t[1], t[2]],
                q: Quaternion::from_wxyz([q[0], q[1], q[2], q[3]]),
            },
            nodes.bbox,
        ))
    }
}

/// Crop-centre augmentation for [`Model::forward_pose_sample`]:
/// pre-drawn standard-normal units and the dispersion ratio, applied as
/// a displacement of `unit * side * r` once the box side is known.
#[derive(Debug, Clone, Copy)]
pub struct CropJitter {
    pub unit: (f64, f64),
    pub r: f64,
}

/// Node ids of one translation forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TranslationNodes {
    pub input: NodeId,
    /// H-channel non-normalized heatstack at input resolution.
    pub heatstack: NodeId,
    /// Normalized single-channel heatmap.
    pub heatmap: NodeId,
    /// Predicted centre, normalized coordinates.
    pub center: NodeId,
    /// Predicted translation, length-3 vector.
    pub t_pred: NodeId,
}

/// Node ids plus the derived box of one full pose forward pass.
#[derive(Debug, Clone)]
pub struct PoseNodes {
    pub trans: TranslationNodes,
    /// Crop window in original-image pixels.
    pub bbox: BoundingBox,
    pub crop: NodeId,
    /// Normalized quaternion node (w, x, y, z).
    pub q: NodeId,
}

/// Owned outputs of the translation network.
#[derive(Debug, Clone)]
pub struct TranslationOutput {
    pub t_pred: crate::geometry::Vec3,
    pub heatstack: Vec<Heatmap>,
    pub heatmap: Heatmap,
    pub center_pred: (f64, f64),
}

/// Loads encoder weights from a named parameter source (typically a
/// checkpoint's store) into the chosen encoder of `model`. Source
/// encoder parameters may carry either translation or orientation
/// prefixes; the stem convolution adapts channel count: summed over
/// input channels when collapsing 3 to 1, zero-extended for added
/// heatmap channels. All other shapes must match exactly.
pub fn adapt_encoder_weights(model: &mut Model, source: &ParamStore, target_prefix: &str) -> Result<()> {
    let src_prefix = if source.iter().any(|(_, p)| p.name.starts_with("t.enc.")) {
        "t.enc."
    } else if source.iter().any(|(_, p)| p.name.starts_with("o.enc.")) {
        "o.enc."
    } else {
        return Err(Error::Config(
            "pretrained source holds no encoder parameters (expected names under t.enc. or o.enc.)"
                .into(),
        ));
    };
    let full_target = format!("{target_prefix}enc.");
    let target_ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with(&full_target))
        .map(|(id, _)| id)
        .collect();
    for id in target_ids {
        let (t_name, t_shape) = {
            let p = model.params.get(id);
            (p.name.clone(), p.shape)
        };
        let suffix = &t_name[full_target.len()..];
        let src_name = format!("{src_prefix}{suffix}");
        let Some(src_id) = source.id_of(&src_name) else {
            return Err(Error::Config(format!(
                "pretrained source is missing encoder parameter {src_name}"
            )));
        };
        let src = source.get(src_id);
        if src.shape == t_shape {
            model.params.get_mut(id).data.copy_from_slice(&src.data);
            continue;
        }
        // The only legal mismatch is the stem convolution's input width.
        let (ParamShape::Conv { out_c: so, in_c: si, kh: sk, kw: skw },
             ParamShape::Conv { out_c: to, in_c: ti, kh: tk, kw: tkw }) = (src.shape, t_shape)
        else {
            return Err(Error::Config(format!(
                "pretrained parameter {src_name} shape mismatch: {:?} vs {:?}",
                src.shape, t_shape
            )));
        };
        if so != to || sk != tk || skw != tkw || suffix != "stem.conv.w" {
            return Err(Error::Config(format!(
                "pretrained parameter {src_name} shape mismatch: {:?} vs {:?}",
                src.shape, t_shape
            )));
        }
        let ksz = sk * skw;
        let base = model.cfg.input_channels;
        let mut out = vec![0.0; t_shape.len()];
        for o in 0..to {
            // Image channels: copy when the widths agree, sum the source
            // channels when collapsing (preserves the response to a
            // channel-replicated image). Added channels stay zero.
            for tc in 0..ti.min(base) {
                for k in 0..ksz {
                    let dst = (o * ti + tc) * ksz + k;
                    if si == base {
                        out[dst] = src.data[(o * si + tc) * ksz + k];
                    } else if base == 1 {
                        let mut s = 0.0;
                        for sc in 0..si {
                            s += src.data[(o * si + sc) * ksz + k];
                        }
                        out[dst] = s;
                    } else {
                        return Err(Error::Config(format!(
                            "cannot adapt stem from {si} to {base} image channels"
                        )));
                    }
                }
            }
        }
        model.params.get_mut(id).data.copy_from_slice(&out);
    }
    Ok(())
}

/// Error for a missing pretrained source file, with recovery steps.
pub fn pretrained_missing_error(path: &Path) -> Error {
    Error::Config(format!(
        "pretrained encoder weights unavailable at {}: train a translation checkpoint first \
         (e.g. `lspose train --regime translation-only --out runs/t`) and point \
         model.pretrained_path at its best.ckpt, or supply published classification weights \
         converted to the checkpoint format",
        path.display()
    ))
}


#[cfg(test)]
mod timing {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Rough per-sample cost of a translation train step at desk scale.
    /// Run manually: cargo test -p lspose timing -- --ignored --nocapture
    #[test]
    #[ignore]
    fn measure_desk_step_cost() {
        let mut rng = ChaCha12Rng::seed_from_u64(271);
        let cfg = ModelConfig {
            heat_channels: 8,
            input_size: (128, 128),
            crop_size: 64,
            hc_enabled: true,
            ..ModelConfig::default()
        };
        let mut model = Model::build(&cfg, &mut rng).unwrap();
        // A cold model predicts z near zero; seed the depth bias the way
        // a warm-started run would so the box law accepts it.
        let zb = model.params.id_of("t.head.fc3.b").unwrap();
        model.params.get_mut(zb).data[2] = 12.0;
        let image = Array3::from_shape_fn((1, 128, 128), |_| rng.random_range(0.0..1.0));

        let t0 = std::time::Instant::now();
        let n = 8;
        for _ in 0..n {
            let mut g = crate::nn::graph::Graph::new();
            let nodes = model
                .forward_pose_sample(&mut g, image.clone(), 720.0, (1.0, 1.0), None)
                .unwrap();
            let pos = g.mse3(nodes.trans.t_pred, [0.2, -0.1, 12.0]);
            let euc = g.euc_loss(nodes.trans.center, (0.1, 0.05));
            let reg = g.gaussian_js(nodes.trans.heatmap, nodes.trans.center, 1.0);
            let regl = g.scalar_scale(reg, 1.0);
            let center = g.scalar_add(euc, regl);
            let tl = g.scalar_add(pos, center);
            let rot = g.rot_loss(nodes.q, Quaternion::IDENTITY);
            let loss = g.scalar_add(tl, rot);
            let mut grads = crate::nn::ParamGrads::zeros_for(&model.params);
            let _ = g.backward(loss, 1.0, &model.params, &mut grads);
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("pose step (fwd+bwd, HC on): {:.1} ms/sample", dt * 1e3);

        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut g = crate::nn::graph::Graph::new();
            let nodes = model.translation_nodes(&mut g, image.clone()).unwrap();
            let pos = g.mse3(nodes.t_pred, [0.2, -0.1, 12.0]);
            let euc = g.euc_loss(nodes.center, (0.1, 0.05));
            let reg = g.gaussian_js(nodes.heatmap, nodes.center, 1.0);
            let regl = g.scalar_scale(reg, 1.0);
            let c = g.scalar_add(euc, regl);
            let loss = g.scalar_add(pos, c);
            let mut grads = crate::nn::ParamGrads::zeros_for(&model.params);
            let _ = g.backward(loss, 1.0, &model.params, &mut grads);
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("translation step (fwd+bwd): {:.1} ms/sample", dt * 1e3);

        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let _ = model.forward_translation(&image).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("translation eval forward: {:.1} ms/sample", dt * 1e3);

        let crop = Array3::from_shape_fn((9, 64, 64), |_| rng.random_range(0.0..1.0));
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut g = crate::nn::graph::Graph::new();
            let input = g.input_chw(crop.clone());
            let q = model.orientation_nodes(&mut g, input).unwrap();
            let loss = g.rot_loss(q, Quaternion::IDENTITY);
            let mut grads = crate::nn::ParamGrads::zeros_for(&model.params);
            let _ = g.backward(loss, 1.0, &model.params, &mut grads);
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        println!("orientation step (fwd+bwd): {:.1} ms/sample", dt * 1e3);
    }
}
