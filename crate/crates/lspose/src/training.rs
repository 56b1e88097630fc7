//! Optimization loop: per-regime objectives, adaptive-moment updates,
//! plateau learning-rate decay, deterministic shuffling and crop
//! augmentation, checkpointing with bit-exact resume, and the ablation
//! suite.
//!
//! Determinism contract: every random decision is drawn from a stream
//! derived from `(seed, purpose, epoch, sample index)` alone, never from
//! a shared sequential RNG, so batch composition, resume point, and
//! worker count cannot change any draw. Combined with the exact float
//! round-trip of the history and checkpoint formats, equal seeds give
//! byte-identical artifacts.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, OptSnapshot};
use crate::data::{preprocess, Manifest, Preprocessed};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, AblationEntry, MetricsReport};
use crate::geometry::{Pose, Quaternion};
use crate::losses::{compose_losses, LossBreakdown};
use crate::network::{CropJitter, InitMode, Model, ModelConfig, PoseNodes};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::{ParamGrads, ParamId, ParamStore};
use crate::roi::RoiConfig;

/// Which parts of the two-stage model an optimization run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Translation network alone on its composite objective.
    TranslationOnly,
    /// Translation and orientation together but with separated
    /// objectives: no gradient crosses between the modules.
    PoseDecoupled,
    /// One joint pose objective through the whole pipeline; requires
    /// the heatmap-conditioned orientation input.
    PoseEndToEnd,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::TranslationOnly => "translation_only",
            Regime::PoseDecoupled => "pose_decoupled",
            Regime::PoseEndToEnd => "pose_end_to_end",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Regime> {
        match s {
            "translation_only" => Ok(Regime::TranslationOnly),
            "pose_decoupled" => Ok(Regime::PoseDecoupled),
            "pose_end_to_end" => Ok(Regime::PoseEndToEnd),
            other => Err(Error::Usage(format!(
                "unknown regime {other:?} (expected translation_only, pose_decoupled, \
                 or pose_end_to_end)"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier applied when the plateau fires.
    pub plateau_factor: f64,
    /// Consecutive non-improving epochs before a decay.
    pub plateau_patience: usize,
    /// Relative improvement threshold: an epoch improves when its
    /// objective is below best * (1 - min_delta).
    pub plateau_min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Crop-displacement augmentation of the orientation input.
    pub cda_enabled: bool,
    /// CDA dispersion ratio (jitter std = box side * cda_r).
    pub cda_r: f64,
    /// Weight of the divergence regularizer inside the centre loss.
    pub lambda: f64,
    /// Variance of the comparison Gaussian, heatmap-pixel units.
    pub sigma2: f64,
    /// Checkpoint whose translation weights seed this run.
    pub warm_start_translation: Option<PathBuf>,
    /// Keep the translation weights fixed (pose_decoupled only;
    /// requires a warm start so the fixed weights are trained ones).
    pub freeze_translation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::TranslationOnly,
            batch_size: 16,
            lr: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            max_epochs: 30,
            seed: 0,
            cda_enabled: false,
            cda_r: 0.15,
            lambda: 1.0,
            sigma2: 1.0,
            warm_start_translation: None,
            freeze_translation: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor must lie strictly between 0 and 1, got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience < 1 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if !(self.plateau_min_delta >= 0.0 && self.plateau_min_delta < 1.0) {
            return Err(Error::Config(format!(
                "plateau_min_delta must lie in [0, 1), got {}",
                self.plateau_min_delta
            )));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.cda_enabled && !(self.cda_r > 0.0) {
            return Err(Error::Config(format!(
                "cda_r must be positive when CDA is enabled, got {}",
                self.cda_r
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.cda_enabled && self.regime == Regime::TranslationOnly {
            return Err(Error::Config(
                "cda_enabled has no effect in translation_only: the augmentation \
                 displaces the orientation crop, which this regime never builds"
                    .into(),
            ));
        }
        if self.freeze_translation {
            if self.regime != Regime::PoseDecoupled {
                return Err(Error::Config(
                    "freeze_translation requires regime pose_decoupled".into(),
                ));
            }
            if self.warm_start_translation.is_none() {
                return Err(Error::Config(
                    "freeze_translation requires warm_start_translation: frozen \
                     random translation weights cannot produce usable crops"
                        .into(),
                ));
            }
        }
        Ok(())
    }
}

/// One history line: everything logged for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
    /// Whether the plateau decay fired at the end of this epoch.
    pub reduced: bool,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub val_metrics: MetricsReport,
}

/// What a training call produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Records of the epochs run by this call (a resume only holds the
    /// newly run ones; the history file holds all of them).
    pub history: Vec<EpochRecord>,
    /// Best scheduler objective seen across the whole run.
    pub best_objective: Option<f64>,
    /// Run directory holding best.ckpt, last.ckpt, history.jsonl,
    /// config.json.
    pub dir: PathBuf,
}

/// The self-describing run bundle written to `<run>/config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBundle {
    pub model: ModelConfig,
    pub roi: RoiConfig,
    pub train: TrainConfig,
}

// ---------------------------------------------------------------------
// Deterministic stream derivation.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const TAG_SHUFFLE: u64 = 1;
const TAG_CDA: u64 = 2;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG for one `(purpose, epoch, sample)` decision, independent of any
/// other decision's stream.
fn stream_rng(seed: u64, tag: u64, epoch: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(seed ^ tag.wrapping_mul(GOLDEN)));
    rng.set_stream((epoch << 32) | (index & 0xFFFF_FFFF));
    rng
}

// ---------------------------------------------------------------------
// Adaptive-moment optimizer (conventional defaults 0.9 / 0.999 / 1e-8,
// recorded in the checkpoint via its snapshot).

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    label: String,
    ids: Vec<ParamId>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(label: &str, ids: Vec<ParamId>, store: &ParamStore) -> Adam {
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).data.len()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).data.len()]).collect();
        Adam { label: label.to_string(), ids, step: 0, m, v }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = store.get_mut(id);
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.map_or(0.0, |s| s[i]);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }

    fn snapshot(&self, store: &ParamStore) -> OptSnapshot {
        OptSnapshot {
            label: self.label.clone(),
            step: self.step,
            moments: self
                .ids
                .iter()
                .enumerate()
                .map(|(k, &id)| (store.get(id).name.clone(), self.m[k].clone(), self.v[k].clone()))
                .collect(),
        }
    }

    fn restore(&mut self, snap: &OptSnapshot, store: &ParamStore) -> Result<()> {
        self.step = snap.step;
        for (k, &id) in self.ids.iter().enumerate() {
            let name = &store.get(id).name;
            let (_, m, v) = snap
                .moments
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| {
                    Error::Data(format!("checkpoint optimizer {} lacks moments for {name}", snap.label))
                })?;
            if m.len() != self.m[k].len() {
                return Err(Error::Data(format!(
                    "checkpoint optimizer {} moment length mismatch for {name}",
                    snap.label
                )));
            }
            self.m[k].copy_from_slice(m);
            self.v[k].copy_from_slice(v);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Plateau scheduler.

/// Decays when the observed objective fails to improve by the relative
/// `min_delta` for `patience` consecutive observations. The best value
/// only moves on qualifying improvements, and a decay resets the
/// consecutive-miss counter.
#[derive(Debug, Clone)]
struct ReduceOnPlateau {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    bad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PlateauDecision {
    improved: bool,
    reduce: bool,
}

impl ReduceOnPlateau {
    fn new(patience: usize, min_delta: f64) -> Self {
        ReduceOnPlateau { patience, min_delta, best: None, bad: 0 }
    }

    fn observe(&mut self, value: f64) -> PlateauDecision {
        let improved = match self.best {
            None => true,
            Some(best) => value < best * (1.0 - self.min_delta),
        };
        if improved {
            self.best = Some(value);
            self.bad = 0;
            PlateauDecision { improved: true, reduce: false }
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.bad = 0;
                PlateauDecision { improved: false, reduce: true }
            } else {
                PlateauDecision { improved: false, reduce: false }
            }
        }
    }
}

// ---------------------------------------------------------------------
// The trainer.

/// Sum of per-sample loss term values over an epoch or batch.
#[derive(Debug, Clone, Copy, Default)]
struct TermAcc {
    position: f64,
    euc: f64,
    reg: f64,
    rotation: f64,
    n: usize,
}

impl TermAcc {
    fn add(&mut self, position: f64, euc: f64, reg: f64, rotation: f64) {
        self.position += position;
        self.euc += euc;
        self.reg += reg;
        self.rotation += rotation;
        self.n += 1;
    }

    fn compose(&self, lambda: f64) -> Result<LossBreakdown> {
        let n = self.n as f64;
        let (position, euc, reg) = (self.position / n, self.euc / n, self.reg / n);
        compose_losses(position, euc, reg, euc + lambda * reg, self.rotation / n)
    }
}

/// Loss nodes attached to one full pose forward.
struct SampleLossNodes {
    mse: NodeId,
    euc: NodeId,
    js: NodeId,
    trans_total: NodeId,
    rot: NodeId,
    pose_total: NodeId,
}

struct Trainer<'a> {
    model: &'a mut Model,
    roi: &'a RoiConfig,
    cfg: &'a TrainConfig,
    train: Vec<Preprocessed>,
    val: Vec<Preprocessed>,
    adams: Vec<Adam>,
    sched: ReduceOnPlateau,
    lr: f64,
    initial_lr: f64,
    out_dir: PathBuf,
}

fn check_term(context: &str, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{context}: loss term {term} is not finite ({v})")))
    }
}

impl Trainer<'_> {
    fn jitter(&self, epoch: usize, index: usize) -> Option<CropJitter> {
        if !self.cfg.cda_enabled {
            return None;
        }
        let mut rng = stream_rng(self.cfg.seed, TAG_CDA, epoch as u64, index as u64);
        let u0: f64 = StandardNormal.sample(&mut rng);
        let u1: f64 = StandardNormal.sample(&mut rng);
        Some(CropJitter { unit: (u0, u1), r: self.cfg.cda_r })
    }

    /// Builds the translation loss nodes for an already-forwarded
    /// sample: squared position error, centre distance, divergence
    /// regularizer, and their weighted sum.
    fn translation_loss_nodes(
        &self,
        g: &mut Graph,
        t_pred: NodeId,
        heatmap: NodeId,
        center: NodeId,
        s: &Preprocessed,
    ) -> (NodeId, NodeId, NodeId, NodeId) {
        let mse = g.mse3(t_pred, s.t);
        let euc = g.euc_loss(center, s.center_norm);
        let js = g.gaussian_js(heatmap, center, self.cfg.sigma2);
        let js_w = g.scalar_scale(js, self.cfg.lambda);
        let c = g.scalar_add(euc, js_w);
        let total = g.scalar_add(mse, c);
        (mse, euc, js, total)
    }

    /// Full pose forward plus every loss node.
    fn pose_sample_nodes(
        &self,
        g: &mut Graph,
        s: &Preprocessed,
        jitter: Option<CropJitter>,
    ) -> Result<(PoseNodes, SampleLossNodes)> {
        let nodes = self.model.forward_pose_sample(
            g,
            s.image.clone(),
            self.roi.k_object,
            s.scale_uv,
            jitter,
        )?;
        let (mse, euc, js, trans_total) =
            self.translation_loss_nodes(g, nodes.trans.t_pred, nodes.trans.heatmap, nodes.trans.center, s);
        let rot = g.rot_loss(nodes.q, s.q);
        let pose_total = g.scalar_add(trans_total, rot);
        Ok((nodes, SampleLossNodes { mse, euc, js, trans_total, rot, pose_total }))
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let n = self.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
        let mut acc = TermAcc::default();
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (batch_no, chunk) in batches.iter().enumerate() {
            self.step_batch(epoch, batch_no, chunk, &mut acc)?;
        }
        acc.compose(self.cfg.lambda)
    }

    fn step_batch(
        &mut self,
        epoch: usize,
        batch_no: usize,
        idxs: &[usize],
        acc: &mut TermAcc,
    ) -> Result<()> {
        let seed = 1.0 / idxs.len() as f64;
        let ctx = |term: &str| format!("epoch {epoch} batch {batch_no} term {term}");
        match self.cfg.regime {
            Regime::TranslationOnly => {
                let mut grads = ParamGrads::zeros_for(&self.model.params);
                for &i in idxs {
                    let s = &self.train[i];
                    let mut g = Graph::new();
                    let nodes = self.model.translation_nodes(&mut g, s.image.clone())?;
                    let (mse, euc, js, total) = self.translation_loss_nodes(
                        &mut g,
                        nodes.t_pred,
                        nodes.heatmap,
                        nodes.center,
                        s,
                    );
                    let mv = check_term(&ctx("position"), "position", g.scalar(mse))?;
                    let ev = check_term(&ctx("center_euc"), "center_euc", g.scalar(euc))?;
                    let jv = check_term(&ctx("center_reg"), "center_reg", g.scalar(js))?;
                    g.backward(total, seed, &self.model.params, &mut grads);
                    acc.add(mv, ev, jv, 0.0);
                }
                self.apply_step("translation", &grads);
            }
            Regime::PoseDecoupled => {
                let mut grads_t = ParamGrads::zeros_for(&self.model.params);
                let mut grads_o = ParamGrads::zeros_for(&self.model.params);
                for &i in idxs {
                    let s = &self.train[i];
                    let mut g = Graph::new();
                    let jit = self.jitter(epoch, i);
                    let (_, loss) = self.pose_sample_nodes(&mut g, s, jit)?;
                    let mv = check_term(&ctx("position"), "position", g.scalar(loss.mse))?;
                    let ev = check_term(&ctx("center_euc"), "center_euc", g.scalar(loss.euc))?;
                    let jv = check_term(&ctx("center_reg"), "center_reg", g.scalar(loss.js))?;
                    let rv = check_term(&ctx("rotation"), "rotation", g.scalar(loss.rot))?;
                    if !self.cfg.freeze_translation {
                        g.backward(loss.trans_total, seed, &self.model.params, &mut grads_t);
                    }
                    g.backward(loss.rot, seed, &self.model.params, &mut grads_o);
                    acc.add(mv, ev, jv, rv);
                }
                if !self.cfg.freeze_translation {
                    self.apply_step("translation", &grads_t);
                }
                self.apply_step("orientation", &grads_o);
            }
            Regime::PoseEndToEnd => {
                let mut grads = ParamGrads::zeros_for(&self.model.params);
                for &i in idxs {
                    let s = &self.train[i];
                    let mut g = Graph::new();
                    let jit = self.jitter(epoch, i);
                    let (_, loss) = self.pose_sample_nodes(&mut g, s, jit)?;
                    let mv = check_term(&ctx("position"), "position", g.scalar(loss.mse))?;
                    let ev = check_term(&ctx("center_euc"), "center_euc", g.scalar(loss.euc))?;
                    let jv = check_term(&ctx("center_reg"), "center_reg", g.scalar(loss.js))?;
                    let rv = check_term(&ctx("rotation"), "rotation", g.scalar(loss.rot))?;
                    g.backward(loss.pose_total, seed, &self.model.params, &mut grads);
                    acc.add(mv, ev, jv, rv);
                }
                self.apply_step("pose", &grads);
            }
        }
        Ok(())
    }

    fn apply_step(&mut self, label: &str, grads: &ParamGrads) {
        let lr = self.lr;
        // Field-disjoint borrows: the optimizer lives next to the params.
        let params = &mut self.model.params;
        let adam = self
            .adams
            .iter_mut()
            .find(|a| a.label == label)
            .expect("optimizer labels are fixed per regime");
        adam.step(params, grads, lr);
    }

    /// Full-pipeline validation pass: losses for every term and pose
    /// metrics, with no augmentation.
    fn validate_epoch(&self, epoch: usize) -> Result<(LossBreakdown, MetricsReport)> {
        let mut acc = TermAcc::default();
        let mut preds = Vec::with_capacity(self.val.len());
        let mut truths = Vec::with_capacity(self.val.len());
        for (i, s) in self.val.iter().enumerate() {
            let ctx = |term: &str| format!("epoch {epoch} val sample {i} term {term}");
            let mut g = Graph::new();
            let (nodes, loss) = self.pose_sample_nodes(&mut g, s, None)?;
            let mv = check_term(&ctx("position"), "position", g.scalar(loss.mse))?;
            let ev = check_term(&ctx("center_euc"), "center_euc", g.scalar(loss.euc))?;
            let jv = check_term(&ctx("center_reg"), "center_reg", g.scalar(loss.js))?;
            let rv = check_term(&ctx("rotation"), "rotation", g.scalar(loss.rot))?;
            acc.add(mv, ev, jv, rv);
            let t = g.vec1(nodes.trans.t_pred);
            let q = g.vec1(nodes.q);
            preds.push(Pose {
                t: [t[0], t[1], t[2]],
                q: Quaternion::from_wxyz([q[0], q[1], q[2], q[3]]),
            });
            truths.push(Pose { t: s.t, q: s.q });
        }
        // translation_only reports the untrained orientation honestly in
        // the metrics but drives nothing with it; its scheduler follows
        // the translation objective.
        let breakdown = acc.compose(self.cfg.lambda)?;
        let metrics = compute_metrics(&preds, &truths)?;
        Ok((breakdown, metrics))
    }

    fn objective(&self, val: &LossBreakdown) -> f64 {
        match self.cfg.regime {
            Regime::TranslationOnly => val.translation,
            Regime::PoseDecoupled | Regime::PoseEndToEnd => val.pose,
        }
    }

    fn make_checkpoint(&self, epoch: usize, with_optimizers: bool) -> Checkpoint {
        let optimizers = if with_optimizers {
            self.adams.iter().map(|a| a.snapshot(&self.model.params)).collect()
        } else {
            Vec::new()
        };
        Checkpoint::from_store(
            &self.model.params,
            self.model.cfg.clone(),
            epoch,
            self.cfg.regime.as_str(),
            self.cfg.seed,
            self.lr,
            self.initial_lr,
            self.sched.best,
            self.sched.bad,
            optimizers,
        )
    }

    /// Runs epochs `start..=target`, appending to the history file.
    fn run(&mut self, start: usize, target: usize) -> Result<Vec<EpochRecord>> {
        let history_path = self.out_dir.join("history.jsonl");
        let mut history_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&history_path)
            .map_err(|e| Error::io(&history_path, e))?;
        let mut records = Vec::new();
        for epoch in start..=target {
            let t0 = std::time::Instant::now();
            let train = self.train_epoch(epoch)?;
            let (val, val_metrics) = self.validate_epoch(epoch)?;
            let decision = self.sched.observe(self.objective(&val));
            if decision.improved {
                checkpoint::save(&self.out_dir.join("best.ckpt"), &self.make_checkpoint(epoch, false))?;
            }
            let record = EpochRecord {
                epoch,
                lr: self.lr,
                reduced: decision.reduce,
                train,
                val,
                val_metrics,
            };
            if decision.reduce {
                self.lr *= self.cfg.plateau_factor;
            }
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Contract(format!("history serialization: {e}")))?;
            history_file
                .write_all(format!("{line}\n").as_bytes())
                .and_then(|_| history_file.flush())
                .map_err(|e| Error::io(&history_path, e))?;
            checkpoint::save(&self.out_dir.join("last.ckpt"), &self.make_checkpoint(epoch, true))?;
            log::info!(
                "epoch {epoch}: train pose {:.6} val pose {:.6} ({:.1}s)",
                record.train.pose,
                record.val.pose,
                t0.elapsed().as_secs_f64()
            );
            records.push(record);
            if self.lr < self.initial_lr / 64.0 {
                log::info!("stopping: learning rate decayed below initial/64");
                break;
            }
        }
        Ok(records)
    }
}

// ---------------------------------------------------------------------
// Entry points.

fn preprocess_all(m: &Manifest, size: (usize, usize)) -> Result<Vec<Preprocessed>> {
    m.samples.par_iter().map(|s| preprocess(s, size)).collect()
}

fn validate_compat(model: &Model, roi: &RoiConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    roi.validate()?;
    if roi.crop_size != model.cfg.crop_size {
        return Err(Error::Config(format!(
            "roi crop_size {} does not match the model's {}",
            roi.crop_size, model.cfg.crop_size
        )));
    }
    if roi.hc_enabled != model.cfg.hc_enabled {
        return Err(Error::Config(
            "roi hc_enabled does not match the model configuration".into(),
        ));
    }
    if roi.hc_enabled && roi.hc_channels != model.cfg.heat_channels {
        return Err(Error::Config(format!(
            "roi hc_channels {} does not match the model's heat_channels {}",
            roi.hc_channels, model.cfg.heat_channels
        )));
    }
    if cfg.cda_enabled && (roi.cda_r - cfg.cda_r).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "roi cda_r {} does not match the train config's {}",
            roi.cda_r, cfg.cda_r
        )));
    }
    match cfg.regime {
        Regime::PoseEndToEnd if !model.cfg.hc_enabled => Err(Error::Config(
            "pose_end_to_end requires hc_enabled: without the heatmap-conditioned \
             input the orientation gradient cannot reach the translation network"
                .into(),
        )),
        Regime::PoseDecoupled if model.cfg.hc_enabled => Err(Error::Config(
            "pose_decoupled requires hc_enabled = false: the concatenated heatmaps \
             would leak rotation gradients into the translation network"
                .into(),
        )),
        _ => Ok(()),
    }
}

fn optimizers_for(model: &Model, cfg: &TrainConfig) -> Vec<Adam> {
    match cfg.regime {
        Regime::TranslationOnly => vec![Adam::new(
            "translation",
            model.translation_param_ids(),
            &model.params,
        )],
        Regime::PoseDecoupled => {
            let mut v = Vec::new();
            if !cfg.freeze_translation {
                v.push(Adam::new("translation", model.translation_param_ids(), &model.params));
            }
            v.push(Adam::new("orientation", model.orientation_param_ids(), &model.params));
            v
        }
        Regime::PoseEndToEnd => {
            let ids = model.params.iter().map(|(id, _)| id).collect();
            vec![Adam::new("pose", ids, &model.params)]
        }
    }
}

/// Copies every translation-network parameter from a checkpoint,
/// requiring exact names and shapes.
fn warm_start_translation(model: &mut Model, path: &Path) -> Result<()> {
    let donor = checkpoint::load(path)?.param_store()?;
    let ids = model.translation_param_ids();
    for id in ids {
        let (name, shape) = {
            let p = model.params.get(id);
            (p.name.clone(), p.shape)
        };
        let src_id = donor.id_of(&name).ok_or_else(|| {
            Error::Config(format!(
                "warm-start checkpoint {} lacks translation parameter {name}",
                path.display()
            ))
        })?;
        let src = donor.get(src_id);
        if src.shape != shape {
            return Err(Error::Config(format!(
                "warm-start parameter {name} has shape {:?}, model expects {shape:?}",
                src.shape
            )));
        }
        model.params.get_mut(id).data.copy_from_slice(&src.data);
    }
    Ok(())
}

/// Centres the translation head's output bias on the mean training
/// target so predicted depths are positive — and the depth-derived crop
/// windows valid — from the very first step.
fn init_output_bias(model: &mut Model, train: &[Preprocessed]) {
    let n = train.len() as f64;
    let mut mean = [0.0f64; 3];
    for s in train {
        for (m, t) in mean.iter_mut().zip(s.t) {
            *m += t;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let id = model.params.id_of("t.head.fc3.b").expect("translation head bias");
    model.params.get_mut(id).data.copy_from_slice(&mean);
}

/// Trains `model` on `train_m`, validating on `val_m`, writing
/// best.ckpt / last.ckpt / history.jsonl / config.json under `out_dir`.
/// The model is left at its last-epoch state; best.ckpt holds the
/// best-validation parameters.
pub fn train(
    model: &mut Model,
    roi: &RoiConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    validate_compat(model, roi, cfg)?;
    if train_m.samples.is_empty() || val_m.samples.is_empty() {
        return Err(Error::Config("train and val manifests must be non-empty".into()));
    }
    let needs_pretrained = model.cfg.init_translation == InitMode::Pretrained
        || model.cfg.init_orientation == InitMode::Pretrained;
    if needs_pretrained && cfg.warm_start_translation.is_some()
        && model.cfg.init_translation == InitMode::Pretrained
    {
        return Err(Error::Config(
            "init_translation = pretrained and warm_start_translation both set: \
             choose one source for the translation weights"
                .into(),
        ));
    }
    if needs_pretrained {
        let path = model.cfg.pretrained_path.clone().ok_or_else(|| {
            Error::Config("pretrained init requires model.pretrained_path".into())
        })?;
        let path = PathBuf::from(path);
        if !path.exists() {
            return Err(crate::network::pretrained_missing_error(&path));
        }
        let donor = checkpoint::load(&path)?.param_store()?;
        model.load_pretrained(&donor)?;
    }
    if let Some(ws) = &cfg.warm_start_translation {
        warm_start_translation(model, ws)?;
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let bundle = RunBundle { model: model.cfg.clone(), roi: roi.clone(), train: cfg.clone() };
    let config_path = out_dir.join("config.json");
    let config_json = serde_json::to_string_pretty(&bundle)
        .map_err(|e| Error::Contract(format!("config serialization: {e}")))?;
    fs::write(&config_path, config_json).map_err(|e| Error::io(&config_path, e))?;
    // Fresh history; resume appends instead.
    let history_path = out_dir.join("history.jsonl");
    fs::write(&history_path, b"").map_err(|e| Error::io(&history_path, e))?;

    let train_cache = preprocess_all(train_m, model.cfg.input_size)?;
    let val_cache = preprocess_all(val_m, model.cfg.input_size)?;
    if cfg.warm_start_translation.is_none() {
        init_output_bias(model, &train_cache);
    }

    let adams = optimizers_for(model, cfg);
    let sched = ReduceOnPlateau::new(cfg.plateau_patience, cfg.plateau_min_delta);
    let mut trainer = Trainer {
        model,
        roi,
        cfg,
        train: train_cache,
        val: val_cache,
        adams,
        sched,
        lr: cfg.lr,
        initial_lr: cfg.lr,
        out_dir: out_dir.to_path_buf(),
    };
    let history = trainer.run(1, cfg.max_epochs)?;
    Ok(TrainOutcome {
        history,
        best_objective: trainer.sched.best,
        dir: out_dir.to_path_buf(),
    })
}

/// Resumes the run recorded in `out_dir` from its last checkpoint,
/// continuing until `extend_to` (or the configured max_epochs),
/// appending to the existing history. Bit-for-bit equal to the
/// uninterrupted run under the same seed.
pub fn resume(
    out_dir: &Path,
    train_m: &Manifest,
    val_m: &Manifest,
    extend_to: Option<usize>,
) -> Result<TrainOutcome> {
    let config_path = out_dir.join("config.json");
    let config_text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let bundle: RunBundle = serde_json::from_str(&config_text)
        .map_err(|e| Error::Data(format!("{}: {e}", config_path.display())))?;
    let cfg = bundle.train.clone();
    validate_compat_bundle(&bundle)?;

    let ckpt = checkpoint::load(&out_dir.join("last.ckpt"))?;
    if ckpt.model != bundle.model {
        return Err(Error::Data(
            "last.ckpt model configuration does not match config.json".into(),
        ));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut model = Model::build(&bundle.model, &mut rng)?;
    ckpt.apply_params(&mut model.params)?;

    let history_path = out_dir.join("history.jsonl");
    if !history_path.exists() {
        return Err(Error::Data(format!("{} is missing", history_path.display())));
    }

    let train_cache = preprocess_all(train_m, model.cfg.input_size)?;
    let val_cache = preprocess_all(val_m, model.cfg.input_size)?;

    let mut adams = optimizers_for(&model, &cfg);
    for adam in &mut adams {
        let snap = ckpt.optimizer(&adam.label).ok_or_else(|| {
            Error::Data(format!("last.ckpt lacks optimizer state {:?}", adam.label))
        })?;
        adam.restore(snap, &model.params)?;
    }
    let mut sched =
        ReduceOnPlateau::new(cfg.plateau_patience, cfg.plateau_min_delta);
    sched.best = ckpt.sched_best;
    sched.bad = ckpt.sched_bad;

    let target = extend_to.unwrap_or(cfg.max_epochs);
    let start = ckpt.epoch + 1;
    let mut trainer = Trainer {
        model: &mut model,
        roi: &bundle.roi,
        cfg: &cfg,
        train: train_cache,
        val: val_cache,
        adams,
        sched,
        lr: ckpt.lr,
        initial_lr: ckpt.initial_lr,
        out_dir: out_dir.to_path_buf(),
    };
    let history = if start > target || trainer.lr < trainer.initial_lr / 64.0 {
        Vec::new()
    } else {
        trainer.run(start, target)?
    };
    Ok(TrainOutcome {
        history,
        best_objective: trainer.sched.best,
        dir: out_dir.to_path_buf(),
    })
}

fn validate_compat_bundle(bundle: &RunBundle) -> Result<()> {
    // Rebuild-free config cross-checks used by resume; the full check
    // needs a built model and runs implicitly through Trainer.
    bundle.train.validate()?;
    bundle.roi.validate()?;
    bundle.model.validate()
}

// ---------------------------------------------------------------------
// Ablation suite.

/// The six studied configurations, in published row order:
/// (orientation init, HC, CDA).
pub const ABLATION_ROWS: [(&str, bool, bool); 6] = [
    ("random", false, false),
    ("pretrained", false, false),
    ("random", true, false),
    ("pretrained", true, false),
    ("pretrained", false, true),
    ("random", true, true),
];

/// Machine-readable ablation table with split mean/std columns.
pub fn ablation_table(entries: &[AblationEntry]) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "init": e.init,
                "HC": e.hc,
                "CDA": e.cda,
                "E_t_mean": e.report.e_t.mean,
                "E_t_std": e.report.e_t.std,
                "E_q_mean_deg": e.report.e_q_deg.mean,
                "E_q_std_deg": e.report.e_q_deg.std,
            })
        })
        .collect();
    serde_json::json!({
        "columns": ["init", "HC", "CDA", "E_t_mean", "E_t_std", "E_q_mean_deg", "E_q_std_deg"],
        "rows": rows,
    })
}

/// Evaluates a model over a manifest with the full pipeline (no
/// augmentation), returning pose metrics.
pub fn evaluate_manifest(model: &Model, roi: &RoiConfig, m: &Manifest) -> Result<MetricsReport> {
    let cache = preprocess_all(m, model.cfg.input_size)?;
    let mut preds = Vec::with_capacity(cache.len());
    let mut truths = Vec::with_capacity(cache.len());
    for s in &cache {
        let (pose, _) = model.predict_pose(&s.image, roi.k_object, s.scale_uv)?;
        preds.push(pose);
        truths.push(Pose { t: s.t, q: s.q });
    }
    compute_metrics(&preds, &truths)
}

/// Runs the six-row study: one shared translation run whose best
/// checkpoint every HC-off row freezes ("the translation module used is
/// the best one") and every pretrained row adapts its orientation
/// encoder from, then one run per row. HC-on rows train end-to-end from
/// a cold start. Writes `ablation.json` (split-column table) next to the
/// per-row run directories and returns the entries in row order.
pub fn ablation_suite(
    base_model: &ModelConfig,
    base_roi: &RoiConfig,
    base_train: &TrainConfig,
    train_m: &Manifest,
    val_m: &Manifest,
    out_dir: &Path,
) -> Result<Vec<AblationEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Stage 1: the shared translation donor.
    let donor_model_cfg = ModelConfig {
        hc_enabled: false,
        init_translation: InitMode::Random,
        init_orientation: InitMode::Random,
        pretrained_path: None,
        ..base_model.clone()
    };
    let donor_roi = RoiConfig { hc_enabled: false, ..base_roi.clone() };
    let donor_train = TrainConfig {
        regime: Regime::TranslationOnly,
        cda_enabled: false,
        warm_start_translation: None,
        freeze_translation: false,
        ..base_train.clone()
    };
    let donor_dir = out_dir.join("translation");
    let mut rng = ChaCha12Rng::seed_from_u64(donor_train.seed);
    let mut donor_model = Model::build(&donor_model_cfg, &mut rng)?;
    train(&mut donor_model, &donor_roi, train_m, val_m, &donor_train, &donor_dir)?;
    let donor_best = donor_dir.join("best.ckpt");

    let mut entries = Vec::with_capacity(ABLATION_ROWS.len());
    for (row_no, &(init, hc, cda)) in ABLATION_ROWS.iter().enumerate() {
        let row_dir = out_dir.join(format!(
            "row{}_{}_hc_{}_cda_{}",
            row_no + 1,
            init,
            if hc { "on" } else { "off" },
            if cda { "on" } else { "off" }
        ));
        let init_mode = if init == "pretrained" { InitMode::Pretrained } else { InitMode::Random };
        let model_cfg = ModelConfig {
            hc_enabled: hc,
            init_translation: InitMode::Random,
            init_orientation: init_mode,
            pretrained_path: (init_mode == InitMode::Pretrained)
                .then(|| donor_best.to_string_lossy().into_owned()),
            ..base_model.clone()
        };
        let roi = RoiConfig {
            hc_enabled: hc,
            hc_channels: base_model.heat_channels,
            ..base_roi.clone()
        };
        let train_cfg = if hc {
            // End-to-end, cold start.
            TrainConfig {
                regime: Regime::PoseEndToEnd,
                cda_enabled: cda,
                warm_start_translation: None,
                freeze_translation: false,
                ..base_train.clone()
            }
        } else {
            // Frozen shared translation; only orientation trains.
            TrainConfig {
                regime: Regime::PoseDecoupled,
                cda_enabled: cda,
                warm_start_translation: Some(donor_best.clone()),
                freeze_translation: true,
                ..base_train.clone()
            }
        };
        let mut rng = ChaCha12Rng::seed_from_u64(train_cfg.seed);
        let mut model = Model::build(&model_cfg, &mut rng)?;
        train(&mut model, &roi, train_m, val_m, &train_cfg, &row_dir)?;
        // Judge each row by its best-validation parameters.
        checkpoint::load(&row_dir.join("best.ckpt"))?.apply_params(&mut model.params)?;
        let report = evaluate_manifest(&model, &roi, val_m)?;
        entries.push(AblationEntry { init: init.to_string(), hc, cda, report });
    }

    let table = ablation_table(&entries);
    let table_path = out_dir.join("ablation.json");
    fs::write(&table_path, serde_json::to_string_pretty(&table).expect("json") + "\n")
        .map_err(|e| Error::io(&table_path, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{generate_synthetic, SceneConfig};
    use crate::geometry::Camera;

    fn scene(size: usize) -> SceneConfig {
        SceneConfig {
            width: size,
            height: size,
            camera: Camera {
                fx: 1.4 * size as f64,
                fy: 1.4 * size as f64,
                cx: (size as f64 - 1.0) / 2.0,
                cy: (size as f64 - 1.0) / 2.0,
            },
            ..SceneConfig::default()
        }
    }

    fn toy_data(dir: &Path, size: usize, n_train: usize, n_val: usize) -> (Manifest, Manifest) {
        let m_train =
            generate_synthetic(n_train, &scene(size), 11, &dir.join("train")).unwrap();
        let m_val = generate_synthetic(n_val, &scene(size), 12, &dir.join("val")).unwrap();
        (m_train, m_val)
    }

    fn toy_model_cfg(size: usize, crop: usize, heat: usize) -> ModelConfig {
        ModelConfig {
            input_size: (size, size),
            crop_size: crop,
            heat_channels: heat,
            ..ModelConfig::default()
        }
    }

    fn toy_roi(crop: usize, heat: usize, hc: bool) -> RoiConfig {
        RoiConfig {
            k_object: 430.0,
            crop_size: crop,
            cda_r: 0.15,
            hc_enabled: hc,
            hc_channels: heat,
        }
    }

    #[test]
    fn plateau_fires_only_after_consecutive_misses() {
        // Strictly improving: never fires.
        let mut s = ReduceOnPlateau::new(5, 1e-4);
        for i in 0..20 {
            let d = s.observe(10.0 - i as f64 * 0.5);
            assert!(!d.reduce, "fired on improving sequence at {i}");
            assert!(d.improved);
        }

        // Constant: fires at observations 6 and 11 (patience 5).
        let mut s = ReduceOnPlateau::new(5, 1e-4);
        let mut fired = Vec::new();
        for i in 1..=12 {
            if s.observe(5.0).reduce {
                fired.push(i);
            }
        }
        assert_eq!(fired, vec![6, 11]);

        // Improvements below min_delta count as misses.
        let mut s = ReduceOnPlateau::new(3, 1e-2);
        assert!(s.observe(1.0).improved);
        assert!(!s.observe(0.9999).improved);
        assert!(!s.observe(0.9998).reduce);
        assert!(s.observe(0.9997).reduce, "third sub-threshold miss must fire");

        // Non-consecutive misses never accumulate.
        let mut s = ReduceOnPlateau::new(2, 1e-4);
        let seq = [10.0, 11.0, 9.0, 10.0, 8.0, 9.0, 7.0];
        for v in seq {
            assert!(!s.observe(v).reduce, "alternating misses must not fire");
        }

        // A fire resets the consecutive count.
        let mut s = ReduceOnPlateau::new(2, 1e-4);
        s.observe(1.0);
        s.observe(1.0);
        assert!(s.observe(1.0).reduce);
        assert!(!s.observe(1.0).reduce, "counter must restart after firing");
        assert!(s.observe(1.0).reduce);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let size = 32;
        let cfg = toy_model_cfg(size, 16, 2);
        let model_plain = Model::build(&cfg, &mut rng).unwrap();
        let model_hc =
            Model::build(&ModelConfig { hc_enabled: true, ..cfg.clone() }, &mut rng).unwrap();
        let roi_plain = toy_roi(16, 2, false);
        let roi_hc = toy_roi(16, 2, true);

        let base = TrainConfig { max_epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let check = |model: &Model, roi: &RoiConfig, cfg: &TrainConfig| {
            validate_compat(model, roi, cfg).unwrap_err()
        };

        // Regime/model compatibility.
        let e2e = TrainConfig { regime: Regime::PoseEndToEnd, ..base.clone() };
        assert!(matches!(check(&model_plain, &roi_plain, &e2e), Error::Config(_)));
        let dec = TrainConfig { regime: Regime::PoseDecoupled, ..base.clone() };
        assert!(matches!(check(&model_hc, &roi_hc, &dec), Error::Config(_)));

        // Flag interactions.
        let frozen_cold = TrainConfig {
            regime: Regime::PoseDecoupled,
            freeze_translation: true,
            ..base.clone()
        };
        assert!(matches!(check(&model_plain, &roi_plain, &frozen_cold), Error::Config(_)));
        let cda_trans = TrainConfig { cda_enabled: true, ..base.clone() };
        assert!(matches!(check(&model_plain, &roi_plain, &cda_trans), Error::Config(_)));

        // Value ranges.
        for bad in [
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { lr: 0.0, ..base.clone() },
            TrainConfig { plateau_factor: 1.0, ..base.clone() },
            TrainConfig { plateau_factor: 0.0, ..base.clone() },
            TrainConfig { sigma2: 0.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }

        // Roi/model mismatches.
        assert!(matches!(check(&model_plain, &toy_roi(32, 2, false), &base), Error::Config(_)));
        assert!(matches!(check(&model_plain, &roi_hc, &base), Error::Config(_)));
    }

    #[test]
    fn toy_translation_run_learns_and_records_identities() {
        let dir = tempfile::tempdir().unwrap();
        let size = 64;
        let (m_train, m_val) = toy_data(dir.path(), size, 64, 16);
        let model_cfg = toy_model_cfg(size, 32, 4);
        let roi = toy_roi(32, 4, false);
        let cfg = TrainConfig {
            regime: Regime::TranslationOnly,
            max_epochs: 5,
            batch_size: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut model = Model::build(&model_cfg, &mut rng).unwrap();
        let run_dir = dir.path().join("run");
        let out = train(&mut model, &roi, &m_train, &m_val, &cfg, &run_dir).unwrap();

        assert_eq!(out.history.len(), 5);
        let first = &out.history[0];
        let last = &out.history[4];
        assert!(
            last.train.translation < first.train.translation,
            "no learning: {} -> {}",
            first.train.translation,
            last.train.translation
        );
        for r in &out.history {
            assert!((r.train.pose - (r.train.translation + r.train.rotation)).abs() <= 1e-9);
            assert!((r.val.pose - (r.val.translation + r.val.rotation)).abs() <= 1e-9);
            assert_eq!(r.train.rotation, 0.0, "translation_only trains no rotation");
            assert_eq!(r.lr, cfg.lr, "no decay expected with patience 5 over 5 epochs");
        }
        for f in ["best.ckpt", "last.ckpt", "history.jsonl", "config.json"] {
            assert!(run_dir.join(f).exists(), "{f} missing");
        }
        let history_text = fs::read_to_string(run_dir.join("history.jsonl")).unwrap();
        assert_eq!(history_text.lines().count(), 5);
        let parsed: EpochRecord = serde_json::from_str(history_text.lines().next().unwrap()).unwrap();
        assert_eq!(&parsed, first);

        let bundle: RunBundle =
            serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
        assert_eq!(bundle.train, cfg);
    }

    #[test]
    fn same_seed_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let size = 48;
        let (m_train, m_val) = toy_data(dir.path(), size, 24, 8);
        let model_cfg = toy_model_cfg(size, 32, 4);
        let roi = toy_roi(32, 4, false);
        let cfg = TrainConfig {
            regime: Regime::TranslationOnly,
            max_epochs: 2,
            batch_size: 8,
            seed: 21,
            ..TrainConfig::default()
        };
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let mut model = Model::build(&model_cfg, &mut rng).unwrap();
            let run_dir = dir.path().join(run);
            train(&mut model, &roi, &m_train, &m_val, &cfg, &run_dir).unwrap();
            outs.push(run_dir);
        }
        let h_a = fs::read(outs[0].join("history.jsonl")).unwrap();
        let h_b = fs::read(outs[1].join("history.jsonl")).unwrap();
        assert!(!h_a.is_empty());
        assert_eq!(h_a, h_b, "same seed must give byte-identical history");
        let c_a = fs::read(outs[0].join("last.ckpt")).unwrap();
        let c_b = fs::read(outs[1].join("last.ckpt")).unwrap();
        assert_eq!(c_a, c_b, "same seed must give byte-identical checkpoints");
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let size = 48;
        let (m_train, m_val) = toy_data(dir.path(), size, 16, 8);
        let model_cfg = toy_model_cfg(size, 32, 4);
        let roi = toy_roi(32, 4, false);
        let full_cfg = TrainConfig {
            regime: Regime::PoseDecoupled,
            max_epochs: 4,
            batch_size: 8,
            seed: 33,
            ..TrainConfig::default()
        };

        let full_dir = dir.path().join("full");
        let mut rng = ChaCha12Rng::seed_from_u64(full_cfg.seed);
        let mut model = Model::build(&model_cfg, &mut rng).unwrap();
        train(&mut model, &roi, &m_train, &m_val, &full_cfg, &full_dir).unwrap();

        let halted_dir = dir.path().join("halted");
        let halted_cfg = TrainConfig { max_epochs: 2, ..full_cfg.clone() };
        let mut rng = ChaCha12Rng::seed_from_u64(halted_cfg.seed);
        let mut model2 = Model::build(&model_cfg, &mut rng).unwrap();
        train(&mut model2, &roi, &m_train, &m_val, &halted_cfg, &halted_dir).unwrap();
        let resumed = resume(&halted_dir, &m_train, &m_val, Some(4)).unwrap();
        assert_eq!(resumed.history.len(), 2, "resume must run epochs 3 and 4");

        let h_full = fs::read(full_dir.join("history.jsonl")).unwrap();
        let h_resumed = fs::read(halted_dir.join("history.jsonl")).unwrap();
        assert_eq!(h_full, h_resumed, "resumed history must be bit-for-bit identical");
        let c_full = fs::read(full_dir.join("last.ckpt")).unwrap();
        let c_resumed = fs::read(halted_dir.join("last.ckpt")).unwrap();
        assert_eq!(c_full, c_resumed, "resumed checkpoint must be bit-for-bit identical");

        // Resuming a finished run does nothing.
        let noop = resume(&halted_dir, &m_train, &m_val, Some(4)).unwrap();
        assert!(noop.history.is_empty());
    }

    #[test]
    fn nan_loss_aborts_naming_batch_and_term() {
        let dir = tempfile::tempdir().unwrap();
        let size = 32;
        let (m_train, m_val) = toy_data(dir.path(), size, 8, 4);
        let model_cfg = toy_model_cfg(size, 16, 2);
        let roi = toy_roi(16, 2, false);
        // A step this size overflows the activations immediately.
        let cfg = TrainConfig {
            regime: Regime::TranslationOnly,
            max_epochs: 3,
            batch_size: 4,
            lr: 1e300,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let mut model = Model::build(&model_cfg, &mut rng).unwrap();
        let err = train(&mut model, &roi, &m_train, &m_val, &cfg, &dir.path().join("run"))
            .unwrap_err();
        match err {
            Error::Numeric(msg) => {
                assert!(msg.contains("term"), "missing term in {msg}");
                assert!(
                    msg.contains("batch") || msg.contains("val sample"),
                    "missing location in {msg}"
                );
            }
            other => panic!("expected a numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn ablation_suite_runs_six_rows_sharing_the_donor() {
        let dir = tempfile::tempdir().unwrap();
        let size = 48;
        let (m_train, m_val) = toy_data(dir.path(), size, 16, 8);
        let model_cfg = toy_model_cfg(size, 32, 4);
        let roi = toy_roi(32, 4, false);
        let base = TrainConfig {
            max_epochs: 1,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let out_dir = dir.path().join("ablation");
        let entries =
            ablation_suite(&model_cfg, &roi, &base, &m_train, &m_val, &out_dir).unwrap();

        assert_eq!(entries.len(), 6);
        let labels: Vec<(String, bool, bool)> =
            entries.iter().map(|e| (e.init.clone(), e.hc, e.cda)).collect();
        let expected: Vec<(String, bool, bool)> = ABLATION_ROWS
            .iter()
            .map(|&(i, h, c)| (i.to_string(), h, c))
            .collect();
        assert_eq!(labels, expected, "rows must match the published order");

        // HC-off rows freeze the donor's best translation weights.
        let donor = checkpoint::load(&out_dir.join("translation").join("best.ckpt")).unwrap();
        let donor_t: Vec<(String, Vec<f64>)> = donor
            .params
            .iter()
            .filter(|(n, _, _)| n.starts_with("t."))
            .map(|(n, _, d)| (n.clone(), d.clone()))
            .collect();
        for (row_no, &(init, hc, cda)) in ABLATION_ROWS.iter().enumerate() {
            if hc {
                continue;
            }
            let row_dir = out_dir.join(format!(
                "row{}_{}_hc_off_cda_{}",
                row_no + 1,
                init,
                if cda { "on" } else { "off" }
            ));
            let row = checkpoint::load(&row_dir.join("best.ckpt")).unwrap();
            let row_t: Vec<(String, Vec<f64>)> = row
                .params
                .iter()
                .filter(|(n, _, _)| n.starts_with("t."))
                .map(|(n, _, d)| (n.clone(), d.clone()))
                .collect();
            assert_eq!(donor_t, row_t, "row {} must carry the frozen donor", row_no + 1);
        }

        let table: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap())
                .unwrap();
        assert_eq!(
            table["columns"],
            serde_json::json!([
                "init", "HC", "CDA", "E_t_mean", "E_t_std", "E_q_mean_deg", "E_q_std_deg"
            ])
        );
        assert_eq!(table["rows"].as_array().unwrap().len(), 6);

        // Metrics are genuine numbers.
        for e in &entries {
            assert!(e.report.e_t.mean.is_finite());
            assert!(e.report.e_q_deg.mean >= 0.0);
        }
    }
}
