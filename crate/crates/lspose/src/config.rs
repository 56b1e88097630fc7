//! Run configuration: one JSON document wiring the model, region of
//! interest, training, and synthetic-scene settings together, plus
//! dotted-key overrides for experiment sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::render::SceneConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::roi::RoiConfig;
use crate::training::TrainConfig;

/// Complete configuration for a run. Every CLI subcommand reads one of
/// these from `--config` (or the defaults) and applies `--set` overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub roi: RoiConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

impl RunConfig {
    /// Validates each section and the couplings between them: the crop
    /// geometry, heatmap concatenation, and jitter ratio are stored in
    /// both the model/train and ROI sections and must agree.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.roi.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.roi.crop_size != self.model.crop_size {
            return Err(Error::Config(format!(
                "roi.crop_size {} does not match model.crop_size {}",
                self.roi.crop_size, self.model.crop_size
            )));
        }
        if self.roi.hc_enabled != self.model.hc_enabled {
            return Err(Error::Config(
                "roi.hc_enabled does not match model.hc_enabled".into(),
            ));
        }
        if self.roi.hc_enabled && self.roi.hc_channels != self.model.heat_channels {
            return Err(Error::Config(format!(
                "roi.hc_channels {} does not match model.heat_channels {}",
                self.roi.hc_channels, self.model.heat_channels
            )));
        }
        if self.train.cda_enabled && (self.roi.cda_r - self.train.cda_r).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "roi.cda_r {} does not match train.cda_r {}",
                self.roi.cda_r, self.train.cda_r
            )));
        }
        Ok(())
    }

    /// Loads a config from a JSON file. Absent fields take defaults;
    /// unknown fields are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Saves the config as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Contract(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Applies `key=value` overrides with dotted paths (`train.lr=0.001`,
/// `scene.camera.fx=180`). Every path must name an existing key; values
/// parse as JSON where possible and fall back to plain strings, so
/// `train.regime=pose_decoupled` and `model.input_size=[128,128]` both
/// work without quoting.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut root = serde_json::to_value(cfg)
        .map_err(|e| Error::Contract(format!("config serialization failed: {e}")))?;
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| {
            Error::Usage(format!("override '{item}' must have the form key=value"))
        })?;
        let mut segments: Vec<&str> = key.split('.').collect();
        let last = segments.pop().expect("split yields at least one segment");
        let mut node = &mut root;
        for seg in segments {
            node = node
                .as_object_mut()
                .and_then(|map| map.get_mut(seg))
                .ok_or_else(|| Error::Usage(format!("unknown config key '{key}'")))?;
        }
        let slot = node
            .as_object_mut()
            .and_then(|map| map.get_mut(last))
            .ok_or_else(|| Error::Usage(format!("unknown config key '{key}'")))?;
        *slot = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    }
    serde_json::from_value(root)
        .map_err(|e| Error::Usage(format!("invalid override value: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BackboneScale;
    use crate::training::Regime;

    fn set(cfg: &RunConfig, items: &[&str]) -> Result<RunConfig> {
        let owned: Vec<String> = items.iter().map(|s| s.to_string()).collect();
        apply_overrides(cfg, &owned)
    }

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields_of_every_type() {
        let cfg = RunConfig::default();
        let out = set(
            &cfg,
            &[
                "train.lr=0.0005",
                "train.batch_size=8",
                "train.regime=pose_end_to_end",
                "model.hc_enabled=true",
                "roi.hc_enabled=true",
                "model.backbone_scale=large",
                "model.input_size=[128,128]",
                "scene.camera.fx=200.5",
                "roi.k_object=612.25",
                "train.warm_start_translation=/tmp/w.ckpt",
            ],
        )
        .unwrap();
        assert_eq!(out.train.lr, 0.0005);
        assert_eq!(out.train.batch_size, 8);
        assert_eq!(out.train.regime, Regime::PoseEndToEnd);
        assert!(out.model.hc_enabled);
        assert_eq!(out.model.backbone_scale, BackboneScale::Large);
        assert_eq!(out.model.input_size, (128, 128));
        assert_eq!(out.scene.camera.fx, 200.5);
        assert_eq!(out.roi.k_object, 612.25);
        assert_eq!(
            out.train.warm_start_translation.as_deref(),
            Some(Path::new("/tmp/w.ckpt"))
        );
        out.validate().unwrap();
        // Untouched sections keep their defaults.
        assert_eq!(out.scene.width, cfg.scene.width);
    }

    #[test]
    fn option_fields_accept_null_and_strings() {
        let cfg = RunConfig::default();
        let with = set(&cfg, &["model.pretrained_path=weights.ckpt"]).unwrap();
        assert_eq!(with.model.pretrained_path.as_deref(), Some("weights.ckpt"));
        let cleared = set(&with, &["model.pretrained_path=null"]).unwrap();
        assert_eq!(cleared.model.pretrained_path, None);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let cfg = RunConfig::default();
        for bad in [
            "train.learning_rate=0.1",
            "nosuch.lr=0.1",
            "train.lr.deep=0.1",
            "model=42",
        ] {
            match set(&cfg, &[bad]) {
                Err(Error::Usage(_)) => {}
                other => panic!("{bad}: expected usage error, got {other:?}"),
            }
        }
        match set(&cfg, &["train.lr"]) {
            Err(Error::Usage(msg)) => assert!(msg.contains("key=value")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatches_are_usage_errors() {
        let cfg = RunConfig::default();
        match set(&cfg, &["train.batch_size=fast"]) {
            Err(Error::Usage(_)) => {}
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn partial_file_fills_missing_sections_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"train": {"lr": 0.01}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model, ModelConfig::default());

        std::fs::write(&path, r#"{"train": {"lr": 0.01, "bogus": 1}}"#).unwrap();
        match RunConfig::load(&path) {
            Err(Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn save_and_load_are_inverse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let cfg = set(&RunConfig::default(), &["train.seed=7", "scene.width=96"]).unwrap();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn cross_section_couplings_are_checked() {
        let cfg = RunConfig::default();
        for bad in [
            vec!["roi.crop_size=112"],
            vec!["model.hc_enabled=true"],
            vec!["model.hc_enabled=true", "roi.hc_enabled=true", "roi.hc_channels=32"],
            vec!["train.cda_enabled=true", "train.cda_r=0.2"],
        ] {
            let out = set(&cfg, &bad).unwrap();
            match out.validate() {
                Err(Error::Config(_)) => {}
                other => panic!("{bad:?}: expected config error, got {other:?}"),
            }
        }
    }
}
