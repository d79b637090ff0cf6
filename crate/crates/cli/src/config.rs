//! Experiment configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use docgrid::augment::{ArPolicy, TransformSpec};
use docgrid::eval::EvalMode;
use docgrid::imaging::RepresentationSpec;
use docgrid::network::{build_alexnet, ArchFlags, ArchSpec, Width};
use docgrid::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Network shape: an AlexNet variant edited along input size, depth and
/// width, plus the optional layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub input_size: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: Width,
    pub classes: usize,
    #[serde(default = "yes")]
    pub lrn: bool,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default = "default_keep")]
    pub dropout_keep: f64,
    #[serde(default)]
    pub spp_levels: Option<Vec<usize>>,
}

fn default_depth() -> usize {
    5
}

fn default_width() -> Width {
    Width::from(1.0)
}

fn yes() -> bool {
    true
}

fn default_keep() -> f64 {
    0.5
}

/// Optimization schedule; the remaining [`TrainConfig`] fields come from
/// the top level of the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub batch_size: usize,
    pub updates: usize,
    pub base_lr: f64,
    pub lr_step: usize,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scales: Option<Vec<usize>>,
    pub fraction: f64,
    pub val_interval: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            updates: t.updates,
            base_lr: t.base_lr,
            lr_step: t.lr_step,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            scales: t.scales,
            fraction: t.fraction,
            val_interval: t.val_interval,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub representation: RepresentationSpec,
    #[serde(default)]
    pub transform: TransformSpec,
    #[serde(default = "default_ar")]
    pub ar_policy: ArPolicy,
    pub arch: ArchConfig,
    #[serde(default)]
    pub train: Schedule,
    #[serde(default = "default_eval")]
    pub eval: EvalMode,
}

fn default_ar() -> ArPolicy {
    ArPolicy::Warp
}

fn default_eval() -> EvalMode {
    EvalMode::Single
}

fn field(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config {
        path: path.to_string(),
        msg: msg.to_string(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| field("<root>", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Core(e.into()))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every field and cross-field rule; errors name the offending fields.
    pub fn validate(&self) -> Result<(), CliError> {
        let a = &self.arch;
        if a.input_size == 0 {
            return Err(field("arch.input_size", "must be positive"));
        }
        if a.depth < 2 {
            return Err(field("arch.depth", "must be at least 2"));
        }
        if !(a.width.conv > 0.0 && a.width.conv.is_finite()) {
            return Err(field("arch.width.conv", "must be positive"));
        }
        if !(a.width.fc > 0.0 && a.width.fc.is_finite()) {
            return Err(field("arch.width.fc", "must be positive"));
        }
        if a.classes == 0 {
            return Err(field("arch.classes", "must be positive"));
        }
        if !(a.dropout_keep > 0.0 && a.dropout_keep <= 1.0) {
            return Err(field("arch.dropout_keep", "must be in (0, 1]"));
        }
        self.representation
            .validate()
            .map_err(|e| field("representation.channels", e))?;
        self.transform.validate().map_err(|e| field("transform", e))?;
        self.ar_policy.validate().map_err(|e| field("ar_policy", e))?;

        let t = &self.train;
        for (name, v) in [
            ("train.batch_size", t.batch_size),
            ("train.updates", t.updates),
            ("train.lr_step", t.lr_step),
            ("train.val_interval", t.val_interval),
        ] {
            if v == 0 {
                return Err(field(name, "must be positive"));
            }
        }
        if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
            return Err(field("train.base_lr", "must be positive"));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(field("train.lr_decay", "must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(field("train.momentum", "must be in [0, 1)"));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(field("train.weight_decay", "must be non-negative"));
        }
        if !(t.fraction > 0.0 && t.fraction <= 1.0) {
            return Err(field("train.fraction", "must be in (0, 1]"));
        }
        if let Some(s) = &t.scales {
            if s.is_empty() || s.contains(&0) {
                return Err(field("train.scales", "must be a non-empty list of positive sizes"));
            }
        }
        self.eval.validate().map_err(|e| field("eval", e))?;

        let spp = a.spp_levels.is_some();
        if matches!(self.ar_policy, ArPolicy::Variable { .. }) && !spp {
            return Err(field(
                "ar_policy, arch.spp_levels",
                "the variable aspect-ratio policy needs SPP",
            ));
        }
        if t.scales.is_some() && !spp {
            return Err(field("train.scales, arch.spp_levels", "multi-scale training needs SPP"));
        }
        if matches!(self.eval, EvalMode::MultiScale { .. }) && !spp {
            return Err(field("eval.mode, arch.spp_levels", "multi-scale evaluation needs SPP"));
        }
        if a.batch_norm && (t.scales.is_some() || matches!(self.ar_policy, ArPolicy::Variable { .. })) {
            return Err(field(
                "arch.batch_norm, train.scales",
                "batch norm needs every image of a batch at one size",
            ));
        }
        self.arch_spec().map_err(|e| match e {
            CliError::Core(e) => field("arch", e),
            other => other,
        })?;
        Ok(())
    }

    pub fn arch_flags(&self) -> ArchFlags {
        ArchFlags {
            input_channels: self.representation.depth(),
            classes: self.arch.classes,
            lrn: self.arch.lrn,
            batch_norm: self.arch.batch_norm,
            dropout: self.arch.dropout,
            dropout_keep: self.arch.dropout_keep,
            spp_levels: self.arch.spp_levels.clone(),
        }
    }

    pub fn arch_spec(&self) -> Result<ArchSpec, CliError> {
        Ok(build_alexnet(
            self.arch.input_size,
            self.arch.width,
            self.arch.depth,
            &self.arch_flags(),
        )?)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            updates: t.updates,
            base_lr: t.base_lr,
            lr_step: t.lr_step,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed: self.seed,
            transform: self.transform.clone(),
            ar_policy: self.ar_policy.clone(),
            representation: self.representation.clone(),
            scales: t.scales.clone(),
            fraction: t.fraction,
            val_interval: t.val_interval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "manifest": "data/manifest.csv",
        "output_dir": "runs/a",
        "arch": {"input_size": 64, "depth": 2, "width": {"conv": 0.1, "fc": 0.1}, "classes": 4}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.eval, EvalMode::Single);
        assert_eq!(c.ar_policy, ArPolicy::Warp);
        assert_eq!(c.arch_spec().unwrap().input.height, 64);
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.to_json()).unwrap(), c);
    }

    fn error_path(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(CliError::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn variable_ar_without_spp_names_both_fields() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["ar_policy"] = serde_json::json!({"policy": "variable", "budget": null});
        let p = error_path(&v.to_string());
        assert!(p.contains("ar_policy") && p.contains("arch.spp_levels"), "{p}");
    }

    #[test]
    fn bad_fields_are_named() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["train"] = serde_json::json!({"fraction": 0.0});
        assert_eq!(error_path(&v.to_string()), "train.fraction");
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["arch"]["depth"] = 1.into();
        assert_eq!(error_path(&v.to_string()), "arch.depth");
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["eval"] = serde_json::json!({"mode": "multi_scale", "sizes": [48, 64]});
        assert!(error_path(&v.to_string()).contains("eval.mode"));
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["surprise"] = 1.into();
        assert_eq!(error_path(&v.to_string()), "<root>");
    }
}
