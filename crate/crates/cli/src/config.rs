//! Experiment and grid configuration: parsing, validation, resolution into
//! core types, and fingerprinting.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mgfuse_core::losses::{GuideMode, LossWeights};
use mgfuse_core::model::{FusionKind, ModelConfig};
use mgfuse_core::synthio::{DatasetSpec, DomainSpec, SceneSpec};
use mgfuse_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Overrides the configured output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "MGFUSE_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "mgfuse-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "vanilla+mg")]
    VanillaMg,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "mlp+symal")]
    MlpSymal,
    #[serde(rename = "mlp+mg")]
    MlpMg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vanilla, Variant::VanillaMg, Variant::Mlp, Variant::MlpSymal, Variant::MlpMg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::VanillaMg => "vanilla+mg",
            Variant::Mlp => "mlp",
            Variant::MlpSymal => "mlp+symal",
            Variant::MlpMg => "mlp+mg",
        }
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Variant::Vanilla | Variant::VanillaMg => FusionKind::Vanilla,
            _ => FusionKind::Mlp,
        }
    }

    pub fn is_mg(self) -> bool {
        matches!(self, Variant::VanillaMg | Variant::MlpMg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Mild shift in both modalities, daylight target.
    #[serde(rename = "geo-shift")]
    GeoShift,
    /// Target images heavily degraded, geometry untouched.
    #[serde(rename = "night")]
    Night,
    /// Target LiDAR replaced, images nearly unchanged.
    #[serde(rename = "sensor")]
    Sensor,
}

impl Preset {
    pub fn target_domain(self) -> DomainSpec {
        match self {
            Preset::GeoShift => DomainSpec::geo_shift(),
            Preset::Night => DomainSpec::night(),
            Preset::Sensor => DomainSpec::sensor_change(),
        }
    }

    /// 0 when the target images are unreliable, 1 otherwise.
    pub fn default_lambda(self) -> f64 {
        match self {
            Preset::Night => 0.0,
            Preset::GeoShift | Preset::Sensor => 1.0,
        }
    }

    /// `(lambda_source, lambda_target)`.
    pub fn default_domain_weights(self) -> (f64, f64) {
        match self {
            Preset::GeoShift | Preset::Night => (1.0, 0.1),
            Preset::Sensor => (0.5, 0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stages {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "1+2")]
    OneAndTwo,
}

impl Stages {
    pub fn list(self) -> &'static [u32] {
        match self {
            Stages::One => &[1],
            Stages::OneAndTwo => &[1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub preset: Preset,
    #[serde(default = "defaults::num_points")]
    pub num_points: usize,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "defaults::layout_seed")]
    pub layout_seed: u64,
    #[serde(default = "defaults::num_source")]
    pub num_source: usize,
    #[serde(default = "defaults::num_target")]
    pub num_target: usize,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "defaults::dataset_seed")]
    pub seed: u64,
}

/// Unset entries fall back to the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(default)]
    pub lambda_guide: Option<f64>,
    #[serde(default)]
    pub lambda_source: Option<f64>,
    #[serde(default)]
    pub lambda_target: Option<f64>,
    #[serde(default = "defaults::lambda_pl")]
    pub lambda_pl: f64,
    #[serde(default = "defaults::yes")]
    pub guide_on_source: bool,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            lambda_guide: None,
            lambda_source: None,
            lambda_target: None,
            lambda_pl: defaults::lambda_pl(),
            guide_on_source: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_3d: usize,
    pub layers_3d: usize,
    pub knn_k: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_3d: 32,
            layers_3d: 3,
            knn_k: 8,
            dropout: 0.1,
            bn_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub variant: Variant,
    #[serde(default)]
    pub weights: WeightsConfig,
    #[serde(default)]
    pub model: ModelSection,
    /// `seed` is ignored here; each entry of `seeds` is one run.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "defaults::stages")]
    pub stages: Stages,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// Runs every variant over the same base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// An experiment configuration without `variant`.
    pub base: serde_json::Value,
    pub variants: Vec<Variant>,
}

mod defaults {
    use super::Stages;

    pub fn num_points() -> usize {
        192
    }
    pub fn feature_dim() -> usize {
        32
    }
    pub fn layout_seed() -> u64 {
        7
    }
    pub fn num_source() -> usize {
        32
    }
    pub fn num_target() -> usize {
        72
    }
    pub fn val_fraction() -> f64 {
        0.2
    }
    pub fn test_fraction() -> f64 {
        0.45
    }
    pub fn dataset_seed() -> u64 {
        11
    }
    pub fn lambda_pl() -> f64 {
        1.0
    }
    pub fn yes() -> bool {
        true
    }
    pub fn stages() -> Stages {
        Stages::One
    }
    pub fn seeds() -> Vec<u64> {
        vec![0]
    }
}

/// Everything one (variant, seed) cell needs; its fingerprint keys all artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub experiment: String,
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub stages: Stages,
}

impl CellSpec {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// Hex SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_string(&v)).expect("config types serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn parse_with_path<T: DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner.as_str()) {
            (true, _) => inner.clone(),
            (false, ".") => prefix.to_string(),
            (false, _) => format!("{prefix}.{inner}"),
        };
        CliError::Config {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config {
        path: ".".into(),
        message: format!("{}: {e}", path.display()),
    })
}

impl ExperimentConfig {
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = parse_with_path(value, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_value(read_json(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |path: &str, message: String| {
            Err(CliError::Config {
                path: path.into(),
                message,
            })
        };
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || self.name.starts_with('.') {
            return invalid("name", format!("`{}` must be a nonempty [A-Za-z0-9._-] identifier", self.name));
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return invalid("seeds", "seeds must be distinct".into());
        }
        match (self.variant, self.weights.lambda_guide) {
            (Variant::MlpSymal, Some(_)) => {
                return invalid("weights.lambda_guide", "mlp+symal has no guidance coefficient; remove lambda_guide".into())
            }
            (v, Some(l)) if v.is_mg() && !(0.0..=1.0).contains(&l) => {
                return invalid("weights.lambda_guide", format!("must lie in [0, 1], got {l}"))
            }
            _ => {}
        }
        for (path, v) in [
            ("weights.lambda_source", self.weights.lambda_source),
            ("weights.lambda_target", self.weights.lambda_target),
            ("weights.lambda_pl", Some(self.weights.lambda_pl)),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return invalid(path, format!("must be finite and >= 0, got {v}"));
                }
            }
        }
        let core = |path: &str, r: mgfuse_core::Result<()>| {
            r.map_err(|e| CliError::Config {
                path: path.into(),
                message: e.to_string(),
            })
        };
        core("train", self.train.validate())?;
        let cell = self.cell(self.seeds[0]);
        core("dataset", cell.dataset.validate())?;
        core("model", cell.model.validate())?;
        core("weights", cell.weights.validate())?;
        Ok(())
    }

    pub fn lambda_guide(&self) -> Option<f64> {
        self.variant
            .is_mg()
            .then(|| self.weights.lambda_guide.unwrap_or(self.dataset.preset.default_lambda()))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        let mut scene = SceneSpec::desk(d.num_points, d.feature_dim, d.layout_seed);
        if let Some(k) = d.num_classes {
            scene = scene.with_classes(k);
        }
        DatasetSpec {
            scene,
            source: DomainSpec::day_source(),
            target: d.preset.target_domain(),
            num_source: d.num_source,
            num_target: d.num_target,
            val_fraction: d.val_fraction,
            test_fraction: d.test_fraction,
            seed: d.seed,
        }
    }

    pub fn cell(&self, seed: u64) -> CellSpec {
        let dataset = self.dataset_spec();
        let mut model = ModelConfig::new(dataset.scene.num_classes, dataset.scene.feature_dim);
        model.hidden_3d = self.model.hidden_3d;
        model.layers_3d = self.model.layers_3d;
        model.knn_k = self.model.knn_k;
        model.dropout = self.model.dropout;
        model.bn_momentum = self.model.bn_momentum;
        model.fusion = self.variant.fusion();
        model.symmetric_heads = self.variant == Variant::MlpSymal;

        let guide = match self.variant {
            Variant::MlpSymal => GuideMode::Symmetric,
            _ => self.lambda_guide().map_or(GuideMode::Disabled, GuideMode::Modality),
        };
        let (ls, lt) = self.dataset.preset.default_domain_weights();
        let mut weights = LossWeights::new(
            guide,
            self.weights.lambda_source.unwrap_or(ls),
            self.weights.lambda_target.unwrap_or(lt),
        );
        weights.lambda_pl = self.weights.lambda_pl;
        weights.guide_on_source = self.weights.guide_on_source;

        let mut train = self.train.clone();
        train.seed = seed;
        CellSpec {
            experiment: self.name.clone(),
            variant: self.variant,
            dataset,
            model,
            weights,
            train,
            stages: self.stages,
        }
    }

    /// `$MGFUSE_OUTPUT_ROOT`, else `output_dir`, else `mgfuse-out`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT)),
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.output_root().join(&self.name)
    }
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let grid: Self = parse_with_path(read_json(path)?, "")?;
        grid.experiments()?;
        Ok(grid)
    }

    /// One validated experiment per listed variant.
    pub fn experiments(&self) -> Result<Vec<ExperimentConfig>> {
        if self.variants.is_empty() {
            return Err(CliError::Config {
                path: "variants".into(),
                message: "the grid lists no variants".into(),
            });
        }
        let Some(base) = self.base.as_object() else {
            return Err(CliError::Config {
                path: "base".into(),
                message: "must be an object".into(),
            });
        };
        if base.contains_key("variant") {
            return Err(CliError::Config {
                path: "base.variant".into(),
                message: "variants are listed at the grid level".into(),
            });
        }
        let mut seen = Vec::new();
        self.variants
            .iter()
            .map(|&v| {
                if seen.contains(&v) {
                    return Err(CliError::Config {
                        path: "variants".into(),
                        message: format!("variant {v} listed twice"),
                    });
                }
                seen.push(v);
                let mut obj = base.clone();
                obj.insert("variant".into(), serde_json::Value::String(v.as_str().into()));
                let cfg: ExperimentConfig = parse_with_path(serde_json::Value::Object(obj), "base")?;
                cfg.validate().map_err(|e| match e {
                    CliError::Config { path, message } => CliError::Config {
                        path: format!("base.{path}"),
                        message: format!("{message} (variant {v})"),
                    },
                    other => other,
                })?;
                Ok(cfg)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal(variant: &str) -> serde_json::Value {
        json!({"name": "t", "dataset": {"preset": "night"}, "variant": variant})
    }

    #[test]
    fn preset_lambda_policy() {
        let cfg = ExperimentConfig::from_value(minimal("mlp+mg")).unwrap();
        assert_eq!(cfg.cell(0).weights.guide, GuideMode::Modality(0.0));
        let mut v = minimal("mlp+mg");
        v["dataset"]["preset"] = json!("sensor");
        let cell = ExperimentConfig::from_value(v).unwrap().cell(3);
        assert_eq!(cell.weights.guide, GuideMode::Modality(1.0));
        assert_eq!((cell.weights.lambda_source, cell.weights.lambda_target), (0.5, 0.5));
        assert_eq!(cell.seed(), 3);
    }

    #[test]
    fn variant_weight_consistency() {
        let mut v = minimal("mlp+symal");
        v["weights"] = json!({"lambda_guide": 0.5});
        match ExperimentConfig::from_value(v) {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "weights.lambda_guide"),
            other => panic!("expected config error, got {other:?}"),
        }
        let sym = ExperimentConfig::from_value(minimal("mlp+symal")).unwrap().cell(0);
        assert_eq!(sym.weights.guide, GuideMode::Symmetric);
        assert!(sym.model.symmetric_heads);
        let mut v = minimal("vanilla+mg");
        v["weights"] = json!({"lambda_guide": 1.5});
        assert!(ExperimentConfig::from_value(v).is_err());
        let plain = ExperimentConfig::from_value(minimal("vanilla")).unwrap().cell(0);
        assert_eq!(plain.weights.guide, GuideMode::Disabled);
        assert_eq!(plain.model.fusion, FusionKind::Vanilla);
    }

    #[test]
    fn errors_point_into_the_document() {
        let mut v = minimal("mlp");
        v["train"] = json!({"batch_size": "four"});
        match ExperimentConfig::from_value(v) {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "train.batch_size"),
            other => panic!("{other:?}"),
        }
        let mut v = minimal("mlp");
        v["dataset"]["colour"] = json!(1);
        assert!(matches!(ExperimentConfig::from_value(v), Err(CliError::Config { .. })));
        assert!(ExperimentConfig::from_value(minimal("mlp+xyz")).is_err());
        let mut v = minimal("mlp");
        v["seeds"] = json!([]);
        assert!(ExperimentConfig::from_value(v).is_err());
    }

    #[test]
    fn fingerprint_tracks_content_not_key_order() {
        let a = ExperimentConfig::from_value(minimal("mlp")).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"variant":"mlp","dataset":{"preset":"night"},"name":"t"}"#).unwrap();
        let b = ExperimentConfig::from_value(b).unwrap();
        assert_eq!(a.cell(0).fingerprint(), b.cell(0).fingerprint());
        assert_ne!(a.cell(0).fingerprint(), a.cell(1).fingerprint());
        assert_eq!(a.cell(0).fingerprint().len(), 64);
    }

    #[test]
    fn grid_expansion() {
        let grid = GridConfig {
            base: json!({"name": "g", "dataset": {"preset": "night"}, "seeds": [0, 1]}),
            variants: vec![Variant::Mlp, Variant::MlpMg],
        };
        let exps = grid.experiments().unwrap();
        assert_eq!(exps.iter().map(|e| e.variant).collect::<Vec<_>>(), vec![Variant::Mlp, Variant::MlpMg]);
        let empty = GridConfig {
            variants: vec![],
            ..grid.clone()
        };
        assert!(empty.experiments().is_err());
        let bad = GridConfig {
            base: json!({"name": "g", "dataset": {"preset": "night"}, "weights": {"lambda_guide": 0.0}}),
            variants: vec![Variant::MlpSymal],
        };
        match bad.experiments() {
            Err(CliError::Config { path, .. }) => assert_eq!(path, "base.weights.lambda_guide"),
            other => panic!("{other:?}"),
        }
    }
}
