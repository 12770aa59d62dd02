//! Experiment configuration (JSON).
//!
//! Required keys: `model` and `data.source` (except for `extfl`),
//! `data.devices`, `protocol.kind`, `rounds`. Everything else has a default.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blockfl::BlockFlConfig;
use crate::error::{ConfigErrors, Error, Result};
use crate::evt::{GpdParams, GridConfig};
use crate::federation::{HyperParams, MixingSpec, ProtocolKind};
use crate::netsim::{ComputeModel, LinkModel};
use crate::nn::ModelSpec;
use crate::privacy::DpConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        labels: usize,
        per_class: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Csv {
        path: PathBuf,
        /// Held-out set in the same format; without it test columns stay empty.
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        label_count: Option<usize>,
    },
}

fn default_separation() -> f64 {
    3.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum PartitionMode {
    #[default]
    Iid,
    LabelSkew {
        labels_per_device: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub source: Option<DataSource>,
    /// Test samples per label for generated data.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub devices: usize,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub p_share: f64,
}

fn default_test_per_class() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    #[serde(default)]
    pub hyper: HyperParams,
    /// DSGD only; GADMM always uses the device chain.
    #[serde(default)]
    pub mixing: MixingSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationConfig {
    pub enabled: bool,
    /// Fixed level count; `null` derives it from the link capacity.
    pub levels: Option<usize>,
    /// Also quantize helper-to-device messages.
    pub downlink: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    Mle,
    Wasserstein,
}

/// Queue simulation and tail fit for `extfl` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvtConfig {
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub horizon: usize,
    pub threshold: f64,
    pub init: GpdParams,
    pub lr: f64,
    pub method: FitMethod,
    pub grid: GridConfig,
}

impl Default for EvtConfig {
    fn default() -> Self {
        EvtConfig {
            arrival_rate: 0.45,
            service_rate: 0.5,
            horizon: 20_000,
            threshold: 10.0,
            init: GpdParams { sigma: 1.0, xi: 0.1 },
            lr: 0.1,
            method: FitMethod::Mle,
            grid: GridConfig::default(),
        }
    }
}

impl EvtConfig {
    fn validate_into(&self, prefix: &str, errs: &mut ConfigErrors) {
        let p = |f: &str| format!("{prefix}.{f}");
        if !(0.0..=1.0).contains(&self.arrival_rate) {
            errs.push(p("arrival_rate"), "must lie in [0, 1]");
        }
        if !(self.service_rate > 0.0 && self.service_rate <= 1.0) {
            errs.push(p("service_rate"), "must lie in (0, 1]");
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            errs.push(p("threshold"), "must be nonnegative");
        }
        if !(self.init.sigma > 0.0 && self.init.sigma.is_finite() && self.init.xi.is_finite()) {
            errs.push(p("init"), "need sigma > 0 and finite xi");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(p("lr"), "must be positive");
        }
        if self.grid.bins < 2 {
            errs.push(p("grid.bins"), "must be at least 2");
        }
        if !(self.grid.span_factor >= 1.0) {
            errs.push(p("grid.span_factor"), "must be at least 1");
        }
        if !(self.grid.eps_fraction > 0.0) {
            errs.push(p("grid.eps_fraction"), "must be positive");
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub data: DataConfig,
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub links: LinkModel,
    #[serde(default)]
    pub compute: ComputeModel,
    #[serde(default)]
    pub quantization: QuantizationConfig,
    #[serde(default)]
    pub dp: DpConfig,
    #[serde(default)]
    pub blockfl: Option<BlockFlConfig>,
    #[serde(default)]
    pub evt: Option<EvtConfig>,
    pub rounds: usize,
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = ConfigErrors::default();
        let kind = self.protocol.kind;
        let extfl = kind == ProtocolKind::Extfl;
        if !extfl {
            match &self.model {
                None => errs.push("model", "required"),
                Some(spec) => {
                    if let Err(e) = spec.validate() {
                        errs.push("model.layer_widths", e.to_string());
                    } else if let Some(DataSource::Blobs { labels, dim, .. }) = &self.data.source {
                        if spec.input_dim() != *dim {
                            errs.push("model.layer_widths", format!("input width {} differs from data dim {dim}", spec.input_dim()));
                        }
                        if spec.output_dim() < *labels {
                            errs.push("model.layer_widths", format!("output width {} is below label count {labels}", spec.output_dim()));
                        }
                    }
                }
            }
            match &self.data.source {
                None => errs.push("data.source", "required"),
                Some(DataSource::Blobs { labels, per_class, dim, separation }) => {
                    if *labels < 2 {
                        errs.push("data.source.labels", "must be at least 2");
                    }
                    if *per_class == 0 {
                        errs.push("data.source.per_class", "must be positive");
                    }
                    if *dim == 0 {
                        errs.push("data.source.dim", "must be positive");
                    }
                    if !(*separation > 0.0 && separation.is_finite()) {
                        errs.push("data.source.separation", "must be positive");
                    }
                    if let PartitionMode::LabelSkew { labels_per_device } = self.data.partition {
                        if labels_per_device == 0 || labels_per_device > *labels {
                            errs.push("data.partition.labels_per_device", format!("must lie in [1, {labels}]"));
                        }
                    }
                }
                Some(DataSource::Csv { .. }) => {}
            }
        }
        if self.data.devices < kind.min_devices().max(1) {
            errs.push("data.devices", format!("{kind} needs at least {} devices", kind.min_devices().max(1)));
        }
        if !(0.0..=1.0).contains(&self.data.p_share) {
            errs.push("data.p_share", format!("must lie in [0, 1], got {}", self.data.p_share));
        }
        self.protocol.hyper.validate_into("protocol.hyper", &mut errs);
        if let MixingSpec::Explicit { entries } = &self.protocol.mixing {
            if entries.len() != self.data.devices {
                errs.push("protocol.mixing.entries", format!("need a {0}x{0} matrix", self.data.devices));
            }
        }
        self.links.validate_into("links", &mut errs);
        self.compute.validate_into("compute", &mut errs);
        self.dp.validate_into("dp", &mut errs);
        if self.quantization.levels == Some(0) {
            errs.push("quantization.levels", "must be at least 1");
        }
        if let Some(b) = &self.blockfl {
            b.validate_into("blockfl", &mut errs);
            if kind != ProtocolKind::Favg {
                errs.push("blockfl", "blockchain runs exchange weights and need protocol kind favg");
            }
        }
        match (&self.evt, extfl) {
            (Some(e), true) => e.validate_into("evt", &mut errs),
            (None, true) => errs.push("evt", "required for extfl"),
            (Some(_), false) => errs.push("evt", "only used by extfl"),
            (None, false) => {}
        }
        if let Some(t) = self.target_loss {
            if !t.is_finite() {
                errs.push("target_loss", "must be finite");
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn single_issue(path: String, message: String) -> Error {
    let mut errs = ConfigErrors::default();
    errs.push(if path == "." { String::new() } else { path }, message);
    Error::Config(errs)
}

/// Parses and validates a JSON document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        single_issue(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config_str(&std::fs::read_to_string(path)?)
}

fn from_value(v: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        single_issue(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Copy of `cfg` with the numeric field at dotted `path` set to `value`.
pub fn set_param(cfg: &ExperimentConfig, path: &str, value: f64) -> Result<ExperimentConfig> {
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    let mut slot = &mut root;
    for key in path.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| single_issue(path.to_string(), "no such field".into()))?;
    }
    let new = match slot {
        Value::Number(n) if n.is_u64() || n.is_i64() => {
            if value.fract() != 0.0 || value < 0.0 && n.is_u64() {
                return Err(single_issue(path.to_string(), format!("expects an integer, got {value}")));
            }
            if value < 0.0 {
                Value::from(value as i64)
            } else {
                Value::from(value as u64)
            }
        }
        Value::Number(_) | Value::Null => serde_json::Number::from_f64(value)
            .map(Value::Number)
            .ok_or_else(|| single_issue(path.to_string(), format!("not a finite number: {value}")))?,
        _ => return Err(single_issue(path.to_string(), "not a numeric field".into())),
    };
    *slot = new;
    from_value(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {"layer_widths": [2, 8, 3]},
        "data": {"source": {"kind": "blobs", "labels": 3, "per_class": 20, "dim": 2}, "devices": 3},
        "protocol": {"kind": "favg"},
        "rounds": 5
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.protocol.hyper, HyperParams::default());
        assert_eq!(cfg.links, LinkModel::default());
        assert_eq!(cfg.data.test_per_class, 50);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.blockfl.is_none());
    }

    #[test]
    fn negative_eta_names_its_path() {
        let text = MINIMAL.replace(r#""kind": "favg""#, r#""kind": "favg", "hyper": {"eta": -1}"#);
        match parse_config_str(&text) {
            Err(Error::Config(errs)) => assert!(errs.mentions("protocol.hyper.eta"), "{errs}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_missing_fields_fail() {
        let typo = MINIMAL.replace(r#""rounds": 5"#, r#""rounds": 5, "roudns": 3"#);
        assert!(parse_config_str(&typo).is_err());
        let nested = MINIMAL.replace(r#""kind": "favg""#, r#""kind": "favg", "hyper": {"etaa": 1}"#);
        match parse_config_str(&nested) {
            Err(Error::Config(errs)) => assert!(errs.0[0].path.starts_with("protocol.hyper"), "{errs}"),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"model": {"layer_widths": [2, 3]}, "data": {"devices": 1}, "protocol": {"kind": "csgd"}}"#;
        assert!(parse_config_str(missing).is_err());
        let no_source = r#"{"model": {"layer_widths": [2, 3]}, "data": {"devices": 1}, "protocol": {"kind": "csgd"}, "rounds": 1}"#;
        match parse_config_str(no_source) {
            Err(Error::Config(errs)) => assert!(errs.mentions("data.source")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip() {
        let mut cfg = parse_config_str(MINIMAL).unwrap();
        cfg.protocol.hyper.eta = 0.1 + 0.2;
        cfg.dp.clip_norm = Some(1.0 / 3.0);
        cfg.blockfl = Some(BlockFlConfig::default());
        let again = parse_config_str(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn set_param_paths() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        let c2 = set_param(&cfg, "protocol.hyper.eta", 0.5).unwrap();
        assert_eq!(c2.protocol.hyper.eta, 0.5);
        let c3 = set_param(&cfg, "rounds", 9.0).unwrap();
        assert_eq!(c3.rounds, 9);
        assert!(set_param(&cfg, "rounds", 2.5).is_err());
        assert!(set_param(&cfg, "protocol.hyper.nope", 1.0).is_err());
        assert!(set_param(&cfg, "protocol.kind", 1.0).is_err());
        let c4 = set_param(&cfg, "protocol.hyper.lr_decay", 10.0).unwrap();
        assert_eq!(c4.protocol.hyper.lr_decay, Some(10.0));
    }

    #[test]
    fn cross_field_checks() {
        let bad_dim = MINIMAL.replace(r#""dim": 2"#, r#""dim": 4"#);
        assert!(parse_config_str(&bad_dim).is_err());
        let fd_one = MINIMAL.replace(r#""devices": 3"#, r#""devices": 1"#).replace("favg", "fd");
        assert!(parse_config_str(&fd_one).is_err());
        let extfl = r#"{"data": {"devices": 2}, "protocol": {"kind": "extfl"}, "evt": {}, "rounds": 3}"#;
        assert!(parse_config_str(extfl).is_ok());
    }
}
