//! Run configuration: one JSON file plus dotted `--set` overrides, checked
//! in full before any work starts.

use std::path::{Path, PathBuf};

use pemf_core::data::SynthConfig;
use pemf_core::objective::{LossConfig, LossWeights};
use pemf_core::trainer::AdamConfig;
use pemf_core::{NetworkConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub threshold: f64,
    pub include_normal: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            adam: t.adam,
            eval_every: t.eval_every,
            threshold: t.threshold,
            include_normal: t.include_normal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub lambda_bce: f64,
    pub lambda_tv: f64,
    pub lambda_dice: f64,
    pub epsilon: f64,
    pub tv_all_scales: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            lambda_bce: l.weights.lambda_bce,
            lambda_tv: l.weights.lambda_tv,
            lambda_dice: l.weights.lambda_dice,
            epsilon: l.epsilon,
            tv_all_scales: l.tv_all_scales,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_level: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            count: s.count,
            size: s.size,
            seed: s.seed,
            noise_level: s.noise_level,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// `"synth"` or a dataset directory.
    pub source: String,
    pub layout: String,
    /// `[H, W]` every sample is resized to; defaults to the common extent.
    pub input_size: Option<[usize; 2]>,
    /// Fold manifest; with `fold`, that fold is held out.
    pub manifest: Option<PathBuf>,
    pub fold: Option<usize>,
    /// Without a manifest, the last `round(n · test_fraction)` samples are
    /// held out.
    pub test_fraction: f64,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synth".into(),
            layout: "flat".into(),
            input_size: None,
            manifest: None,
            fold: None,
            test_fraction: 0.25,
            synth: SynthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub loss: LossSection,
    pub data: DataSection,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            data: DataSection::default(),
            output_dir: PathBuf::from("runs/train"),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            seed: t.seed,
            loss: LossConfig {
                weights: LossWeights {
                    lambda_bce: self.loss.lambda_bce,
                    lambda_tv: self.loss.lambda_tv,
                    lambda_dice: self.loss.lambda_dice,
                },
                epsilon: self.loss.epsilon,
                tv_all_scales: self.loss.tv_all_scales,
            },
            eval_every: t.eval_every,
            threshold: t.threshold,
            include_normal: t.include_normal,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.data.synth;
        SynthConfig {
            count: s.count,
            size: s.size,
            seed: s.seed,
            noise_level: s.noise_level,
        }
    }

    /// Semantic checks across every section.
    fn problems(&self) -> Vec<String> {
        let mut out = self.network.problems();
        let train = self.train_config();
        out.extend(train.problems().into_iter().filter(|p| p.starts_with("train.")));
        let l = &self.loss;
        for (name, v) in [
            ("lambda_bce", l.lambda_bce),
            ("lambda_tv", l.lambda_tv),
            ("lambda_dice", l.lambda_dice),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("loss.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(l.epsilon.is_finite() && l.epsilon > 0.0) {
            out.push(format!("loss.epsilon must be positive, got {}", l.epsilon));
        }
        let d = &self.data;
        if d.source.is_empty() {
            out.push("data.source must be \"synth\" or a directory".into());
        }
        if d.layout.parse::<pemf_core::data::Layout>().is_err() {
            out.push(format!("data.layout must be flat, busi or busis, got '{}'", d.layout));
        }
        if let Some([h, w]) = d.input_size {
            if let Err(e) = self.network.check_input(h, w) {
                out.push(format!("data.input_size: {e}"));
            }
        }
        if d.manifest.is_some() != d.fold.is_some() {
            out.push("data.manifest and data.fold must be given together".into());
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            out.push(format!("data.test_fraction must lie in [0, 1), got {}", d.test_fraction));
        }
        if d.source == "synth" {
            let s = &d.synth;
            if s.count == 0 {
                out.push("data.synth.count must be at least 1".into());
            }
            if s.size < 8 {
                out.push(format!("data.synth.size must be at least 8, got {}", s.size));
            }
            if !(0.0..1.0).contains(&s.noise_level) {
                out.push(format!("data.synth.noise_level must lie in [0, 1), got {}", s.noise_level));
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir must be set".into());
        }
        out
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Overlays `patch` onto `base`, recording unknown keys and leaf type
/// mismatches against the pristine `defaults`. Keys whose default is `null`
/// accept any value here and are checked when the section is decoded.
fn overlay(base: &mut Value, defaults: &Value, patch: Value, path: &str, errors: &mut Vec<String>) {
    match (defaults, patch) {
        (Value::Null, p) => *base = p,
        (Value::Object(d), Value::Object(p)) => {
            let Value::Object(b) = base else { unreachable!("object defaults stay objects") };
            for (k, v) in p {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match (b.get_mut(&k), d.get(&k)) {
                    (Some(slot), Some(def)) => overlay(slot, def, v, &child, errors),
                    _ => errors.push(format!("{child}: unknown key")),
                }
            }
        }
        (def, p) => {
            let compatible = match (def, &p) {
                (Value::Number(a), Value::Number(b)) => a.is_f64() || !b.is_f64(),
                (Value::Object(_), _) => false,
                (a, b) => std::mem::discriminant(a) == std::mem::discriminant(b),
            };
            if compatible {
                *base = p;
            } else {
                let expected = match def {
                    Value::Number(n) if !n.is_f64() => "integer",
                    other => type_name(other),
                };
                errors.push(format!("{path}: expected {expected}, got {p}"));
            }
        }
    }
}

/// Parses a `a.b.c=value` override into a nested JSON patch. The value is
/// read as JSON when it parses, otherwise as a string.
fn parse_override(spec: &str) -> Result<Value, String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override '{spec}' is not of the form key.path=value"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(format!("override '{spec}' has an empty key"));
    }
    let mut value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    for key in path.rsplit('.') {
        let mut m = Map::new();
        m.insert(key.to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

#[derive(Debug)]
pub enum LoadError {
    /// Unreadable config file.
    Io(String),
    Invalid(Vec<String>),
}

/// Defaults, then the file (if any), then overrides in order. Returns every
/// problem found rather than stopping at the first.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, LoadError> {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut merged = defaults.clone();
    let mut errors = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LoadError::Io(format!("cannot read config {}: {e}", path.display())))?;
        match serde_json::from_str::<Value>(&text) {
            Ok(v @ Value::Object(_)) => overlay(&mut merged, &defaults, v, "", &mut errors),
            Ok(other) => errors.push(format!("config root must be an object, got {}", type_name(&other))),
            Err(e) => errors.push(format!("config {} is not valid JSON: {e}", path.display())),
        }
    }
    for spec in overrides {
        match parse_override(spec) {
            Ok(patch) => overlay(&mut merged, &defaults, patch, "", &mut errors),
            Err(e) => errors.push(e),
        }
    }
    let Value::Object(sections) = merged else { unreachable!("defaults are an object") };
    let mut decoded = RunConfig::default();
    for (key, value) in sections {
        let res = match key.as_str() {
            "network" => serde_json::from_value(value).map(|v| decoded.network = v),
            "train" => serde_json::from_value(value).map(|v| decoded.train = v),
            "loss" => serde_json::from_value(value).map(|v| decoded.loss = v),
            "data" => serde_json::from_value(value).map(|v| decoded.data = v),
            "output_dir" => serde_json::from_value(value).map(|v| decoded.output_dir = v),
            _ => Ok(()),
        };
        if let Err(e) = res {
            errors.push(format!("{key}: {e}"));
        }
    }
    // Sections that failed to decode keep their defaults, so the semantic
    // checks below only flag values the user actually supplied.
    errors.extend(decoded.problems());
    if errors.is_empty() {
        Ok(decoded)
    } else {
        Err(LoadError::Invalid(errors))
    }
}
