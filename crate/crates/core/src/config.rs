//! Layered run configuration: built-in defaults, then a TOML file (tables
//! flatten to dotted keys), then command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corruption::CorruptionSpec;
use crate::error::{Error, Result};
use crate::evaluation::FoldSettings;
use crate::finetune::{FinetuneConfig, InitMode, InputMode, Task, TaskSpec};
use crate::lbp::{BorderPolicy, Comparison, LbpSpec};
use crate::phantom::PhantomSpec;
use crate::preprocess::{MeanOver, PreprocessSpec, WindowSpec};
use crate::pretrain::PretrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            // `{:?}` keeps a decimal point so the value re-parses as a float
            Value::Float(v) => write!(f, "{v:?}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn describe(&self) -> &'static str {
        match self {
            Kind::Int => "an integer",
            Kind::Float => "a number",
            Kind::Bool => "a boolean",
            Kind::Str => "a string",
            Kind::Choice(_) => "one of the listed choices",
        }
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: fn() -> Value,
    pub help: &'static str,
}

macro_rules! key {
    ($k:literal, $kind:expr, $def:expr, $help:literal) => {
        KeySpec {
            key: $k,
            kind: $kind,
            default: || $def,
            help: $help,
        }
    };
}

const MEAN_OVER: &[&str] = &["all", "masked"];
const COMPARISON: &[&str] = &["strict", "ge"];
const BORDER: &[&str] = &["replicate", "zero"];
const INPUT: &[&str] = &["image", "lbp"];
const INIT: &[&str] = &["ssl", "random"];
const TASK: &[&str] = &["fibrosis", "steatosis", "lobular", "ballooning"];

/// Every accepted key with its type and default.
pub const SCHEMA: &[KeySpec] = &[
    key!("seed", Kind::Int, Value::Int(0), "base seed for every stage"),
    key!("deterministic", Kind::Bool, Value::Bool(false), "fixed reduction order"),
    key!("phantom.patients", Kind::Int, Value::Int(30), "synthetic patients"),
    key!("phantom.slices", Kind::Int, Value::Int(20), "slices per patient"),
    key!("phantom.dims", Kind::Int, Value::Int(64), "in-plane size"),
    key!("phantom.categories", Kind::Int, Value::Int(2), "texture categories"),
    key!("phantom.base_hu", Kind::Float, Value::Float(60.0), "mean liver HU"),
    key!("phantom.noise_sigma", Kind::Float, Value::Float(20.0), "texture HU amplitude"),
    key!("preprocess.hu_lo", Kind::Float, Value::Float(-200.0), "window lower bound"),
    key!("preprocess.hu_hi", Kind::Float, Value::Float(250.0), "window upper bound"),
    key!("preprocess.threshold", Kind::Float, Value::Float(5.0), "min mean on the 0-255 scale"),
    key!("preprocess.size", Kind::Int, Value::Int(224), "output slice size"),
    key!("preprocess.mean_over", Kind::Choice(MEAN_OVER), Value::Str("all".into()), "pixels in the filter mean"),
    key!("lbp.radius", Kind::Int, Value::Int(1), "sampling radius"),
    key!("lbp.neighbors", Kind::Int, Value::Int(8), "sampling points"),
    key!("lbp.comparison", Kind::Choice(COMPARISON), Value::Str("strict".into()), "bit test"),
    key!("lbp.border", Kind::Choice(BORDER), Value::Str("replicate".into()), "border handling"),
    key!("pretrain.epochs", Kind::Int, Value::Int(700), "epochs"),
    key!("pretrain.batch", Kind::Int, Value::Int(30), "slices per batch"),
    key!("pretrain.lr", Kind::Float, Value::Float(2e-4), "Adam learning rate"),
    key!("pretrain.adv_weight", Kind::Float, Value::Float(0.01), "adversarial weight"),
    key!("pretrain.adversarial", Kind::Bool, Value::Bool(true), "train with the discriminator"),
    key!("pretrain.patch", Kind::Int, Value::Int(20), "swap patch size"),
    key!("pretrain.swaps", Kind::Int, Value::Int(10), "swaps per slice"),
    key!("finetune.epochs", Kind::Int, Value::Int(30), "epochs"),
    key!("finetune.lr", Kind::Float, Value::Float(1e-4), "Adam learning rate"),
    key!("finetune.batch", Kind::Int, Value::Int(4), "patients per batch"),
    key!("finetune.weight_decay", Kind::Float, Value::Float(0.01), "L2 weight decay"),
    key!("finetune.input", Kind::Choice(INPUT), Value::Str("lbp".into()), "network input"),
    key!("finetune.init", Kind::Choice(INIT), Value::Str("ssl".into()), "encoder initialisation"),
    key!("finetune.task", Kind::Choice(TASK), Value::Str("fibrosis".into()), "single-task commands"),
    key!("finetune.trainable_convs", Kind::Int, Value::Int(2), "top conv layers left trainable"),
    key!("eval.folds", Kind::Int, Value::Int(3), "cross-validation folds"),
    key!("eval.repeats", Kind::Int, Value::Int(5), "repeats"),
    key!("eval.val_patients", Kind::Int, Value::Int(2), "held-out patients for model selection"),
    key!(
        "eval.tasks",
        Kind::Str,
        Value::Str("fibrosis,steatosis,lobular,ballooning".into()),
        "comma-separated tasks"
    ),
];

fn schema(key: &str) -> Result<&'static KeySpec> {
    SCHEMA
        .iter()
        .find(|s| s.key == key)
        .ok_or_else(|| Error::UnknownKey(key.to_string()))
}

fn mismatch(spec: &KeySpec, got: impl ToString) -> Error {
    let expected = match spec.kind {
        Kind::Choice(c) => format!("one of {}", c.join("|")),
        k => k.describe().to_string(),
    };
    Error::TypeMismatch {
        key: spec.key.to_string(),
        expected,
        got: got.to_string(),
    }
}

/// Parse a command-line string for `key`.
pub fn parse_value(key: &str, raw: &str) -> Result<Value> {
    let spec = schema(key)?;
    let raw = raw.trim();
    let v = match spec.kind {
        Kind::Int => raw.parse().map(Value::Int).map_err(|_| mismatch(spec, raw))?,
        Kind::Float => raw.parse().map(Value::Float).map_err(|_| mismatch(spec, raw))?,
        Kind::Bool => raw.parse().map(Value::Bool).map_err(|_| mismatch(spec, raw))?,
        Kind::Str | Kind::Choice(_) => Value::Str(raw.trim_matches('"').to_string()),
    };
    check(spec, v)
}

fn from_toml(key: &str, v: &toml::Value) -> Result<Value> {
    let spec = schema(key)?;
    let v = match (spec.kind, v) {
        (Kind::Int, toml::Value::Integer(i)) => Value::Int(*i),
        (Kind::Float, toml::Value::Float(f)) => Value::Float(*f),
        (Kind::Float, toml::Value::Integer(i)) => Value::Float(*i as f64),
        (Kind::Bool, toml::Value::Boolean(b)) => Value::Bool(*b),
        (Kind::Str | Kind::Choice(_), toml::Value::String(s)) => Value::Str(s.clone()),
        (_, other) => return Err(mismatch(spec, other)),
    };
    check(spec, v)
}

fn check(spec: &KeySpec, v: Value) -> Result<Value> {
    if let (Kind::Choice(choices), Value::Str(s)) = (spec.kind, &v) {
        if !choices.contains(&s.as_str()) {
            return Err(mismatch(spec, s));
        }
    }
    Ok(v)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: SCHEMA.iter().map(|s| (s.key.to_string(), (s.default)())).collect(),
        }
    }
}

impl RunConfig {
    /// Defaults, overlaid by `file_text` (TOML), overlaid by `flags`.
    pub fn resolve(file_text: Option<&str>, flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file_text {
            cfg.merge_toml(text)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_file(path: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        RunConfig::resolve(text.as_deref(), flags)
    }

    pub fn merge_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (k, v) in flat {
            let v = from_toml(&k, &v)?;
            self.values.insert(k, v);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = parse_value(key, raw)?;
        self.values.insert(key.to_string(), v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> &Value {
        self.values.get(key).unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    pub fn int(&self, key: &str) -> i64 {
        match self.get(key) {
            Value::Int(v) => *v,
            v => panic!("key `{key}` holds {v:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key).max(0) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.get(key) {
            Value::Float(v) => *v,
            Value::Int(v) => *v as f64,
            v => panic!("key `{key}` holds {v:?}"),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.get(key) {
            Value::Bool(v) => *v,
            v => panic!("key `{key}` holds {v:?}"),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.get(key) {
            Value::Str(v) => v,
            v => panic!("key `{key}` holds {v:?}"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.int("seed") as u64
    }

    fn validate(&self) -> Result<()> {
        for key in SCHEMA.iter().filter(|s| s.kind == Kind::Int).map(|s| s.key) {
            if key != "seed" && self.int(key) < 0 {
                return Err(Error::Config(format!("`{key}` must be non-negative")));
            }
        }
        if self.float("preprocess.hu_lo") >= self.float("preprocess.hu_hi") {
            return Err(Error::Config("preprocess.hu_lo must be below preprocess.hu_hi".into()));
        }
        self.tasks()?;
        Ok(())
    }

    /// `key = value` lines in key order; also the on-disk resolved config.
    pub fn to_toml_lines(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the sorted `key = value` lines.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_lines().as_bytes()))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml_lines()).map_err(|e| Error::io(&path, e))
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            n_patients: self.usize("phantom.patients"),
            slices_per_patient: self.usize("phantom.slices"),
            dims: self.usize("phantom.dims"),
            base_hu: self.float("phantom.base_hu"),
            noise_sigma: self.float("phantom.noise_sigma"),
            seed: self.seed(),
            ..PhantomSpec::with_categories(self.usize("phantom.categories"))
        }
    }

    pub fn preprocess_spec(&self) -> PreprocessSpec {
        PreprocessSpec {
            window: WindowSpec {
                lo: self.float("preprocess.hu_lo"),
                hi: self.float("preprocess.hu_hi"),
            },
            threshold: self.float("preprocess.threshold"),
            target: self.usize("preprocess.size"),
            mean_over: match self.str("preprocess.mean_over") {
                "masked" => MeanOver::MaskedPixels,
                _ => MeanOver::AllPixels,
            },
            ..Default::default()
        }
    }

    pub fn lbp_spec(&self) -> LbpSpec {
        LbpSpec {
            radius: self.usize("lbp.radius"),
            neighbors: self.usize("lbp.neighbors"),
            comparison: match self.str("lbp.comparison") {
                "ge" => Comparison::GreaterOrEqual,
                _ => Comparison::StrictGreater,
            },
            border: match self.str("lbp.border") {
                "zero" => BorderPolicy::ZeroCode,
                _ => BorderPolicy::Replicate,
            },
            ..Default::default()
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.usize("pretrain.epochs"),
            batch_size: self.usize("pretrain.batch"),
            lr: self.float("pretrain.lr"),
            adv_weight: self.float("pretrain.adv_weight"),
            adversarial: self.bool("pretrain.adversarial"),
            corruption: CorruptionSpec {
                patch_size: self.usize("pretrain.patch"),
                iterations: self.usize("pretrain.swaps"),
                seed: 0,
            },
            seed: self.seed(),
            ..Default::default()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.usize("finetune.epochs"),
            lr: self.float("finetune.lr"),
            batch_patients: self.usize("finetune.batch"),
            weight_decay: self.float("finetune.weight_decay"),
            input_mode: match self.str("finetune.input") {
                "image" => InputMode::Image,
                _ => InputMode::Lbp,
            },
            init_mode: match self.str("finetune.init") {
                "random" => InitMode::Random,
                _ => InitMode::SslCheckpoint,
            },
            trainable_convs: self.usize("finetune.trainable_convs"),
            lbp: self.lbp_spec(),
            seed: self.seed(),
            ..Default::default()
        }
    }

    pub fn task(&self) -> TaskSpec {
        TaskSpec::new(self.str("finetune.task").parse().expect("validated choice"))
    }

    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        self.str("eval.tasks")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<Task>()
                    .map(TaskSpec::new)
                    .map_err(|_| Error::TypeMismatch {
                        key: "eval.tasks".into(),
                        expected: "comma-separated task names".into(),
                        got: s.to_string(),
                    })
            })
            .collect()
    }

    pub fn fold_settings(&self) -> FoldSettings {
        FoldSettings {
            k: self.usize("eval.folds"),
            repeats: self.usize("eval.repeats"),
            val_patients: self.usize("eval.val_patients"),
            seed: self.seed(),
        }
    }
}
