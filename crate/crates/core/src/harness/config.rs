//! Experiment configuration as a flat set of dotted keys.
//!
//! Config files are TOML; nested tables flatten to dotted keys, so
//! `[optimizer]\nlr = 0.01` and `optimizer.lr = 0.01` are the same setting.
//! Sweep axes and CLI overrides go through the same [`ExperimentConfig::set`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, AugmentOp, SyntheticKind};
use crate::error::{Error, Result};
use crate::losses::LossId;
use crate::models::{ModelKind, ModelSpec};
use crate::optim::{OptimizerConfig, OptimizerKind, Schedule};
use crate::train::LabelSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic(SyntheticKind),
    Idx,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic(k) => k.fmt(f),
            DataSource::Idx => f.write_str("idx"),
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "idx" => Ok(DataSource::Idx),
            other => other.parse().map(DataSource::Synthetic),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub classes: usize,
    /// Pool size per class for synthetic data.
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Optional per-sample shape for synthetic blobs, e.g. `[1, 8, 8]`.
    pub shape: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
    pub ipc: usize,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentKind {
    Mlp,
    ConvNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub kind: StudentKind,
    pub hidden: Vec<usize>,
    pub depth: usize,
    pub width: usize,
    pub instance_norm: bool,
}

/// Which label matrix target-consuming losses train against. `Auto` picks
/// refined labels for the cosine loss, hard labels for CE and teacher soft
/// labels for everything else.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceChoice {
    Auto,
    Hard,
    Smoothed,
    Soft,
    Refined,
    TeacherLogits,
}

impl FromStr for SourceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "auto" => SourceChoice::Auto,
            "hard" => SourceChoice::Hard,
            "smoothed" => SourceChoice::Smoothed,
            "soft" => SourceChoice::Soft,
            "refined" => SourceChoice::Refined,
            "teacher_logits" => SourceChoice::TeacherLogits,
            other => return Err(Error::Config(format!("unknown label source `{other}`"))),
        })
    }
}

impl fmt::Display for SourceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceChoice::Auto => "auto",
            SourceChoice::Hard => "hard",
            SourceChoice::Smoothed => "smoothed",
            SourceChoice::Soft => "soft",
            SourceChoice::Refined => "refined",
            SourceChoice::TeacherLogits => "teacher_logits",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub source: SourceChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub labels: LabelConfig,
    pub loss: String,
    pub temperature: f64,
    pub weight_a: f64,
    pub weight_b: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// `None` uses the optimizer's default.
    pub weight_decay: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    /// 0 selects the size-dependent rule.
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub repeat: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                source: DataSource::Synthetic(SyntheticKind::Blobs),
                classes: 100,
                per_class: 50,
                test_per_class: 20,
                dim: 64,
                shape: Vec::new(),
                noise: 0.5,
                seed: 0,
                ipc: 10,
                train_images: None,
                train_labels: None,
                test_images: None,
                test_labels: None,
                standardize: false,
            },
            teacher: TeacherConfig {
                hidden: vec![128],
                epochs: 30,
                lr: 0.001,
                optimizer: OptimizerKind::Adam,
                weight_decay: 0.0,
            },
            student: StudentConfig {
                kind: StudentKind::Mlp,
                hidden: vec![128],
                depth: 3,
                width: 128,
                instance_norm: false,
            },
            labels: LabelConfig {
                alpha: 0.1,
                gamma: 0.1,
                source: SourceChoice::Auto,
            },
            loss: "cosine".into(),
            temperature: 1.0,
            weight_a: 1.0,
            weight_b: 1.0,
            optimizer: OptimizerKind::AdamW,
            lr: 0.001,
            weight_decay: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::MultiStep,
            epochs: 100,
            batch_size: 0,
            augment: AugmentConfig::default(),
            repeat: 1,
            seed: 0,
            output: PathBuf::from("results"),
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "augment.ops",
    "augment.per_sample",
    "batch_size",
    "dataset.classes",
    "dataset.dim",
    "dataset.ipc",
    "dataset.noise",
    "dataset.per_class",
    "dataset.seed",
    "dataset.shape",
    "dataset.source",
    "dataset.standardize",
    "dataset.test_images",
    "dataset.test_labels",
    "dataset.test_per_class",
    "dataset.train_images",
    "dataset.train_labels",
    "epochs",
    "labels.alpha",
    "labels.gamma",
    "labels.source",
    "loss.id",
    "loss.temperature",
    "loss.weight_a",
    "loss.weight_b",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "optimizer.kind",
    "optimizer.lr",
    "optimizer.weight_decay",
    "output",
    "repeat",
    "schedule",
    "seed",
    "student.depth",
    "student.hidden",
    "student.kind",
    "student.norm",
    "student.width",
    "teacher.epochs",
    "teacher.hidden",
    "teacher.lr",
    "teacher.optimizer",
    "teacher.weight_decay",
];

/// Short names accepted wherever a key is.
const ALIASES: &[(&str, &str)] = &[
    ("loss", "loss.id"),
    ("optimizer", "optimizer.kind"),
    ("gamma", "labels.gamma"),
    ("alpha", "labels.alpha"),
    ("lr", "optimizer.lr"),
    ("weight_decay", "optimizer.weight_decay"),
    ("ipc", "dataset.ipc"),
];

/// Keys that do not affect results and stay out of the fingerprint.
const UNHASHED: &[&str] = &["output"];

pub fn canonical_key(key: &str) -> Result<&'static str> {
    let key = key.trim();
    let key = ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key, |(_, k)| k);
    KEYS.iter()
        .find(|k| **k == key)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = canonical_key(key)?;
        let v = value.trim();
        let d = &mut self.dataset;
        match key {
            "augment.ops" => {
                self.augment.ops = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(AugmentOp::from_str).collect::<Result<_>>()?
                }
            }
            "augment.per_sample" => self.augment.per_sample = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dataset.classes" => d.classes = parse(key, v)?,
            "dataset.dim" => d.dim = parse(key, v)?,
            "dataset.ipc" => d.ipc = parse(key, v)?,
            "dataset.noise" => d.noise = parse(key, v)?,
            "dataset.per_class" => d.per_class = parse(key, v)?,
            "dataset.seed" => d.seed = parse(key, v)?,
            "dataset.shape" => d.shape = parse_list(key, v)?,
            "dataset.source" => d.source = v.parse()?,
            "dataset.standardize" => d.standardize = parse(key, v)?,
            "dataset.test_images" => d.test_images = parse_path(v),
            "dataset.test_labels" => d.test_labels = parse_path(v),
            "dataset.test_per_class" => d.test_per_class = parse(key, v)?,
            "dataset.train_images" => d.train_images = parse_path(v),
            "dataset.train_labels" => d.train_labels = parse_path(v),
            "epochs" => self.epochs = parse(key, v)?,
            "labels.alpha" => self.labels.alpha = parse(key, v)?,
            "labels.gamma" => self.labels.gamma = parse(key, v)?,
            "labels.source" => self.labels.source = v.parse()?,
            "loss.id" => {
                v.parse::<LossId>()?;
                self.loss = v.to_string();
            }
            "loss.temperature" => self.temperature = parse(key, v)?,
            "loss.weight_a" => self.weight_a = parse(key, v)?,
            "loss.weight_b" => self.weight_b = parse(key, v)?,
            "optimizer.beta1" => self.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.beta2 = parse(key, v)?,
            "optimizer.eps" => self.eps = parse(key, v)?,
            "optimizer.kind" => self.optimizer = v.parse()?,
            "optimizer.lr" => self.lr = parse(key, v)?,
            "optimizer.weight_decay" => {
                self.weight_decay = if v == "default" { None } else { Some(parse(key, v)?) }
            }
            "output" => self.output = PathBuf::from(v),
            "repeat" => self.repeat = parse(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "student.depth" => self.student.depth = parse(key, v)?,
            "student.hidden" => self.student.hidden = parse_list(key, v)?,
            "student.kind" => {
                self.student.kind = match v {
                    "mlp" => StudentKind::Mlp,
                    "convnet" => StudentKind::ConvNet,
                    _ => return Err(Error::Config(format!("unknown student kind `{v}`"))),
                }
            }
            "student.norm" => {
                self.student.instance_norm = match v {
                    "none" => false,
                    "instance" => true,
                    _ => return Err(Error::Config(format!("unknown normalization `{v}`"))),
                }
            }
            "student.width" => self.student.width = parse(key, v)?,
            "teacher.epochs" => self.teacher.epochs = parse(key, v)?,
            "teacher.hidden" => self.teacher.hidden = parse_list(key, v)?,
            "teacher.lr" => self.teacher.lr = parse(key, v)?,
            "teacher.optimizer" => self.teacher.optimizer = v.parse()?,
            "teacher.weight_decay" => self.teacher.weight_decay = parse(key, v)?,
            _ => unreachable!("key list and setter out of sync: {key}"),
        }
        Ok(())
    }

    /// The canonical string form of `key`'s current value.
    pub fn get(&self, key: &str) -> Result<String> {
        let key = canonical_key(key)?;
        let d = &self.dataset;
        Ok(match key {
            "augment.ops" => join(&self.augment.ops),
            "augment.per_sample" => self.augment.per_sample.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dataset.classes" => d.classes.to_string(),
            "dataset.dim" => d.dim.to_string(),
            "dataset.ipc" => d.ipc.to_string(),
            "dataset.noise" => d.noise.to_string(),
            "dataset.per_class" => d.per_class.to_string(),
            "dataset.seed" => d.seed.to_string(),
            "dataset.shape" => join(&d.shape),
            "dataset.source" => d.source.to_string(),
            "dataset.standardize" => d.standardize.to_string(),
            "dataset.test_images" => path_str(&d.test_images),
            "dataset.test_labels" => path_str(&d.test_labels),
            "dataset.test_per_class" => d.test_per_class.to_string(),
            "dataset.train_images" => path_str(&d.train_images),
            "dataset.train_labels" => path_str(&d.train_labels),
            "epochs" => self.epochs.to_string(),
            "labels.alpha" => self.labels.alpha.to_string(),
            "labels.gamma" => self.labels.gamma.to_string(),
            "labels.source" => self.labels.source.to_string(),
            "loss.id" => self.loss.clone(),
            "loss.temperature" => self.temperature.to_string(),
            "loss.weight_a" => self.weight_a.to_string(),
            "loss.weight_b" => self.weight_b.to_string(),
            "optimizer.beta1" => self.beta1.to_string(),
            "optimizer.beta2" => self.beta2.to_string(),
            "optimizer.eps" => self.eps.to_string(),
            "optimizer.kind" => self.optimizer.to_string(),
            "optimizer.lr" => self.lr.to_string(),
            "optimizer.weight_decay" => self.optimizer_config().weight_decay.to_string(),
            "output" => self.output.display().to_string(),
            "repeat" => self.repeat.to_string(),
            "schedule" => self.schedule.to_string(),
            "seed" => self.seed.to_string(),
            "student.depth" => self.student.depth.to_string(),
            "student.hidden" => join(&self.student.hidden),
            "student.kind" => match self.student.kind {
                StudentKind::Mlp => "mlp".into(),
                StudentKind::ConvNet => "convnet".into(),
            },
            "student.norm" => if self.student.instance_norm { "instance" } else { "none" }.into(),
            "student.width" => self.student.width.to_string(),
            "teacher.epochs" => self.teacher.epochs.to_string(),
            "teacher.hidden" => join(&self.teacher.hidden),
            "teacher.lr" => self.teacher.lr.to_string(),
            "teacher.optimizer" => self.teacher.optimizer.to_string(),
            "teacher.weight_decay" => self.teacher.weight_decay.to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        })
    }

    /// Parses TOML text on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// `(key, value)` for every hashed key, sorted by key.
    pub fn canonical_pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .filter(|k| !UNHASHED.contains(k))
            .map(|k| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical `key=value` lines.
    pub fn fingerprint(&self) -> String {
        fingerprint_pairs(&self.canonical_pairs())
    }

    /// Fingerprint with the seed masked, shared by every seed of a cell.
    pub fn group_fingerprint(&self) -> String {
        fingerprint_pairs(&self.group_pairs())
    }

    pub fn group_pairs(&self) -> Vec<(String, String)> {
        self.canonical_pairs()
            .into_iter()
            .map(|(k, v)| if k == "seed" { (k, "*".into()) } else { (k, v) })
            .collect()
    }

    pub fn loss_id(&self) -> Result<LossId> {
        let id: LossId = self.loss.parse()?;
        let id = match id {
            LossId::Combo { a, b, .. } => LossId::Combo {
                a,
                b,
                w_a: self.weight_a,
                w_b: self.weight_b,
            },
            other => other,
        };
        let id = id.with_temperature(self.temperature);
        id.validate()?;
        Ok(id)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let base = OptimizerConfig::new(self.optimizer, self.lr);
        OptimizerConfig {
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ..base
        }
    }

    pub fn teacher_optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::new(self.teacher.optimizer, self.teacher.lr).with_weight_decay(self.teacher.weight_decay)
    }

    /// Resolves `labels.source` against the configured loss.
    pub fn label_source(&self) -> Result<LabelSource> {
        let (alpha, gamma) = (self.labels.alpha, self.labels.gamma);
        Ok(match self.labels.source {
            SourceChoice::Auto => match self.loss_id()? {
                LossId::Cosine => LabelSource::Refined { alpha, gamma },
                LossId::Ce => LabelSource::Hard,
                _ => LabelSource::Soft,
            },
            SourceChoice::Hard => LabelSource::Hard,
            SourceChoice::Smoothed => LabelSource::Smoothed { alpha },
            SourceChoice::Soft => LabelSource::Soft,
            SourceChoice::Refined => LabelSource::Refined { alpha, gamma },
            SourceChoice::TeacherLogits => LabelSource::TeacherLogits,
        })
    }

    /// Per-sample input shape of the configured data.
    pub fn sample_shape(&self) -> Vec<usize> {
        if self.dataset.shape.is_empty() {
            vec![self.dataset.dim]
        } else {
            self.dataset.shape.clone()
        }
    }

    pub fn student_spec(&self, input_shape: &[usize], classes: usize, seed: u64) -> ModelSpec {
        let kind = match self.student.kind {
            StudentKind::Mlp => ModelKind::Mlp {
                hidden: self.student.hidden.clone(),
            },
            StudentKind::ConvNet => ModelKind::ConvNet {
                depth: self.student.depth,
                width: self.student.width,
                instance_norm: self.student.instance_norm,
            },
        };
        ModelSpec {
            kind,
            input_shape: input_shape.to_vec(),
            classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repeat < 1 {
            return bad("repeat must be at least 1".into());
        }
        for (name, v) in [("labels.alpha", self.labels.alpha), ("labels.gamma", self.labels.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.dataset.ipc == 0 {
            return bad("dataset.ipc must be positive".into());
        }
        if self.dataset.classes < 2 {
            return bad("dataset.classes must be at least 2".into());
        }
        self.loss_id()?;
        self.optimizer_config().validate()?;
        self.teacher_optimizer().validate()?;
        if self.dataset.source == DataSource::Idx {
            for (name, p) in [
                ("dataset.train_images", &self.dataset.train_images),
                ("dataset.train_labels", &self.dataset.train_labels),
                ("dataset.test_images", &self.dataset.test_images),
                ("dataset.test_labels", &self.dataset.test_labels),
            ] {
                match p {
                    None => return bad(format!("{name} is required for idx data")),
                    Some(p) if !p.exists() => return bad(format!("{name}: {} does not exist", p.display())),
                    Some(_) => {}
                }
            }
        } else if !self.dataset.shape.is_empty() && self.dataset.shape.iter().product::<usize>() == 0 {
            return bad(format!("bad dataset.shape {:?}", self.dataset.shape));
        }
        Ok(())
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn diff_keys(&self, other: &Self) -> Vec<&'static str> {
        KEYS.iter()
            .copied()
            .filter(|k| self.get(k).ok() != other.get(k).ok())
            .collect()
    }
}

fn fingerprint_pairs(pairs: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in pairs {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    use toml::Value;
    let scalar = |v: &Value| -> Result<String> {
        Ok(match v {
            Value::String(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Float(f) => f.to_string(),
            Value::Boolean(b) => b.to_string(),
            other => return Err(Error::Config(format!("unsupported value `{other}` for `{prefix}`"))),
        })
    };
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar).collect::<Result<_>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        v => out.push((prefix.to_string(), scalar(v)?)),
    }
    Ok(())
}

/// Parses `key=v1,v2,...` into an axis. Values may not contain commas, so
/// list-valued keys take `;` as the value separator instead.
pub fn parse_axis(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("axis `{spec}` is not key=values")))?;
    let key = canonical_key(key)?.to_string();
    let sep = if values.contains(';') { ';' } else { ',' };
    let values: Vec<String> = values.split(sep).map(|v| v.trim().to_string()).collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::Config(format!("axis `{spec}` has an empty value")));
    }
    Ok((key, values))
}

/// Maps of key to value for `cfg`, for reporting.
pub fn as_map(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    cfg.canonical_pairs().into_iter().collect()
}
