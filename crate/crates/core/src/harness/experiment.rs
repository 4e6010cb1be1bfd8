//! One experiment: data, teacher, labels, subset, students.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::idx::standardize_channels;
use crate::data::{load_idx, select_ipc_subset, DatasetBundle, SyntheticKind, SyntheticSpec};
use crate::error::{Result, StageExt};
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::labels::generate_soft_labels;
use crate::losses::LossId;
use crate::models::{build_model, predict_logits, ModelKind, ModelSpec, TrainedModel};
use crate::rng::derive_seed;
use crate::train::{train_model, train_teacher, LabelSource, TrainConfig};

/// Training pool (with teacher labels attached when a teacher was needed)
/// and test split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pool: DatasetBundle,
    pub test: DatasetBundle,
    pub teacher: Option<TrainedModel>,
}

/// Outcome of one configuration over its repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub group: String,
    pub dataset: String,
    pub ipc: usize,
    pub loss: String,
    pub label_source: String,
    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per run, per epoch.
    pub epoch_loss: Vec<Vec<f64>>,
    pub epoch_grad_norm: Vec<Vec<f64>>,
    pub config: Vec<(String, String)>,
    pub wall_seconds: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn data_key(cfg: &ExperimentConfig, with_teacher: bool) -> String {
    let pairs: Vec<String> = cfg
        .canonical_pairs()
        .into_iter()
        .filter(|(k, _)| k.starts_with("dataset.") || (with_teacher && k.starts_with("teacher.")))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    pairs.join("\n")
}

fn cache() -> &'static Mutex<HashMap<String, Arc<Prepared>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<Prepared>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

fn load_data(cfg: &ExperimentConfig) -> Result<(DatasetBundle, DatasetBundle)> {
    let d = &cfg.dataset;
    match d.source {
        DataSource::Synthetic(kind) => {
            let spec = match kind {
                SyntheticKind::Blobs => SyntheticSpec::blobs(d.classes, d.per_class, d.dim, d.noise, d.seed)
                    .with_shape(cfg.sample_shape()),
                SyntheticKind::Spirals => SyntheticSpec::spirals(d.classes, d.per_class, d.noise, d.seed),
            };
            spec.generate_split(d.test_per_class)
        }
        DataSource::Idx => {
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated idx path");
            let mut train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
            let mut test = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
            let classes = train.classes.max(test.classes);
            for b in [&mut train, &mut test] {
                if b.classes != classes {
                    let hard = crate::labels::LabelMatrix::from_classes(&b.hard.classes(), classes)?;
                    *b = DatasetBundle::new(b.images.clone(), hard, b.name.clone())?;
                }
            }
            if d.standardize {
                let stats = standardize_channels(&mut train.images)?;
                for (ch, (mean, std)) in stats.into_iter().enumerate() {
                    apply_channel(&mut test.images, ch, mean, std);
                }
            }
            Ok((train, test))
        }
    }
}

fn apply_channel(images: &mut crate::tensor::Tensor, ch: usize, mean: f64, std: f64) {
    let s = images.shape().to_vec();
    let plane = s[2] * s[3];
    let c = s[1];
    let data = images.data_mut();
    for n in 0..s[0] {
        let off = (n * c + ch) * plane;
        data[off..off + plane].iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

fn needs_teacher(loss: &LossId, source: &LabelSource) -> bool {
    loss.needs_target() && matches!(source, LabelSource::Soft | LabelSource::Refined { .. } | LabelSource::TeacherLogits)
}

/// Loads or generates the data and, when `with_teacher`, trains the teacher
/// and attaches its soft labels and logits to the pool. Results are cached
/// for the life of the process, keyed by the dataset and teacher settings.
pub fn prepare(cfg: &ExperimentConfig, with_teacher: bool) -> Result<Arc<Prepared>> {
    let key = data_key(cfg, with_teacher);
    if let Some(p) = cache().lock().expect("cache lock").get(&key) {
        return Ok(Arc::clone(p));
    }
    let (pool, test) = load_data(cfg).stage("data")?;
    let mut prepared = Prepared {
        pool,
        test,
        teacher: None,
    };
    if with_teacher {
        let t = &cfg.teacher;
        let spec = ModelSpec {
            kind: ModelKind::Mlp {
                hidden: t.hidden.clone(),
            },
            input_shape: prepared.pool.sample_shape().to_vec(),
            classes: prepared.pool.classes,
            seed: 0,
        };
        let teacher = train_teacher(&prepared.pool, &spec, &cfg.teacher_optimizer(), t.epochs, cfg.dataset.seed)
            .stage("teacher")?;
        let soft = generate_soft_labels(&teacher, &prepared.pool.images).stage("labels")?;
        let logits = predict_logits(&teacher, &prepared.pool.images).stage("labels")?;
        prepared.pool = prepared
            .pool
            .with_soft(soft)
            .and_then(|p| p.with_teacher_logits(logits))
            .stage("labels")?;
        prepared.teacher = Some(teacher);
    }
    let prepared = Arc::new(prepared);
    cache()
        .lock()
        .expect("cache lock")
        .insert(key, Arc::clone(&prepared));
    Ok(prepared)
}

/// Seed of repeat `r` of a configuration. Consecutive so that a config with
/// `seed = s, repeat = k` covers the same runs as `k` configs with seeds
/// `s..s+k`; every stochastic step is derived from it.
pub fn run_seed(cfg: &ExperimentConfig, repeat: usize) -> u64 {
    cfg.seed.wrapping_add(repeat as u64)
}

/// Everything one student run needs, resolved from a config.
pub(crate) struct Plan {
    pub loss: LossId,
    pub source: LabelSource,
    pub prepared: Arc<Prepared>,
}

pub(crate) fn plan(cfg: &ExperimentConfig) -> Result<Plan> {
    cfg.validate().stage("config")?;
    let loss = cfg.loss_id().stage("config")?;
    let source = cfg.label_source().stage("config")?;
    crate::train::check_compatibility(&loss, &source).stage("config")?;
    let prepared = prepare(cfg, needs_teacher(&loss, &source))?;
    Ok(Plan { loss, source, prepared })
}

/// The per-class random subset for a run seed.
pub(crate) fn subset(cfg: &ExperimentConfig, pool: &DatasetBundle, seed: u64) -> Result<DatasetBundle> {
    select_ipc_subset(pool, cfg.dataset.ipc, derive_seed(seed, "subset", &[])).stage("subset")
}

pub(crate) struct StudentRun {
    pub accuracy: f64,
    pub epoch_loss: Vec<f64>,
    pub epoch_grad_norm: Vec<f64>,
}

pub(crate) fn train_student(
    cfg: &ExperimentConfig,
    plan: &Plan,
    train: &DatasetBundle,
    test: &DatasetBundle,
    seed: u64,
) -> Result<StudentRun> {
    let spec = cfg.student_spec(train.sample_shape(), train.classes, derive_seed(seed, "student-init", &[]));
    let model = build_model(&spec).stage("student")?;
    let mut tc = TrainConfig::new(
        plan.loss.clone(),
        plan.source,
        cfg.optimizer_config(),
        cfg.epochs,
        derive_seed(seed, "train", &[]),
    );
    tc.schedule = cfg.schedule;
    tc.batch_size = (cfg.batch_size > 0).then_some(cfg.batch_size);
    tc.augment = cfg.augment.clone();
    let (_, log) = train_model(&model, train, &tc, Some(test)).stage("train")?;
    Ok(StudentRun {
        accuracy: log.test_accuracy.expect("test set attached"),
        epoch_loss: log.epoch_loss,
        epoch_grad_norm: log.epoch_grad_norm,
    })
}

/// Runs `cfg.repeat` students and aggregates them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    let plan = plan(cfg)?;
    let mut seeds = Vec::with_capacity(cfg.repeat);
    let mut runs = Vec::with_capacity(cfg.repeat);
    for r in 0..cfg.repeat {
        let seed = run_seed(cfg, r);
        let train = subset(cfg, &plan.prepared.pool, seed)?;
        runs.push(train_student(cfg, &plan, &train, &plan.prepared.test, seed)?);
        seeds.push(seed);
    }
    let accuracies: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    let opt = cfg.optimizer_config();
    Ok(RunRecord {
        fingerprint: cfg.fingerprint(),
        group: cfg.group_fingerprint(),
        dataset: plan.prepared.pool.name.clone(),
        ipc: cfg.dataset.ipc,
        loss: plan.loss.to_string(),
        label_source: plan.source.to_string(),
        optimizer: opt.kind.to_string(),
        lr: opt.lr,
        weight_decay: opt.weight_decay,
        gamma: cfg.labels.gamma,
        alpha: cfg.labels.alpha,
        seeds,
        accuracies,
        mean,
        std,
        epoch_loss: runs.iter().map(|r| r.epoch_loss.clone()).collect(),
        epoch_grad_norm: runs.into_iter().map(|r| r.epoch_grad_norm).collect(),
        config: cfg.canonical_pairs(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
