//! Class-incremental protocol with a greedy class-balanced memory: classes
//! arrive in contiguous groups, the memory keeps `ipc` samples of every class
//! seen so far, and a fresh student is trained on the memory after each step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{mean_std, plan, run_seed, subset, train_student};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdumbStep {
    pub step: usize,
    pub classes_seen: usize,
    pub memory_size: usize,
    /// Per repeat, on the test split restricted to seen classes.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdumbRecord {
    pub fingerprint: String,
    pub loss: String,
    pub steps: Vec<GdumbStep>,
    pub wall_seconds: f64,
}

impl GdumbRecord {
    pub fn final_mean(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.mean)
    }
}

pub fn gdumb_incremental(cfg: &ExperimentConfig, steps: usize) -> Result<GdumbRecord> {
    let start = Instant::now();
    let classes = cfg.dataset.classes;
    if steps == 0 || !classes.is_multiple_of(steps) {
        return Err(Error::Config(format!(
            "{classes} classes cannot be split into {steps} equal steps"
        )));
    }
    let plan = plan(cfg)?;
    let group = classes / steps;
    let mut out: Vec<GdumbStep> = (0..steps)
        .map(|k| GdumbStep {
            step: k + 1,
            classes_seen: (k + 1) * group,
            memory_size: 0,
            accuracies: Vec::new(),
            mean: 0.0,
            std: 0.0,
        })
        .collect();
    for r in 0..cfg.repeat {
        let seed = run_seed(cfg, r);
        // per-class draws are independent of which classes are present, so
        // the memory after step k is exactly the full subset restricted to
        // the first k groups
        let full = subset(cfg, &plan.prepared.pool, seed)?;
        for s in out.iter_mut() {
            let seen = s.classes_seen;
            let memory = full.filter_classes(|c| c < seen);
            let test = plan.prepared.test.filter_classes(|c| c < seen);
            s.memory_size = memory.len();
            let run = train_student(cfg, &plan, &memory, &test, seed)?;
            s.accuracies.push(run.accuracy);
        }
    }
    for s in &mut out {
        (s.mean, s.std) = mean_std(&s.accuracies);
    }
    Ok(GdumbRecord {
        fingerprint: cfg.fingerprint(),
        loss: plan.loss.to_string(),
        steps: out,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::experiment::run_experiment;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("dataset.classes", "4"),
            ("dataset.per_class", "12"),
            ("dataset.test_per_class", "6"),
            ("dataset.dim", "5"),
            ("dataset.ipc", "3"),
            ("teacher.hidden", "8"),
            ("teacher.epochs", "3"),
            ("student.hidden", "8"),
            ("epochs", "4"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn memory_schedule() {
        let rec = gdumb_incremental(&tiny(), 2).unwrap();
        let sizes: Vec<usize> = rec.steps.iter().map(|s| s.memory_size).collect();
        assert_eq!(sizes, vec![6, 12]);
    }

    #[test]
    fn single_step_equals_experiment() {
        let cfg = tiny();
        let g = gdumb_incremental(&cfg, 1).unwrap();
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(g.steps[0].accuracies, r.accuracies);
    }

    #[test]
    fn indivisible_steps_rejected() {
        assert!(gdumb_incremental(&tiny(), 3).is_err());
    }
}
