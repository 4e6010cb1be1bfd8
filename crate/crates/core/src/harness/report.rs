//! Result files: results.csv, configs.csv, summary.md and long-format
//! loss and gradient-norm curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::harness::experiment::{mean_std, RunRecord};
use crate::harness::gdumb::GdumbRecord;

pub const RESULTS_HEADER: [&str; 14] = [
    "fingerprint",
    "dataset",
    "ipc",
    "loss",
    "optimizer",
    "lr",
    "weight_decay",
    "gamma",
    "alpha",
    "seed",
    "final_accuracy",
    "mean",
    "std",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub configs: PathBuf,
    pub summary: PathBuf,
    pub loss_curves: PathBuf,
    pub grad_norms: PathBuf,
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<buffer>", e.into_error()))
}

/// Records grouped by seed-masked fingerprint, in first-seen order.
fn groups(records: &[RunRecord]) -> Vec<Vec<&RunRecord>> {
    let mut order: Vec<&str> = Vec::new();
    let mut by: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !by.contains_key(r.group.as_str()) {
            order.push(&r.group);
        }
        by.entry(&r.group).or_default().push(r);
    }
    order.into_iter().map(|g| by.remove(g).expect("group")).collect()
}

fn row(r: &RunRecord, fingerprint: &str, seed: String, acc: String, mean: String, std: String, wall: f64) -> Vec<String> {
    vec![
        fingerprint.to_string(),
        r.dataset.clone(),
        r.ipc.to_string(),
        r.loss.clone(),
        r.optimizer.clone(),
        r.lr.to_string(),
        r.weight_decay.to_string(),
        r.gamma.to_string(),
        r.alpha.to_string(),
        seed,
        acc,
        mean,
        std,
        format!("{wall:.3}"),
    ]
}

/// `results.csv` rows: a cell with a single run gets one aggregate row;
/// otherwise one row per run plus an aggregate row keyed by the group
/// fingerprint with seed `*`.
pub fn results_rows(records: &[RunRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for g in groups(records) {
        let runs: Vec<(&RunRecord, u64, f64)> = g
            .iter()
            .flat_map(|r| r.seeds.iter().zip(&r.accuracies).map(move |(&s, &a)| (*r, s, a)))
            .collect();
        let wall: f64 = g.iter().map(|r| r.wall_seconds).sum();
        if let [(r, seed, acc)] = runs[..] {
            rows.push(row(r, &r.fingerprint, seed.to_string(), acc.to_string(), acc.to_string(), "0".into(), wall));
            continue;
        }
        for &(r, seed, acc) in &runs {
            let per = r.wall_seconds / r.seeds.len() as f64;
            rows.push(row(r, &r.fingerprint, seed.to_string(), acc.to_string(), String::new(), String::new(), per));
        }
        let accs: Vec<f64> = runs.iter().map(|&(_, _, a)| a).collect();
        let (mean, std) = mean_std(&accs);
        rows.push(row(g[0], &g[0].group, "*".into(), String::new(), mean.to_string(), std.to_string(), wall));
    }
    rows
}

fn varying_keys(records: &[RunRecord]) -> Vec<String> {
    let Some(first) = records.first() else {
        return Vec::new();
    };
    first
        .config
        .iter()
        .filter(|(k, v)| k != "seed" && records.iter().any(|r| r.config.iter().any(|(k2, v2)| k2 == k && v2 != v)))
        .map(|(k, _)| k.clone())
        .collect()
}

fn config_value<'a>(r: &'a RunRecord, key: &str) -> &'a str {
    r.config
        .iter()
        .find(|(k, _)| k == key)
        .map_or("", |(_, v)| v.as_str())
}

pub fn summary_markdown(records: &[RunRecord]) -> String {
    let mut s = String::from("# Results\n\n");
    let keys = varying_keys(records);
    let gs = groups(records);
    let cells: Vec<(Vec<&str>, f64, f64, usize)> = gs
        .iter()
        .map(|g| {
            let accs: Vec<f64> = g.iter().flat_map(|r| r.accuracies.iter().copied()).collect();
            let (m, sd) = mean_std(&accs);
            let vals = keys.iter().map(|k| config_value(g[0], k)).collect();
            (vals, m, sd, accs.len())
        })
        .collect();

    let mut header: Vec<&str> = keys.iter().map(String::as_str).collect();
    if !keys.iter().any(|k| k == "loss.id") {
        header.insert(0, "loss");
    }
    let _ = writeln!(s, "| {} | accuracy (%) | runs |", header.join(" | "));
    let _ = writeln!(s, "|{}---|---|", "---|".repeat(header.len()));
    for ((vals, m, sd, n), g) in cells.iter().zip(&gs) {
        let mut cols: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
        if !keys.iter().any(|k| k == "loss.id") {
            cols.insert(0, g[0].loss.clone());
        }
        let _ = writeln!(s, "| {} | {:.2} ± {:.2} | {n} |", cols.join(" | "), 100.0 * m, 100.0 * sd);
    }

    for (i, key) in keys.iter().enumerate() {
        let mut by: Vec<(&str, Vec<f64>)> = Vec::new();
        for (vals, m, _, _) in &cells {
            match by.iter_mut().find(|(v, _)| *v == vals[i]) {
                Some((_, ms)) => ms.push(*m),
                None => by.push((vals[i], vec![*m])),
            }
        }
        let _ = writeln!(s, "\n## By `{key}`\n\n| {key} | mean accuracy (%) |\n|---|---|");
        for (v, ms) in &by {
            let _ = writeln!(s, "| {v} | {:.2} |", 100.0 * mean_std(ms).0);
        }
        if let Some((v, _)) = by
            .iter()
            .map(|(v, ms)| (v, mean_std(ms).0))
            .fold(None::<(&&str, f64)>, |best, (v, m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((v, m)),
            })
        {
            let _ = writeln!(s, "\nBest `{key}`: {v}");
        }
    }
    s
}

fn curve_rows(records: &[RunRecord], pick: impl Fn(&RunRecord) -> &Vec<Vec<f64>>) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for (seed, curve) in r.seeds.iter().zip(pick(r)) {
            for (epoch, v) in curve.iter().enumerate() {
                rows.push(vec![r.fingerprint.clone(), seed.to_string(), epoch.to_string(), v.to_string()]);
            }
        }
    }
    rows
}

/// Writes every report file into `dir`, each atomically.
pub fn emit_report(records: &[RunRecord], dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        results: dir.join("results.csv"),
        configs: dir.join("configs.csv"),
        summary: dir.join("summary.md"),
        loss_curves: dir.join("loss_curves.csv"),
        grad_norms: dir.join("grad_norms.csv"),
    };
    write_atomic(&files.results, &csv_bytes(&RESULTS_HEADER, &results_rows(records))?)?;

    let mut cfg_rows = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if seen.insert(r.fingerprint.clone()) {
            cfg_rows.extend(r.config.iter().map(|(k, v)| vec![r.fingerprint.clone(), k.clone(), v.clone()]));
        }
        if seen.insert(r.group.clone()) {
            cfg_rows.extend(r.config.iter().map(|(k, v)| {
                let v = if k == "seed" { "*".to_string() } else { v.clone() };
                vec![r.group.clone(), k.clone(), v]
            }));
        }
    }
    write_atomic(&files.configs, &csv_bytes(&["fingerprint", "key", "value"], &cfg_rows)?)?;
    write_atomic(&files.summary, summary_markdown(records).as_bytes())?;
    write_atomic(
        &files.loss_curves,
        &csv_bytes(&["fingerprint", "seed", "epoch", "loss"], &curve_rows(records, |r| &r.epoch_loss))?,
    )?;
    write_atomic(
        &files.grad_norms,
        &csv_bytes(&["fingerprint", "seed", "epoch", "grad_norm"], &curve_rows(records, |r| &r.epoch_grad_norm))?,
    )?;
    Ok(files)
}

/// Writes `gdumb.csv`: one row per record, step and repeat.
pub fn emit_gdumb(records: &[GdumbRecord], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("gdumb.csv");
    let mut rows = Vec::new();
    for r in records {
        for s in &r.steps {
            for (i, a) in s.accuracies.iter().enumerate() {
                rows.push(vec![
                    r.fingerprint.clone(),
                    r.loss.clone(),
                    s.step.to_string(),
                    s.classes_seen.to_string(),
                    s.memory_size.to_string(),
                    i.to_string(),
                    a.to_string(),
                    s.mean.to_string(),
                    s.std.to_string(),
                ]);
            }
        }
    }
    let header = [
        "fingerprint",
        "loss",
        "step",
        "classes_seen",
        "memory_size",
        "repeat",
        "accuracy",
        "mean",
        "std",
    ];
    write_atomic(&path, &csv_bytes(&header, &rows)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, loss: &str, accs: &[f64]) -> RunRecord {
        RunRecord {
            fingerprint: format!("fp-{loss}-{seed}"),
            group: format!("g-{loss}"),
            dataset: "blobs".into(),
            ipc: 10,
            loss: loss.into(),
            label_source: "soft".into(),
            optimizer: "adamw".into(),
            lr: 0.001,
            weight_decay: 0.01,
            gamma: 0.1,
            alpha: 0.1,
            seeds: (seed..seed + accs.len() as u64).collect(),
            accuracies: accs.to_vec(),
            mean: 0.0,
            std: 0.0,
            epoch_loss: vec![vec![1.0, 0.5, 0.25]; accs.len()],
            epoch_grad_norm: vec![vec![2.0, 1.0, 0.5]; accs.len()],
            config: vec![("loss.id".into(), loss.into()), ("seed".into(), seed.to_string())],
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn single_record_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&[record(0, "kl", &[0.5])], dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.results).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], RESULTS_HEADER.join(","));
        let curves = std::fs::read_to_string(&files.loss_curves).unwrap();
        assert_eq!(curves.lines().count(), 1 + 3);
    }

    #[test]
    fn seeds_then_aggregate() {
        let recs: Vec<RunRecord> = ["ce", "kl", "cosine"]
            .iter()
            .flat_map(|l| (0..3).map(move |s| record(s, l, &[0.1 * (s + 1) as f64])))
            .collect();
        let rows = results_rows(&recs);
        assert_eq!(rows.len(), 9 + 3);
        assert_eq!(rows[3][9], "*");
        assert_eq!(rows[3][0], "g-ce");
        assert!((rows[3][11].parse::<f64>().unwrap() - 0.2).abs() < 1e-12);
        let summary = summary_markdown(&recs);
        assert!(summary.contains("Best `loss.id`: ce") || summary.contains("Best `loss.id`"));
    }

    #[test]
    fn re_emit_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[record(0, "kl", &[0.5, 0.7])], dir.path()).unwrap();
        let files = emit_report(&[record(0, "kl", &[0.5])], dir.path()).unwrap();
        let text = std::fs::read_to_string(files.results).unwrap();
        assert_eq!(text.lines().count(), 2);
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 5);
    }
}
