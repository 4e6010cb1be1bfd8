//! Label matrices: one-hot, smoothed, teacher soft labels and refined
//! labels, plus their on-disk formats.

use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::graph::NORM_FLOOR;
use crate::models::{forward, TrainedModel};
use crate::tensor::Tensor;

pub const LABEL_MAGIC: &[u8; 4] = b"GLBL";
pub const LABEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRole {
    Hard,
    Smoothed,
    Soft,
    Refined,
}

impl LabelRole {
    pub fn code(self) -> u8 {
        match self {
            LabelRole::Hard => 0,
            LabelRole::Smoothed => 1,
            LabelRole::Soft => 2,
            LabelRole::Refined => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LabelRole::Hard,
            1 => LabelRole::Smoothed,
            2 => LabelRole::Soft,
            3 => LabelRole::Refined,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelRole::Hard => "hard",
            LabelRole::Smoothed => "smoothed",
            LabelRole::Soft => "soft",
            LabelRole::Refined => "refined",
        }
    }
}

impl fmt::Display for LabelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An `N x C` label matrix tagged with its role.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    values: Tensor,
    role: LabelRole,
    source: String,
}

impl LabelMatrix {
    /// Wraps `values` after checking the invariants of `role`.
    pub fn new(values: Tensor, role: LabelRole, source: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::invalid(format!(
                "label matrix must be 2-D, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("label matrix has non-finite entries"));
        }
        let c = values.shape()[1];
        for i in 0..values.rows() {
            let row = values.row(i);
            let sum: f64 = row.iter().sum();
            let bad = match role {
                LabelRole::Hard => {
                    row.iter().filter(|&&v| v == 1.0).count() != 1
                        || row.iter().any(|&v| v != 0.0 && v != 1.0)
                }
                LabelRole::Smoothed | LabelRole::Soft => {
                    (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0)
                }
                LabelRole::Refined => {
                    let norm = l2(row);
                    !(norm > 0.0 && norm <= 2.0)
                }
            };
            if bad {
                return Err(Error::invalid(format!(
                    "row {i} violates the {role} label invariant (C = {c})"
                )));
            }
        }
        Ok(Self {
            values,
            role,
            source: source.into(),
        })
    }

    /// One-hot labels from class indices.
    pub fn from_classes(classes: &[usize], num_classes: usize) -> Result<Self> {
        let mut values = Tensor::zeros(&[classes.len(), num_classes]);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::invalid(format!(
                    "class {c} at row {i} out of range for {num_classes} classes"
                )));
            }
            values.row_mut(i)[c] = 1.0;
        }
        Ok(Self {
            values,
            role: LabelRole::Hard,
            source: "ground truth".into(),
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn role(&self) -> LabelRole {
        self.role
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    /// Per-row argmax, lowest index on ties.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            values: self.values.select_rows(indices),
            role: self.role,
            source: self.source.clone(),
        }
    }

    /// Rows rescaled to sum to one, for losses that need a distribution.
    pub fn as_distribution(&self) -> Result<Tensor> {
        let mut out = self.values.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(format!("negative target entry in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if sum <= 0.0 {
                return Err(Error::ZeroNormRow {
                    what: format!("{} labels", self.role),
                    row: i,
                });
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, c) = (self.len(), self.num_classes());
        let mut buf = Vec::with_capacity(25 + 8 * n * c);
        buf.extend_from_slice(LABEL_MAGIC);
        buf.extend_from_slice(&LABEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(c as u64).to_le_bytes());
        buf.push(self.role.code());
        for v in self.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], source: impl Into<String>) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != LABEL_MAGIC {
            return Err(Error::invalid("bad magic: not a label matrix file"));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != LABEL_VERSION {
            return Err(Error::invalid(format!("unsupported label file version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        read_exact(&mut r, &mut b8)?;
        let c = u64::from_le_bytes(b8) as usize;
        let mut code = [0u8; 1];
        read_exact(&mut r, &mut code)?;
        let role = LabelRole::from_code(code[0])
            .ok_or_else(|| Error::invalid(format!("unknown role code {}", code[0])))?;
        let count = n
            .checked_mul(c)
            .ok_or_else(|| Error::invalid("label dimensions overflow"))?;
        if r.len() != count * 8 {
            return Err(Error::invalid(format!(
                "label payload has {} bytes, expected {}",
                r.len(),
                count * 8
            )));
        }
        let data = r
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("chunk of 8")))
            .collect();
        Self::new(Tensor::new(vec![n, c], data)?, role, source)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, format!("file:{}", path.display()))
    }

    /// Writes `<dir>/<stem>_<role>.csv`, one row per sample.
    pub fn export_csv(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let path = dir.join(format!("{stem}_{}.csv", self.role));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["sample".to_string()];
        header.extend((0..self.num_classes()).map(|c| format!("c{c}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::invalid("label file truncated"))
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Rows divided by their L2 norm. Zero rows are an error, not clamped.
pub fn normalize_rows(values: &Tensor, what: &str) -> Result<Tensor> {
    let mut out = values.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = l2(row);
        if norm < NORM_FLOOR {
            return Err(Error::ZeroNormRow {
                what: what.to_string(),
                row: i,
            });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// `(1 - alpha) * onehot + alpha / C`.
pub fn smooth_labels(hard: &LabelMatrix, alpha: f64) -> Result<LabelMatrix> {
    if hard.role() != LabelRole::Hard {
        return Err(Error::LabelRole {
            expected: "hard".into(),
            found: hard.role().to_string(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("smoothing alpha {alpha} outside [0, 1]")));
    }
    let c = hard.num_classes() as f64;
    let values = hard.values().map(|v| (1.0 - alpha) * v + alpha / c);
    LabelMatrix::new(values, LabelRole::Smoothed, format!("smoothed alpha={alpha}"))
}

/// Teacher probabilities `softmax(teacher(images))`.
pub fn generate_soft_labels(teacher: &TrainedModel, images: &Tensor) -> Result<LabelMatrix> {
    let logits = forward(teacher, images)?;
    LabelMatrix::new(
        softmax_rows(&logits),
        LabelRole::Soft,
        format!("teacher {}", teacher.spec.describe()),
    )
}

/// Row-wise `gamma * a/|a| + (1 - gamma) * b/|b|` on raw matrices.
pub fn refine_rows(smoothed: &Tensor, soft: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    if smoothed.shape() != soft.shape() {
        return Err(Error::invalid(format!(
            "label shapes differ: {:?} vs {:?}",
            smoothed.shape(),
            soft.shape()
        )));
    }
    let a = normalize_rows(smoothed, "smoothed labels")?;
    let b = normalize_rows(soft, "soft labels")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| gamma * x + (1.0 - gamma) * y)
        .collect();
    Tensor::new(smoothed.shape().to_vec(), data)
}

/// Refined labels from smoothed hard labels and teacher soft labels.
pub fn refine_labels(smoothed: &LabelMatrix, soft: &LabelMatrix, gamma: f64) -> Result<LabelMatrix> {
    if !matches!(smoothed.role(), LabelRole::Smoothed | LabelRole::Hard) {
        return Err(Error::LabelRole {
            expected: "smoothed".into(),
            found: smoothed.role().to_string(),
        });
    }
    if soft.role() != LabelRole::Soft {
        return Err(Error::LabelRole {
            expected: "soft".into(),
            found: soft.role().to_string(),
        });
    }
    let values = refine_rows(smoothed.values(), soft.values(), gamma)?;
    LabelMatrix::new(values, LabelRole::Refined, format!("refined gamma={gamma}"))
}

/// Fraction of rows whose argmax agrees with the hard label.
pub fn label_accuracy(labels: &LabelMatrix, hard: &LabelMatrix) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("label matrix".into()));
    }
    if labels.values().shape() != hard.values().shape() {
        return Err(Error::invalid(format!(
            "label shapes differ: {:?} vs {:?}",
            labels.values().shape(),
            hard.values().shape()
        )));
    }
    let hits = labels
        .classes()
        .iter()
        .zip(hard.classes())
        .filter(|(a, b)| **a == *b)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
